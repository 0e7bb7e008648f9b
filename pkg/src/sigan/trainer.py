"""Training loop for the two-generator, two-discriminator translation model.

One optimizer drives both generators jointly (their losses are coupled
through the cycle and strong-identity terms); each discriminator gets its
own. The learning rate is constant for a first phase, then decays linearly
to zero. An epoch is one pass over the larger domain; the smaller domain
recycles through reshuffled passes inside the sampler.
"""

import dataclasses
import itertools
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from sigan.checkpoint import load_checkpoint, save_checkpoint
from sigan.data import (
    DEFECT_CLASSES,
    BatchPair,
    DomainCollection,
    UnpairedSampler,
    augment_offline,
)
from sigan.errors import ConfigError, NonFiniteLossError, ShapeMismatchError
from sigan.losses import (
    ADVERSARIAL_MODES,
    L1_REDUCTIONS,
    LossReport,
    LossWeights,
    adversarial_loss_discriminator,
    adversarial_loss_generator,
    cycle_loss,
    strong_identity_loss,
    total_generator_loss,
)
from sigan.networks import (
    ROLE_DA,
    ROLE_DB,
    ROLE_F,
    ROLE_G,
    DiscriminatorArch,
    GeneratorArch,
    init_params,
)

logger = logging.getLogger(__name__)

UPDATE_ORDERS = ("generators_first", "discriminators_first")
NORM_KINDS = ("batch", "instance", "none")


@dataclass
class TrainConfig:
    """Flat, file-round-trippable training configuration."""

    image_size: int = 256
    base_width: int = 64
    norm: str = "batch"
    nonlocal_enabled: bool = True
    nonlocal_max_hw: int = 64
    defect_class: str = "all"
    offline_augment: bool = True
    batch_size: int = 4
    epochs_constant: int = 30
    epochs_decay: int = 30
    base_lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    epsilon: float = 1e-8
    lambda1: float = 10.0
    lambda2: float = 5.0
    adversarial_mode: str = "nonsaturating"
    l1_reduction: str = "mean"
    update_order: str = "generators_first"
    image_pool_size: int = 0
    grad_clip_norm: float = 0.0  # 0 disables clipping
    checkpoint_every: int = 10  # in epochs; 0 keeps only the final checkpoint
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.base_lr <= 0:
            raise ConfigError(f"base_lr must be positive, got {self.base_lr}")
        if self.epochs_constant < 0 or self.epochs_decay < 0:
            raise ConfigError("epoch phase lengths must be nonnegative")
        if self.total_epochs < 1:
            raise ConfigError("total epochs must be at least 1")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigError(f"betas must lie in [0, 1), got ({self.beta1}, {self.beta2})")
        if self.epsilon <= 0:
            raise ConfigError(f"epsilon must be positive, got {self.epsilon}")
        if self.adversarial_mode not in ADVERSARIAL_MODES:
            raise ConfigError(f"unknown adversarial_mode {self.adversarial_mode!r}; expected one of {ADVERSARIAL_MODES}")
        if self.l1_reduction not in L1_REDUCTIONS:
            raise ConfigError(f"unknown l1_reduction {self.l1_reduction!r}; expected one of {L1_REDUCTIONS}")
        if self.update_order not in UPDATE_ORDERS:
            raise ConfigError(f"unknown update_order {self.update_order!r}; expected one of {UPDATE_ORDERS}")
        if self.norm not in NORM_KINDS:
            raise ConfigError(f"unknown norm {self.norm!r}; expected one of {NORM_KINDS}")
        if self.defect_class not in DEFECT_CLASSES + ("all",):
            raise ConfigError(f"unknown defect_class {self.defect_class!r}")
        if self.image_pool_size < 0 or self.grad_clip_norm < 0 or self.checkpoint_every < 0:
            raise ConfigError("image_pool_size, grad_clip_norm, and checkpoint_every must be nonnegative")
        # Weight validation happens in LossWeights; arch feasibility in the
        # arch descriptors (the discriminator bounds the minimum image size).
        _ = self.loss_weights
        self.discriminator_arch().output_hw(self.image_size)

    @property
    def total_epochs(self) -> int:
        return self.epochs_constant + self.epochs_decay

    @property
    def loss_weights(self) -> LossWeights:
        return LossWeights(lambda1=self.lambda1, lambda2=self.lambda2)

    def generator_arch(self) -> GeneratorArch:
        return GeneratorArch(
            image_size=self.image_size,
            base_width=self.base_width,
            norm=self.norm,
            nonlocal_enabled=self.nonlocal_enabled,
            nonlocal_max_hw=self.nonlocal_max_hw,
        )

    def discriminator_arch(self) -> DiscriminatorArch:
        return DiscriminatorArch(norm=self.norm if self.norm != "none" else "none")

    def to_flat_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_flat_dict(cls, values: dict) -> "TrainConfig":
        known = {f.name: f for f in dataclasses.fields(cls)}
        unknown = sorted(set(values) - set(known))
        if unknown:
            raise ConfigError(f"unknown config keys {unknown}; known keys: {sorted(known)}")
        coerced = {}
        for key, raw in values.items():
            coerced[key] = _coerce(raw, known[key].type, key)
        return cls(**coerced)


def _coerce(raw, annotation, key: str):
    kind = annotation if isinstance(annotation, str) else getattr(annotation, "__name__", str(annotation))
    try:
        if kind == "bool":
            if isinstance(raw, bool):
                return raw
            if isinstance(raw, str):
                lowered = raw.strip().lower()
                if lowered in ("true", "1", "yes"):
                    return True
                if lowered in ("false", "0", "no"):
                    return False
                raise ValueError(f"not a boolean: {raw!r}")
            return bool(raw)
        if kind == "int":
            if isinstance(raw, float) and raw != int(raw):
                raise ValueError(f"not an integer: {raw!r}")
            return int(raw)
        if kind == "float":
            return float(raw)
        return str(raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"config key {key!r}: {exc}") from exc


def lr_schedule(epoch: int, cfg: TrainConfig) -> float:
    """Learning rate for a given epoch index: constant, then linear to zero.

    Epoch indices run 0..total_epochs; the value at total_epochs is 0 (the
    schedule's endpoint, never trained at). During the decay phase the rate
    is base_lr * (total - epoch) / epochs_decay, which meets the constant
    phase continuously.
    """
    total = cfg.total_epochs
    if epoch < 0 or epoch > total:
        raise ConfigError(f"epoch {epoch} outside the schedule range [0, {total}]")
    if epoch < cfg.epochs_constant:
        return cfg.base_lr
    if cfg.epochs_decay == 0:
        return 0.0 if epoch >= total else cfg.base_lr
    # Ratio first: at phase boundaries it is exactly 1.0 or 0.0, so the
    # returned rate equals base_lr (or 0) without rounding residue.
    return cfg.base_lr * ((total - epoch) / cfg.epochs_decay)


class ImagePool:
    """History buffer of generated images for discriminator updates.

    With probability 1/2 a query swaps the incoming fake for a stored one,
    which slows discriminator oscillation. Size 0 is a pass-through. Off by
    default; the reference procedure feeds current fakes directly.
    """

    def __init__(self, size: int, rng: np.random.Generator):
        self.size = size
        self.rng = rng
        self._images: list[torch.Tensor] = []

    def query(self, batch: torch.Tensor) -> torch.Tensor:
        if self.size == 0:
            return batch
        out = []
        for img in batch:
            img = img.detach().unsqueeze(0)
            if len(self._images) < self.size:
                self._images.append(img.clone())
                out.append(img)
            elif self.rng.random() < 0.5:
                idx = int(self.rng.integers(len(self._images)))
                out.append(self._images[idx].clone())
                self._images[idx] = img.clone()
            else:
                out.append(img)
        return torch.cat(out, dim=0)


@dataclass
class TrainState:
    """Mutable bundle of everything the loop updates."""

    G: torch.nn.Module
    F: torch.nn.Module
    D_a: torch.nn.Module
    D_b: torch.nn.Module
    opt_generators: torch.optim.Optimizer
    opt_d_a: torch.optim.Optimizer
    opt_d_b: torch.optim.Optimizer
    epoch: int = 0
    step: int = 0
    loss_history: list[LossReport] = field(default_factory=list)

    def networks(self) -> dict[str, torch.nn.Module]:
        return {"G": self.G, "F": self.F, "D_a": self.D_a, "D_b": self.D_b}

    def optimizers(self) -> dict[str, torch.optim.Optimizer]:
        return {"generators": self.opt_generators, "D_a": self.opt_d_a, "D_b": self.opt_d_b}


@dataclass
class CheckpointSeries:
    """Paths produced by a training run."""

    checkpoints: list[str]
    final: str
    log_path: str


def _set_requires_grad(modules, flag: bool):
    for module in modules:
        for p in module.parameters():
            p.requires_grad_(flag)


class Trainer:
    """Owns the networks, optimizers, and the step/epoch loop."""

    def __init__(self, cfg: TrainConfig, out_dir=None):
        cfg.validate()
        self.cfg = cfg
        self.out_dir = Path(out_dir) if out_dir is not None else None
        torch.manual_seed(cfg.seed)
        G, F_net, D_a, D_b = init_params(cfg.generator_arch(), cfg.discriminator_arch(), seed=cfg.seed)
        self.state = TrainState(
            G=G,
            F=F_net,
            D_a=D_a,
            D_b=D_b,
            opt_generators=self._make_optimizer(itertools.chain(G.parameters(), F_net.parameters())),
            opt_d_a=self._make_optimizer(D_a.parameters()),
            opt_d_b=self._make_optimizer(D_b.parameters()),
        )
        pool_rng = np.random.default_rng(cfg.seed + 1)
        self._pool_a = ImagePool(cfg.image_pool_size, pool_rng)
        self._pool_b = ImagePool(cfg.image_pool_size, pool_rng)
        self._sampler_state: dict | None = None

    def _make_optimizer(self, params) -> torch.optim.Optimizer:
        return torch.optim.Adam(
            params,
            lr=self.cfg.base_lr,
            betas=(self.cfg.beta1, self.cfg.beta2),
            eps=self.cfg.epsilon,
        )

    # -- single step ------------------------------------------------------

    def train_step(self, batch: BatchPair) -> LossReport:
        """One optimization step on one unpaired batch; returns all loss terms."""
        cfg = self.cfg
        st = self.state
        expected = (1, cfg.image_size, cfg.image_size)
        if tuple(batch.batch_a.shape[1:]) != expected:
            raise ShapeMismatchError(expected, tuple(batch.batch_a.shape[1:]), "batch")
        for net in st.networks().values():
            net.train()

        a, b = batch.batch_a, batch.batch_b
        if cfg.update_order == "discriminators_first":
            with torch.no_grad():
                ga_pre = st.G(a)
                fb_pre = st.F(b)
            adv_da, adv_db = self._discriminator_updates(a, b, fb_pre, ga_pre, batch)

        _set_requires_grad([st.D_a, st.D_b], False)
        ga = st.G(a)
        fb = st.F(b)
        fga = st.F(ga)
        gfb = st.G(fb)
        adv_g = adversarial_loss_generator(st.D_b(ga), mode=cfg.adversarial_mode)
        adv_f = adversarial_loss_generator(st.D_a(fb), mode=cfg.adversarial_mode)
        si_g = strong_identity_loss("G", a, ga, fb, gfb, reduction=cfg.l1_reduction)
        si_f = strong_identity_loss("F", b, fb, ga, fga, reduction=cfg.l1_reduction)
        cyc = cycle_loss(a, fga, b, gfb, reduction=cfg.l1_reduction)
        total = total_generator_loss(adv_g, adv_f, si_g, si_f, cyc, cfg.loss_weights)
        self._check_finite(
            {"adv_g": adv_g, "adv_f": adv_f, "si_g": si_g, "si_f": si_f, "cyc": cyc, "total_generators": total},
            batch,
        )
        st.opt_generators.zero_grad(set_to_none=True)
        total.backward()
        self._clip(itertools.chain(st.G.parameters(), st.F.parameters()))
        st.opt_generators.step()
        _set_requires_grad([st.D_a, st.D_b], True)

        if cfg.update_order == "generators_first":
            adv_da, adv_db = self._discriminator_updates(a, b, fb.detach(), ga.detach(), batch)

        report = LossReport.from_terms(
            adv_g=float(adv_g.item()),
            adv_f=float(adv_f.item()),
            adv_da=adv_da,
            adv_db=adv_db,
            cyc=float(cyc.item()),
            si_g=float(si_g.item()),
            si_f=float(si_f.item()),
            weights=cfg.loss_weights,
        )
        st.step += 1
        st.loss_history.append(report)
        return report

    def _discriminator_updates(self, a, b, fake_a, fake_b, batch) -> tuple[float, float]:
        cfg, st = self.cfg, self.state
        disc_mode = "least_squares" if cfg.adversarial_mode == "least_squares" else "log"
        fake_a = self._pool_a.query(fake_a)
        fake_b = self._pool_b.query(fake_b)
        results = []
        for disc, opt, real, fake in (
            (st.D_a, st.opt_d_a, a, fake_a),
            (st.D_b, st.opt_d_b, b, fake_b),
        ):
            loss = adversarial_loss_discriminator(disc(real), disc(fake), mode=disc_mode)
            self._check_finite({"adv_" + disc.role.lower(): loss}, batch)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            self._clip(disc.parameters())
            opt.step()
            results.append(float(loss.item()))
        return results[0], results[1]

    def _clip(self, params):
        if self.cfg.grad_clip_norm > 0:
            torch.nn.utils.clip_grad_norm_(list(params), self.cfg.grad_clip_norm)

    def _check_finite(self, terms: dict[str, torch.Tensor], batch: BatchPair):
        bad = {k: float(v.item()) for k, v in terms.items() if not torch.isfinite(v).all()}
        if not bad:
            return
        diagnostic = {
            "step": self.state.step,
            "epoch": self.state.epoch,
            "batch_tag": batch.rng_state_tag,
            "ids_a": batch.ids_a,
            "ids_b": batch.ids_b,
            "non_finite_terms": {k: repr(v) for k, v in bad.items()},
        }
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            dump = self.out_dir / "nonfinite_diagnostics.json"
            dump.write_text(json.dumps(diagnostic, indent=2))
            logger.error("non-finite loss; diagnostics written to %s", dump)
        raise NonFiniteLossError(
            f"non-finite loss terms {sorted(bad)} at step {self.state.step}",
            batch_ids_a=batch.ids_a,
            batch_ids_b=batch.ids_b,
        )

    # -- full loop --------------------------------------------------------

    def _set_lr(self, lr: float):
        for opt in self.state.optimizers().values():
            for group in opt.param_groups:
                group["lr"] = lr

    def build_sampler(self, data: DomainCollection) -> UnpairedSampler:
        defective = data.defective_subset(self.cfg.defect_class)
        if self.cfg.offline_augment:
            defective = augment_offline(defective)
        sampler = UnpairedSampler(
            data.defect_free,
            defective,
            batch_size=self.cfg.batch_size,
            seed=self.cfg.seed,
        )
        if self._sampler_state is not None:
            sampler.load_state_dict(self._sampler_state)
            self._sampler_state = None
        return sampler

    def train(self, data: DomainCollection) -> CheckpointSeries:
        """Run the remaining epochs over `data`, logging and checkpointing.

        Writes one JSON line per step to train_log.jsonl, a checkpoint
        directory every `checkpoint_every` epochs, and a final checkpoint.
        """
        if self.out_dir is None:
            raise ConfigError("training requires an output directory")
        if data.split != "train":
            raise ConfigError(f"training data must come from the train split, got {data.split!r}")
        cfg = self.cfg
        self.out_dir.mkdir(parents=True, exist_ok=True)
        log_path = self.out_dir / "train_log.jsonl"
        sampler = self.build_sampler(data)
        sampler.epoch = self.state.epoch
        saved: list[str] = []
        with open(log_path, "a", encoding="utf-8") as log:
            for epoch in range(self.state.epoch, cfg.total_epochs):
                lr = lr_schedule(epoch, cfg)
                self._set_lr(lr)
                for batch in sampler.epoch_batches():
                    report = self.train_step(batch)
                    line = {"epoch": epoch, "step": self.state.step, "lr": lr}
                    line.update(report.to_dict())
                    log.write(json.dumps(line) + "\n")
                log.flush()
                self.state.epoch = epoch + 1
                logger.info("epoch %d/%d done (lr %.6g)", epoch + 1, cfg.total_epochs, lr)
                if cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0 and (epoch + 1) < cfg.total_epochs:
                    path = self.out_dir / "checkpoints" / f"epoch_{epoch + 1:04d}"
                    self.save(path, sampler=sampler)
                    saved.append(str(path))
        final = self.out_dir / "checkpoints" / "final"
        self.save(final, sampler=sampler)
        saved.append(str(final))
        return CheckpointSeries(checkpoints=saved, final=str(final), log_path=str(log_path))

    def save(self, path, sampler: UnpairedSampler | None = None):
        rng_extra = {"sampler": sampler.state_dict()} if sampler is not None else {}
        save_checkpoint(
            path,
            networks=self.state.networks(),
            optimizers=self.state.optimizers(),
            config=self.cfg.to_flat_dict(),
            epoch=self.state.epoch,
            step=self.state.step,
            extra_rng=rng_extra,
        )

    @classmethod
    def resume(cls, checkpoint_dir, out_dir=None) -> "Trainer":
        """Rebuild a trainer (networks, optimizer moments, RNG) from a checkpoint."""
        ck = load_checkpoint(checkpoint_dir)
        cfg = TrainConfig.from_flat_dict(ck.config())
        trainer = cls(cfg, out_dir=out_dir)
        nets = ck.build_networks()
        st = trainer.state
        st.G, st.F, st.D_a, st.D_b = nets["G"], nets["F"], nets["D_a"], nets["D_b"]
        st.opt_generators = trainer._make_optimizer(itertools.chain(st.G.parameters(), st.F.parameters()))
        st.opt_d_a = trainer._make_optimizer(st.D_a.parameters())
        st.opt_d_b = trainer._make_optimizer(st.D_b.parameters())
        for name, opt in st.optimizers().items():
            ck.load_optimizer(name, opt)
        st.epoch = ck.epoch
        st.step = ck.step
        ck.restore_rng()
        trainer._sampler_state = ck.extra_rng().get("sampler")
        return trainer


def train(cfg: TrainConfig, data: DomainCollection, out_dir) -> CheckpointSeries:
    """Train from scratch; convenience wrapper over Trainer."""
    return Trainer(cfg, out_dir=out_dir).train(data)
