"""Loss terms for the strong-identity translation objective.

Four ingredients: per-direction adversarial losses, a bidirectional
cycle-consistency L1 term, and the strong identity (SI) L1 terms that tie
each generator's output to its own input so the image background survives
translation. The weighted total for the generator update is

    adv_G + adv_F + lambda1 * (SI_G + SI_F) + lambda2 * cycle
"""

from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F

from sigan.errors import ConfigError, ShapeMismatchError

ADVERSARIAL_MODES = ("nonsaturating", "saturating", "least_squares")
L1_REDUCTIONS = ("mean", "sum")


@dataclass(frozen=True)
class LossWeights:
    """Relative weights: lambda1 scales the SI terms, lambda2 the cycle term."""

    lambda1: float = 10.0
    lambda2: float = 5.0

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ConfigError(f"loss weights must be nonnegative, got lambda1={self.lambda1}, lambda2={self.lambda2}")


@dataclass
class LossReport:
    """All loss terms of one training step, as plain floats."""

    adv_g: float
    adv_f: float
    adv_da: float
    adv_db: float
    cyc: float
    si_g: float
    si_f: float
    total_generators: float

    @classmethod
    def from_terms(cls, adv_g, adv_f, adv_da, adv_db, cyc, si_g, si_f, weights: LossWeights) -> "LossReport":
        total = total_generator_loss(adv_g, adv_f, si_g, si_f, cyc, weights)
        values = [adv_g, adv_f, adv_da, adv_db, cyc, si_g, si_f, total]
        return cls(*(float(v) for v in values))

    def to_dict(self) -> dict[str, float]:
        return asdict(self)


def _check_same_shape(x: torch.Tensor, y: torch.Tensor, what: str):
    if tuple(x.shape) != tuple(y.shape):
        raise ShapeMismatchError(tuple(x.shape), tuple(y.shape), what)


def _l1(x: torch.Tensor, y: torch.Tensor, reduction: str) -> torch.Tensor:
    if reduction not in L1_REDUCTIONS:
        raise ConfigError(f"unknown L1 reduction {reduction!r}; expected one of {L1_REDUCTIONS}")
    return F.l1_loss(x, y, reduction=reduction)


def adversarial_loss_discriminator(
    real_logits: torch.Tensor,
    fake_logits: torch.Tensor,
    mode: str = "log",
) -> torch.Tensor:
    """Discriminator objective over patch logits.

    mode="log" returns -[mean log sigmoid(real) + mean log(1 - sigmoid(fake))],
    the negated adversarial value so the discriminator minimizes; 0 at perfect
    separation. mode="least_squares" returns mse(real, 1) + mse(fake, 0).
    """
    _check_same_shape(real_logits, fake_logits, "logits")
    if not (torch.isfinite(real_logits).all() and torch.isfinite(fake_logits).all()):
        raise ValueError("non-finite discriminator logits")
    if mode == "log":
        real_term = F.binary_cross_entropy_with_logits(real_logits, torch.ones_like(real_logits))
        fake_term = F.binary_cross_entropy_with_logits(fake_logits, torch.zeros_like(fake_logits))
        return real_term + fake_term
    if mode == "least_squares":
        return F.mse_loss(real_logits, torch.ones_like(real_logits)) + F.mse_loss(
            fake_logits, torch.zeros_like(fake_logits)
        )
    raise ConfigError(f"unknown discriminator loss mode {mode!r}")


def adversarial_loss_generator(fake_logits: torch.Tensor, mode: str = "nonsaturating") -> torch.Tensor:
    """Generator-side adversarial objective over patch logits of its fakes.

    Default is the non-saturating -mean log sigmoid(fake); "saturating" is
    the literal min-max form mean log(1 - sigmoid(fake)) (negative-valued,
    weak gradients when the discriminator wins); "least_squares" is
    mse(fake, 1).
    """
    if not torch.isfinite(fake_logits).all():
        raise ValueError("non-finite generator logits")
    if mode == "nonsaturating":
        return F.binary_cross_entropy_with_logits(fake_logits, torch.ones_like(fake_logits))
    if mode == "saturating":
        return -F.binary_cross_entropy_with_logits(fake_logits, torch.zeros_like(fake_logits))
    if mode == "least_squares":
        return F.mse_loss(fake_logits, torch.ones_like(fake_logits))
    raise ConfigError(f"unknown generator loss mode {mode!r}; expected one of {ADVERSARIAL_MODES}")


def cycle_loss(
    a: torch.Tensor,
    fga: torch.Tensor,
    b: torch.Tensor,
    gfb: torch.Tensor,
    reduction: str = "mean",
) -> torch.Tensor:
    """Bidirectional cycle-consistency: L1(F(G(a)), a) + L1(G(F(b)), b)."""
    _check_same_shape(a, fga, "cycle a")
    _check_same_shape(b, gfb, "cycle b")
    return _l1(fga, a, reduction) + _l1(gfb, b, reduction)


def strong_identity_loss(
    role: str,
    x_in: torch.Tensor,
    x_out: torch.Tensor,
    y_in: torch.Tensor,
    y_out: torch.Tensor,
    reduction: str = "mean",
) -> torch.Tensor:
    """Strong identity term for one generator: L1 of both (input, output) pairs.

    For G the pairs are (a, G(a)) and (F(b), G(F(b))); for F they are
    (b, F(b)) and (G(a), F(G(a))). Penalizing each generator's output against
    its own input keeps the background unchanged through translation.
    """
    if role not in ("G", "F"):
        raise ConfigError(f"strong-identity role must be 'G' or 'F', got {role!r}")
    _check_same_shape(x_in, x_out, f"SI {role} pair one")
    _check_same_shape(y_in, y_out, f"SI {role} pair two")
    return _l1(x_out, x_in, reduction) + _l1(y_out, y_in, reduction)


def total_generator_loss(adv_g, adv_f, si_g, si_f, cyc, weights: LossWeights):
    """Weighted generator objective: adv_g + adv_f + l1*(si_g + si_f) + l2*cyc."""
    return adv_g + adv_f + weights.lambda1 * si_g + weights.lambda1 * si_f + weights.lambda2 * cyc
