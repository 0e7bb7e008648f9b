"""Generator and discriminator networks.

Both translation directions use the same UNet encoder-decoder generator with
skip connections and a projection-free non-local attention block near the
output; the discriminator is a five-layer patch classifier (filter counts
64/128/256/512/1, 4x4 kernels, strides 2/2/2/1/1, padding 1).
"""

import logging
from dataclasses import dataclass, field

import torch
from torch import nn

from sigan.errors import AttentionBudgetError, ConfigError, ShapeMismatchError

logger = logging.getLogger(__name__)

ROLE_G = "G_defectfree_to_defect"
ROLE_F = "F_defect_to_defectfree"
ROLE_DA = "D_a"
ROLE_DB = "D_b"

GENERATOR_ROLES = (ROLE_G, ROLE_F)
DISCRIMINATOR_ROLES = (ROLE_DA, ROLE_DB)

_NORM_KINDS = ("batch", "instance", "none")


def _make_norm(kind: str, channels: int) -> nn.Module:
    if kind == "batch":
        return nn.BatchNorm2d(channels)
    if kind == "instance":
        return nn.InstanceNorm2d(channels, affine=True, track_running_stats=False)
    return nn.Identity()


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    """Closed-form output side length of a single convolution."""
    return (size + 2 * padding - kernel) // stride + 1


@dataclass
class GeneratorArch:
    """Descriptor for the UNet generator.

    `depth` counts encoder downsampling blocks; None derives the deepest
    depth (up to `max_depth`) that divides `image_size`. Channel widths
    double from `base_width` per block, capped at `max_width`. The non-local
    block sits on the last decoder feature whose side length fits
    `nonlocal_max_hw`, keeping the NxN attention affordable.
    """

    image_size: int = 256
    in_channels: int = 1
    out_channels: int = 1
    base_width: int = 64
    max_width: int = 512
    depth: int | None = None
    max_depth: int = 8
    norm: str = "batch"
    nonlocal_enabled: bool = True
    nonlocal_max_hw: int = 64
    nonlocal_projections: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.image_size < 4:
            raise ConfigError(f"image_size must be >= 4, got {self.image_size}")
        for name in ("in_channels", "out_channels", "base_width", "max_width"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be a positive channel count, got {getattr(self, name)}")
        if self.norm not in _NORM_KINDS:
            raise ConfigError(f"unknown norm kind {self.norm!r}; expected one of {_NORM_KINDS}")
        if self.depth is not None:
            if self.depth < 2:
                raise ConfigError(f"depth must be >= 2, got {self.depth}")
            if self.image_size % (1 << self.depth) != 0:
                raise ConfigError(
                    f"image_size {self.image_size} is not a multiple of 2^depth ({1 << self.depth})"
                )
        elif self.resolved_depth < 2:
            raise ConfigError(f"image_size {self.image_size} needs at least two factors of 2")
        if self.nonlocal_max_hw < 1:
            raise ConfigError(f"nonlocal_max_hw must be positive, got {self.nonlocal_max_hw}")

    @property
    def resolved_depth(self) -> int:
        if self.depth is not None:
            return self.depth
        d = 0
        size = self.image_size
        while d < self.max_depth and size % 2 == 0:
            size //= 2
            d += 1
        return d

    @property
    def widths(self) -> list[int]:
        return [min(self.base_width << i, self.max_width) for i in range(self.resolved_depth)]

    def encoder_has_norm(self, i: int) -> bool:
        # No norm on the first block (raw image stats) nor on the bottleneck
        # (spatial extent can be 1x1, degenerate for batch statistics).
        return self.norm != "none" and 0 < i < self.resolved_depth - 1

    def decoder_stage_channels(self) -> list[tuple[int, int]]:
        """(in_channels, out_channels) per decoder up-convolution stage."""
        w = self.widths
        depth = self.resolved_depth
        stages = []
        prev = w[depth - 1]
        for j in range(depth - 1):
            out = w[depth - 2 - j]
            stages.append((prev, out))
            prev = out + w[depth - 2 - j]  # skip concatenation
        return stages

    def final_in_channels(self) -> int:
        w = self.widths
        stages = self.decoder_stage_channels()
        if stages:
            return stages[-1][1] + w[0]
        return w[-1]

    def decoder_resolution(self, stage: int) -> int:
        """Side length of decoder stage output (post-concat), 0-indexed."""
        return self.image_size >> (self.resolved_depth - 1 - stage)

    def nonlocal_stage(self) -> int | None:
        """Decoder stage the non-local block attaches to, or None if off.

        Picks the last (highest-resolution) decoder feature whose side fits
        within nonlocal_max_hw; larger features would exceed the attention
        budget of (H*W)^2 scores.
        """
        if not self.nonlocal_enabled:
            return None
        candidates = [j for j in range(self.resolved_depth - 1) if self.decoder_resolution(j) <= self.nonlocal_max_hw]
        if not candidates:
            logger.warning(
                "no decoder feature fits the %dx%d attention budget; non-local block disabled",
                self.nonlocal_max_hw, self.nonlocal_max_hw,
            )
            return None
        return candidates[-1]

    def nonlocal_channels(self) -> int | None:
        stage = self.nonlocal_stage()
        if stage is None:
            return None
        stages = self.decoder_stage_channels()
        return stages[stage][1] + self.widths[self.resolved_depth - 2 - stage]

    def parameter_shapes(self) -> dict[str, tuple[int, ...]]:
        """Expected learnable-parameter shapes, keyed like the module's state dict."""
        shapes: dict[str, tuple[int, ...]] = {}
        w = self.widths
        prev = self.in_channels
        for i, width in enumerate(w):
            shapes[f"enc_convs.{i}.weight"] = (width, prev, 4, 4)
            shapes[f"enc_convs.{i}.bias"] = (width,)
            if self.encoder_has_norm(i):
                shapes[f"enc_norms.{i}.weight"] = (width,)
                shapes[f"enc_norms.{i}.bias"] = (width,)
            prev = width
        for j, (cin, cout) in enumerate(self.decoder_stage_channels()):
            shapes[f"dec_convs.{j}.weight"] = (cin, cout, 4, 4)  # ConvTranspose2d layout
            shapes[f"dec_convs.{j}.bias"] = (cout,)
            if self.norm != "none":
                shapes[f"dec_norms.{j}.weight"] = (cout,)
                shapes[f"dec_norms.{j}.bias"] = (cout,)
        shapes["final.weight"] = (self.final_in_channels(), self.out_channels, 4, 4)
        shapes["final.bias"] = (self.out_channels,)
        if self.nonlocal_projections and self.nonlocal_stage() is not None:
            c = self.nonlocal_channels()
            for name in ("query", "key", "value", "out_proj"):
                shapes[f"nonlocal_block.{name}.weight"] = (c, c, 1, 1)
                shapes[f"nonlocal_block.{name}.bias"] = (c,)
        return shapes

    def num_parameters(self) -> int:
        total = 0
        for shape in self.parameter_shapes().values():
            n = 1
            for dim in shape:
                n *= dim
            total += n
        return total


@dataclass
class DiscriminatorArch:
    """Descriptor for the five-layer patch discriminator."""

    in_channels: int = 1
    filters: tuple[int, ...] = (64, 128, 256, 512, 1)
    kernel: int = 4
    strides: tuple[int, ...] = (2, 2, 2, 1, 1)
    padding: int = 1
    norm: str = "batch"
    leaky_slope: float = 0.2

    def __post_init__(self):
        if self.in_channels < 1:
            raise ConfigError(f"in_channels must be positive, got {self.in_channels}")
        if len(self.filters) != len(self.strides):
            raise ConfigError("filters and strides must have the same length")
        if any(f < 1 for f in self.filters):
            raise ConfigError(f"filter counts must be positive, got {self.filters}")
        if self.norm not in _NORM_KINDS:
            raise ConfigError(f"unknown norm kind {self.norm!r}; expected one of {_NORM_KINDS}")

    def output_hw(self, size: int) -> int:
        """Patch-grid side length for a square input, validating feasibility."""
        original = size
        for stride in self.strides:
            if size + 2 * self.padding < self.kernel:
                raise ConfigError(
                    f"input side {original} is too small for the {len(self.filters)}-layer "
                    f"discriminator (minimum {self.min_input_size()})"
                )
            size = conv_output_size(size, self.kernel, stride, self.padding)
        return size

    def min_input_size(self) -> int:
        """Smallest square input the layer stack accepts."""
        size = 1
        while True:
            try:
                probe = size
                for stride in self.strides:
                    if probe + 2 * self.padding < self.kernel:
                        raise ValueError
                    probe = conv_output_size(probe, self.kernel, stride, self.padding)
                if probe >= 1:
                    return size
            except ValueError:
                pass
            size += 1


class NonLocalBlock(nn.Module):
    """Self-attention over all spatial positions of a feature map.

    Literal projection-free form: flatten the B x C x H x W input to N=H*W
    position vectors f, form row-stochastic attention softmax(f . f^T) over
    the N x N similarity matrix, and output attention . f + f. Optional
    learned 1x1 query/key/value/output projections are off by default.
    """

    def __init__(self, channels: int | None = None, max_positions: int = 64 * 64, use_projections: bool = False):
        super().__init__()
        self.max_positions = max_positions
        self.use_projections = use_projections
        if use_projections:
            if channels is None:
                raise ConfigError("projections need an explicit channel count")
            self.query = nn.Conv2d(channels, channels, 1)
            self.key = nn.Conv2d(channels, channels, 1)
            self.value = nn.Conv2d(channels, channels, 1)
            self.out_proj = nn.Conv2d(channels, channels, 1)

    def _check_budget(self, h: int, w: int):
        if h * w > self.max_positions:
            raise AttentionBudgetError(
                f"non-local attention over {h}x{w}={h * w} positions exceeds the budget of "
                f"{self.max_positions}; place the block at a coarser decoder resolution"
            )

    def attention(self, f: torch.Tensor) -> torch.Tensor:
        """Row-stochastic B x N x N attention matrix for a B x C x H x W input."""
        b, c, h, w = f.shape
        self._check_budget(h, w)
        if self.use_projections:
            q = self.query(f).reshape(b, c, h * w).transpose(1, 2)
            k = self.key(f).reshape(b, c, h * w)
        else:
            q = f.reshape(b, c, h * w).transpose(1, 2)
            k = f.reshape(b, c, h * w)
        return torch.softmax(torch.bmm(q, k), dim=-1)

    def forward(self, f: torch.Tensor) -> torch.Tensor:
        b, c, h, w = f.shape
        attn = self.attention(f)
        if self.use_projections:
            v = self.value(f).reshape(b, c, h * w).transpose(1, 2)
            mixed = torch.bmm(attn, v).transpose(1, 2).reshape(b, c, h, w)
            return self.out_proj(mixed) + f
        flat = f.reshape(b, c, h * w).transpose(1, 2)
        mixed = torch.bmm(attn, flat).transpose(1, 2).reshape(b, c, h, w)
        return mixed + f


class UNetGenerator(nn.Module):
    """UNet encoder-decoder generator with skip connections and tanh output."""

    def __init__(self, arch: GeneratorArch, role: str):
        super().__init__()
        if role not in GENERATOR_ROLES:
            raise ConfigError(f"unknown generator role {role!r}; expected one of {GENERATOR_ROLES}")
        arch.validate()
        self.arch = arch
        self.role = role

        widths = arch.widths
        self.enc_convs = nn.ModuleList()
        self.enc_norms = nn.ModuleList()
        prev = arch.in_channels
        for i, width in enumerate(widths):
            self.enc_convs.append(nn.Conv2d(prev, width, 4, stride=2, padding=1))
            self.enc_norms.append(_make_norm(arch.norm, width) if arch.encoder_has_norm(i) else nn.Identity())
            prev = width

        self.dec_convs = nn.ModuleList()
        self.dec_norms = nn.ModuleList()
        for cin, cout in arch.decoder_stage_channels():
            self.dec_convs.append(nn.ConvTranspose2d(cin, cout, 4, stride=2, padding=1))
            self.dec_norms.append(_make_norm(arch.norm, cout))
        self.final = nn.ConvTranspose2d(arch.final_in_channels(), arch.out_channels, 4, stride=2, padding=1)

        self._nonlocal_stage = arch.nonlocal_stage()
        if self._nonlocal_stage is not None:
            self.nonlocal_block = NonLocalBlock(
                channels=arch.nonlocal_channels(),
                max_positions=arch.nonlocal_max_hw * arch.nonlocal_max_hw,
                use_projections=arch.nonlocal_projections,
            )
        else:
            self.nonlocal_block = None

        self.act_enc = nn.LeakyReLU(0.2, inplace=False)
        self.act_dec = nn.ReLU(inplace=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 4:
            raise ShapeMismatchError("(B, C, H, W)", tuple(x.shape))
        expected = (self.arch.in_channels, self.arch.image_size, self.arch.image_size)
        if tuple(x.shape[1:]) != expected:
            raise ShapeMismatchError(("B",) + expected, tuple(x.shape))
        if not torch.isfinite(x).all():
            raise ValueError("generator input contains non-finite values")

        skips = []
        h = x
        for conv, norm in zip(self.enc_convs, self.enc_norms):
            h = self.act_enc(norm(conv(h)))
            skips.append(h)

        depth = self.arch.resolved_depth
        for j, (conv, norm) in enumerate(zip(self.dec_convs, self.dec_norms)):
            h = self.act_dec(norm(conv(h)))
            h = torch.cat([h, skips[depth - 2 - j]], dim=1)
            if self.nonlocal_block is not None and j == self._nonlocal_stage:
                h = self.nonlocal_block(h)
        return torch.tanh(self.final(h))


class PatchDiscriminator(nn.Module):
    """Five-layer convolutional patch classifier emitting raw logits."""

    def __init__(self, arch: DiscriminatorArch, role: str):
        super().__init__()
        if role not in DISCRIMINATOR_ROLES:
            raise ConfigError(f"unknown discriminator role {role!r}; expected one of {DISCRIMINATOR_ROLES}")
        self.arch = arch
        self.role = role
        layers: list[nn.Module] = []
        prev = arch.in_channels
        last = len(arch.filters) - 1
        for i, (width, stride) in enumerate(zip(arch.filters, arch.strides)):
            layers.append(nn.Conv2d(prev, width, arch.kernel, stride=stride, padding=arch.padding))
            if i < last:  # final layer stays a bare conv: raw patch logits
                layers.append(_make_norm(arch.norm, width))
                layers.append(nn.LeakyReLU(arch.leaky_slope, inplace=False))
            prev = width
        self.layers = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 4 or x.shape[1] != self.arch.in_channels:
            raise ShapeMismatchError(("B", self.arch.in_channels, "H", "W"), tuple(x.shape))
        if not torch.isfinite(x).all():
            raise ValueError("discriminator input contains non-finite values")
        self.arch.output_hw(int(min(x.shape[2], x.shape[3])))
        return self.layers(x)


def _init_weights(module: nn.Module, generator: torch.Generator):
    # Convolution weights ~ N(0, 0.02^2); normalization gains ~ N(1, 0.02^2).
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            nn.init.normal_(m.weight, 0.0, 0.02, generator=generator)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, (nn.BatchNorm2d, nn.InstanceNorm2d)) and m.affine:
            nn.init.normal_(m.weight, 1.0, 0.02, generator=generator)
            nn.init.zeros_(m.bias)


def init_params(
    gen_arch: GeneratorArch,
    disc_arch: DiscriminatorArch | None = None,
    seed: int = 0,
) -> tuple[UNetGenerator, UNetGenerator, PatchDiscriminator, PatchDiscriminator]:
    """Build and initialize the four networks deterministically from a seed.

    Returns (G: defect-free -> defect, F: defect -> defect-free, D_a, D_b).
    """
    if disc_arch is None:
        disc_arch = DiscriminatorArch(in_channels=gen_arch.in_channels)
    generator = torch.Generator().manual_seed(seed)
    nets = (
        UNetGenerator(gen_arch, ROLE_G),
        UNetGenerator(gen_arch, ROLE_F),
        PatchDiscriminator(disc_arch, ROLE_DA),
        PatchDiscriminator(disc_arch, ROLE_DB),
    )
    for net in nets:
        _init_weights(net, generator)
    return nets
