"""Defect segmentation: translate to defect-free, subtract, threshold.

The defect-suppressing generator reconstructs a clean version of its input;
anything that changed is defect evidence. The per-image difference map is
thresholded (fixed value or Otsu) into a binary mask, and masks are scored
against ground truth by pixel completeness (cpt), correctness (crt), and
their harmonic mean.
"""

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from sigan.data import ImageSample
from sigan.errors import ConfigError, DatasetLayoutError, RoleMismatchError, ShapeMismatchError
from sigan.networks import ROLE_F

logger = logging.getLogger(__name__)

THRESHOLD_MODES = ("otsu", "fixed")
POLARITIES = ("absolute", "signed")


@dataclass(frozen=True)
class ThresholdConfig:
    """Binarization rule: Otsu's method over the diff map, or a fixed cut."""

    mode: str = "otsu"
    value: float = 0.5  # used only in fixed mode

    def __post_init__(self):
        if self.mode not in THRESHOLD_MODES:
            raise ConfigError(f"unknown threshold mode {self.mode!r}; expected one of {THRESHOLD_MODES}")


@dataclass
class SegmentationResult:
    """Per-image segmentation output."""

    input_id: str
    diff_map: np.ndarray  # H x W float32
    mask: np.ndarray  # H x W bool
    threshold_used: float
    threshold_mode: str
    generated: np.ndarray | None = None  # reconstructed defect-free image


@dataclass
class SegMetrics:
    """Pixel counts and derived scores for one mask (or a pooled set).

    m_g: ground-truth defect pixels; m_d: detected pixels; m: their overlap.
    cpt = m / m_g (completeness), crt = m / m_d (correctness), fscore is
    their harmonic mean. Empty/empty compares as a perfect 1.0; one-sided
    empties score 0.
    """

    m_g: int
    m_d: int
    m: int
    cpt: float
    crt: float
    fscore: float

    @classmethod
    def from_counts(cls, m_g: int, m_d: int, m: int) -> "SegMetrics":
        m_g, m_d, m = int(m_g), int(m_d), int(m)
        if min(m_g, m_d, m) < 0 or m > min(m_g, m_d):
            raise ConfigError(f"inconsistent counts m={m}, m_g={m_g}, m_d={m_d}")
        if m_g == 0 and m_d == 0:
            return cls(0, 0, 0, 1.0, 1.0, 1.0)
        cpt = m / m_g if m_g > 0 else 0.0
        crt = m / m_d if m_d > 0 else 0.0
        fscore = 0.0 if cpt + crt == 0 else 2.0 * cpt * crt / (cpt + crt)
        return cls(m_g, m_d, m, cpt, crt, fscore)

    def to_dict(self) -> dict:
        return {
            "m_g": self.m_g,
            "m_d": self.m_d,
            "m": self.m,
            "cpt": self.cpt,
            "crt": self.crt,
            "fscore": self.fscore,
        }


def difference_map(input_pixels: np.ndarray, generated_pixels: np.ndarray, polarity: str = "absolute") -> np.ndarray:
    """Pixel difference between an image and its clean reconstruction.

    "absolute" gives |input - generated| in [0, 2]; "signed" gives
    generated - input, which is positive where the reconstruction brightened
    a (dark) defect region.
    """
    if polarity not in POLARITIES:
        raise ConfigError(f"unknown polarity {polarity!r}; expected one of {POLARITIES}")
    a = np.asarray(input_pixels, dtype=np.float32)
    g = np.asarray(generated_pixels, dtype=np.float32)
    if a.shape != g.shape:
        raise ShapeMismatchError(a.shape, g.shape, "difference map")
    if polarity == "signed":
        return (g - a).astype(np.float32)
    return np.abs(a - g).astype(np.float32)


def otsu_threshold(values: np.ndarray, bins: int = 256) -> float:
    """Otsu's threshold over a histogram of the observed value range.

    Maximizes between-class variance w0*w1*(mu0 - mu1)^2 across all bin
    splits; returns the center of the winning bin (values strictly above it
    form the foreground). A constant map has no split; its single value is
    returned (yielding an empty mask) with a warning.
    """
    flat = np.asarray(values, dtype=np.float64).ravel()
    if flat.size == 0:
        raise ConfigError("cannot threshold an empty map")
    lo, hi = float(flat.min()), float(flat.max())
    if hi <= lo:
        logger.warning("constant difference map (value %.6f); threshold yields an empty mask", lo)
        return lo
    hist, edges = np.histogram(flat, bins=bins, range=(lo, hi))
    centers = (edges[:-1] + edges[1:]) / 2.0
    weights = hist.astype(np.float64)
    total = weights.sum()
    cum_w = np.cumsum(weights)
    cum_sum = np.cumsum(weights * centers)
    total_sum = cum_sum[-1]
    w0 = cum_w[:-1]
    w1 = total - w0
    valid = (w0 > 0) & (w1 > 0)
    mu0 = np.divide(cum_sum[:-1], w0, out=np.zeros_like(w0), where=w0 > 0)
    mu1 = np.divide(total_sum - cum_sum[:-1], w1, out=np.zeros_like(w1), where=w1 > 0)
    variance = np.where(valid, w0 * w1 * (mu0 - mu1) ** 2, -np.inf)
    best = int(np.argmax(variance))
    return float(centers[best])


def select_threshold(diff_map: np.ndarray, cfg: ThresholdConfig) -> float:
    if cfg.mode == "fixed":
        return float(cfg.value)
    return otsu_threshold(diff_map)


def segment(
    sample: ImageSample,
    generator: torch.nn.Module,
    threshold: ThresholdConfig = ThresholdConfig(),
    polarity: str = "absolute",
) -> SegmentationResult:
    """Segment one image with the defect-suppressing generator.

    Only the defect-to-defect-free generator is valid here; passing the
    opposite one raises RoleMismatchError. Runs in eval mode without
    gradients; the mask is diff > threshold (strict).
    """
    role = getattr(generator, "role", None)
    if role != ROLE_F:
        raise RoleMismatchError(f"segmentation needs the defect-suppressing generator ({ROLE_F}), got {role!r}")
    generator.eval()
    x = torch.from_numpy(np.ascontiguousarray(sample.pixels, dtype=np.float32))[None, None]
    with torch.no_grad():
        gen = generator(x)[0, 0].numpy()
    diff = difference_map(sample.pixels, gen, polarity=polarity)
    thr = select_threshold(diff, threshold)
    mask = diff > thr
    return SegmentationResult(
        input_id=sample.id,
        diff_map=diff,
        mask=mask,
        threshold_used=thr,
        threshold_mode=threshold.mode,
        generated=gen,
    )


def evaluate_masks(predicted: np.ndarray, ground_truth: np.ndarray) -> SegMetrics:
    """Score one predicted mask against ground truth (both boolean H x W)."""
    pred = np.asarray(predicted).astype(bool)
    gt = np.asarray(ground_truth).astype(bool)
    if pred.shape != gt.shape:
        raise ShapeMismatchError(gt.shape, pred.shape, "mask")
    m_g = int(gt.sum())
    m_d = int(pred.sum())
    m = int(np.logical_and(pred, gt).sum())
    return SegMetrics.from_counts(m_g, m_d, m)


def aggregate_metrics(per_image: list[SegMetrics]) -> dict:
    """Pool per-image metrics two ways.

    "micro" recomputes the scores from summed pixel counts (large defects
    dominate); "macro" averages the per-image scores (every image counts
    equally). Both are reported; pick per use case.
    """
    if not per_image:
        raise ConfigError("no per-image metrics to aggregate")
    micro = SegMetrics.from_counts(
        sum(x.m_g for x in per_image),
        sum(x.m_d for x in per_image),
        sum(x.m for x in per_image),
    )
    n = len(per_image)
    macro = {
        "cpt": sum(x.cpt for x in per_image) / n,
        "crt": sum(x.crt for x in per_image) / n,
        "fscore": sum(x.fscore for x in per_image) / n,
    }
    return {"micro": micro.to_dict(), "macro": macro, "num_images": n}


def save_mask_png(mask: np.ndarray, path, size: tuple[int, int] | None = None):
    """Write a boolean mask as an 8-bit PNG (0 background, 255 defect).

    `size` (height, width) resizes with nearest-neighbor, for mapping a
    working-resolution mask back onto the source image.
    """
    arr = (np.asarray(mask).astype(np.uint8)) * 255
    img = Image.fromarray(arr, mode="L")
    if size is not None and (size[0], size[1]) != arr.shape:
        img = img.resize((size[1], size[0]), Image.NEAREST)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    img.save(path)


def load_mask_png(path) -> np.ndarray:
    """Read a mask PNG as boolean (any value above 127 is defect)."""
    p = Path(path)
    if not p.is_file():
        raise DatasetLayoutError(f"mask file not found: {p}")
    with Image.open(p) as img:
        arr = np.asarray(img.convert("L"))
    return arr > 127


def find_ground_truth(gt_dir, stem: str) -> Path:
    """Locate `<stem>.png` directly in gt_dir or one level down (class dirs)."""
    root = Path(gt_dir)
    direct = root / f"{stem}.png"
    if direct.is_file():
        return direct
    matches = sorted(root.glob(f"*/{stem}.png"))
    if matches:
        return matches[0]
    raise DatasetLayoutError(f"no ground-truth mask named {stem}.png under {root}")
