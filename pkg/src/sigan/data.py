"""EL image dataset: loading, preprocessing, offline augmentation, unpaired batching.

Expected directory layout (one directory per split, one per class):

    <root>/<split>/<class>/*.png|*.jpg

with split in {train, test} and class in {defect_free, crack,
finger_interruption}. Images are 8-bit grayscale patches; everything is
resized to a square working resolution (default 256) and mapped to [-1, 1].
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from sigan.errors import ConfigError, DatasetLayoutError, ImageDecodeError

logger = logging.getLogger(__name__)

SPLITS = ("train", "test")
DEFECT_FREE = "defect_free"
DEFECT_CLASSES = ("crack", "finger_interruption")
CLASSES = (DEFECT_FREE,) + DEFECT_CLASSES
IMAGE_SUFFIXES = (".png", ".jpg")

PROVENANCE_REAL = "real"
PROVENANCE_GENERATED = "generated"
PROVENANCE_OFFLINE_AUGMENTED = "offline_augmented"


@dataclass
class ImageSample:
    """One grayscale EL patch with its domain label and provenance."""

    id: str
    domain: str
    pixels: np.ndarray  # H x W float32 in [-1, 1]
    original_size: tuple[int, int]  # (height, width) of the source file
    provenance: str = PROVENANCE_REAL
    source_path: str = ""

    def __post_init__(self):
        if self.domain not in CLASSES:
            raise ConfigError(f"unknown domain {self.domain!r}; expected one of {CLASSES}")
        self.pixels = np.asarray(self.pixels, dtype=np.float32)
        if self.pixels.ndim != 2:
            raise ConfigError(f"sample {self.id!r}: pixels must be 2-D, got shape {self.pixels.shape}")
        lo, hi = float(self.pixels.min()), float(self.pixels.max())
        if lo < -1.0 or hi > 1.0:
            raise ConfigError(f"sample {self.id!r}: pixel range [{lo:.4f}, {hi:.4f}] exceeds [-1, 1]")


@dataclass
class DomainCollection:
    """All samples of one split, grouped into the two training domains."""

    split: str
    defect_free: list[ImageSample]
    defective: list[ImageSample]  # crack + finger_interruption
    counts: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ConfigError(f"unknown split {self.split!r}; expected one of {SPLITS}")
        if not self.counts:
            self.counts = self._tally()
        expected = self._tally()
        if self.counts != expected:
            raise ConfigError(f"counts {self.counts} do not match sample lists {expected}")
        ids = [s.id for s in self.defect_free + self.defective]
        if len(ids) != len(set(ids)):
            raise ConfigError("duplicate sample ids within the collection")

    def _tally(self) -> dict[str, int]:
        tally = {cls: 0 for cls in CLASSES}
        for s in self.defect_free + self.defective:
            tally[s.domain] += 1
        return tally

    def defective_subset(self, defect_class: str) -> list[ImageSample]:
        """Defective samples restricted to one class ('all' keeps the union)."""
        if defect_class == "all":
            return list(self.defective)
        if defect_class not in DEFECT_CLASSES:
            raise ConfigError(f"unknown defect class {defect_class!r}; expected one of {DEFECT_CLASSES + ('all',)}")
        return [s for s in self.defective if s.domain == defect_class]


@dataclass
class BatchPair:
    """One unpaired batch: a stack per domain, drawn independently."""

    batch_a: torch.Tensor  # B x 1 x H x W defect-free
    batch_b: torch.Tensor  # B x 1 x H x W defective
    ids_a: list[str]
    ids_b: list[str]
    rng_state_tag: str = ""

    def __post_init__(self):
        if tuple(self.batch_a.shape) != tuple(self.batch_b.shape):
            raise ConfigError(
                f"unpaired batch stacks must share a shape, got {tuple(self.batch_a.shape)} vs {tuple(self.batch_b.shape)}"
            )


def preprocess(raw_image: np.ndarray, image_size: int = 256) -> np.ndarray:
    """Resize an 8-bit grayscale image bilinearly and map values to [-1, 1].

    The value mapping is v -> 2*(v/255) - 1, applied after the resize.
    Multi-channel input is collapsed to its channel mean (with a warning);
    constant images pass through unchanged (normalization is pointwise).
    """
    arr = np.asarray(raw_image)
    if arr.ndim == 3:
        logger.warning("multi-channel image given to preprocess; converting by luminance average")
        arr = arr.mean(axis=2)
    if arr.ndim != 2:
        raise ValueError(f"expected a 2-D grayscale image, got shape {arr.shape}")
    if arr.shape[0] < 2 or arr.shape[1] < 2:
        raise ValueError(f"image too small to preprocess: shape {arr.shape}")
    img = Image.fromarray(arr.astype(np.float32), mode="F")
    if img.size != (image_size, image_size):
        img = img.resize((image_size, image_size), Image.BILINEAR)
    values = np.asarray(img, dtype=np.float32)
    return (2.0 * (values / 255.0) - 1.0).astype(np.float32)


def denormalize_to_uint8(pixels: np.ndarray) -> np.ndarray:
    """Inverse of the preprocess value mapping: [-1, 1] -> 8-bit gray."""
    values = np.rint((np.asarray(pixels, dtype=np.float32) + 1.0) * (255.0 / 2.0))
    return np.clip(values, 0, 255).astype(np.uint8)


def _read_grayscale(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as img:
            img.load()
            if img.mode not in ("L", "I", "F"):
                img = img.convert("L")
            return np.asarray(img)
    except (OSError, SyntaxError, ValueError) as exc:
        raise ImageDecodeError(str(path), str(exc)) from exc


def _load_one(path: Path, split: str, cls: str, image_size: int) -> ImageSample:
    raw = _read_grayscale(path)
    return ImageSample(
        id=f"{split}/{cls}/{path.stem}",
        domain=cls,
        pixels=preprocess(raw, image_size=image_size),
        original_size=(raw.shape[0], raw.shape[1]),
        provenance=PROVENANCE_REAL,
        source_path=str(path),
    )


def load_dataset(root_path, split: str, image_size: int = 256, workers: int = 0) -> DomainCollection:
    """Load one split of the dataset, preprocessed and deterministically ordered.

    Files are taken per class directory in lexicographic filename order.
    `workers` > 0 decodes files on a thread pool; ordering is unaffected.

    Raises:
        DatasetLayoutError: a split or class directory is missing.
        ImageDecodeError: a file exists but cannot be decoded.
        ConfigError: a class directory contains no images.
    """
    root = Path(root_path)
    if split not in SPLITS:
        raise ConfigError(f"unknown split {split!r}; expected one of {SPLITS}")
    split_dir = root / split
    if not split_dir.is_dir():
        raise DatasetLayoutError(f"missing split directory: {split_dir}")

    by_class: dict[str, list[ImageSample]] = {}
    for cls in CLASSES:
        cls_dir = split_dir / cls
        if not cls_dir.is_dir():
            raise DatasetLayoutError(f"missing class directory: {cls_dir}")
        files = sorted(
            (p for p in cls_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES),
            key=lambda p: p.name,
        )
        if not files:
            raise ConfigError(f"no images found for class {cls!r} in {cls_dir}")
        if workers and workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                by_class[cls] = list(pool.map(lambda p: _load_one(p, split, cls, image_size), files))
        else:
            by_class[cls] = [_load_one(p, split, cls, image_size) for p in files]

    return DomainCollection(
        split=split,
        defect_free=by_class[DEFECT_FREE],
        defective=by_class["crack"] + by_class["finger_interruption"],
    )


def _mirror(pixels: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(pixels[:, ::-1])


def _flip(pixels: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(pixels[::-1, :])


def _contrast_normalize(pixels: np.ndarray) -> np.ndarray:
    lo, hi = float(pixels.min()), float(pixels.max())
    if hi <= lo:  # constant image: stretching is undefined, emit unchanged
        return pixels.copy()
    return (2.0 * (pixels - lo) / (hi - lo) - 1.0).astype(np.float32)


_OFFLINE_TRANSFORMS = {
    "mirror": _mirror,
    "flip": _flip,
    "contrast": _contrast_normalize,
}


def augment_offline(
    defective: list[ImageSample],
    transforms: tuple[str, ...] = ("mirror", "flip", "contrast"),
) -> list[ImageSample]:
    """Expand a defective training set with deterministic offline transforms.

    Per original: a horizontal mirror, a vertical flip, and a contrast
    normalization (linear stretch of the pixel range to [-1, 1]). With the
    default transform set the output is 4x the input, originals included.
    """
    unknown = [t for t in transforms if t not in _OFFLINE_TRANSFORMS]
    if unknown:
        raise ConfigError(f"unknown offline transforms {unknown}; available: {sorted(_OFFLINE_TRANSFORMS)}")
    out: list[ImageSample] = []
    for sample in defective:
        out.append(sample)
        for name in transforms:
            out.append(
                ImageSample(
                    id=f"{sample.id}_{name}",
                    domain=sample.domain,
                    pixels=_OFFLINE_TRANSFORMS[name](sample.pixels),
                    original_size=sample.original_size,
                    provenance=PROVENANCE_OFFLINE_AUGMENTED,
                    source_path=sample.source_path,
                )
            )
    return out


def _stack(samples: list[ImageSample]) -> torch.Tensor:
    arrays = np.stack([s.pixels for s in samples])[:, None, :, :]
    return torch.from_numpy(np.ascontiguousarray(arrays))


class _DomainStream:
    """Endless stream over one domain: reshuffled full passes, no replacement within a pass."""

    def __init__(self, samples: list[ImageSample], rng: np.random.Generator):
        if not samples:
            raise ConfigError("cannot sample from an empty domain")
        self.samples = samples
        self.rng = rng
        self._order: list[int] = []
        self._cursor = 0

    @property
    def remaining(self) -> int:
        return len(self._order) - self._cursor

    def reset_pass(self):
        self._order = self.rng.permutation(len(self.samples)).tolist()
        self._cursor = 0

    def take(self, n: int) -> list[ImageSample]:
        taken: list[ImageSample] = []
        while len(taken) < n:
            if self._cursor >= len(self._order):
                self.reset_pass()
            taken.append(self.samples[self._order[self._cursor]])
            self._cursor += 1
        return taken


class UnpairedSampler:
    """Draws unpaired batches from the two domains under a fixed seed.

    One epoch is one pass over the larger domain: epoch_length full batches,
    with any tail that cannot fill a batch dropped (and logged). The smaller
    domain is recycled through reshuffled passes, so its batches may straddle
    pass boundaries. A fixed seed yields an identical batch sequence.
    """

    def __init__(
        self,
        defect_free: list[ImageSample],
        defective: list[ImageSample],
        batch_size: int,
        seed: int = 0,
        rng: np.random.Generator | None = None,
    ):
        if batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
        self.batch_size = batch_size
        self.rng = rng if rng is not None else np.random.default_rng(seed)
        self._stream_a = _DomainStream(defect_free, self.rng)
        self._stream_b = _DomainStream(defective, self.rng)
        self._larger = max(len(defect_free), len(defective))
        self.epoch_length = self._larger // batch_size
        if self.epoch_length == 0:
            raise ConfigError(
                f"batch_size {batch_size} exceeds the larger domain size {self._larger}; no full batch per epoch"
            )
        self._dropped = self._larger - self.epoch_length * batch_size
        self.epoch = 0
        self.step_in_epoch = 0

    def _epoch_reset(self):
        # New pass for any domain at the epoch-defining (larger) size; the
        # smaller domain keeps its stream and recycles.
        for stream in (self._stream_a, self._stream_b):
            if len(stream.samples) != self._larger:
                continue
            if stream.remaining > 0:
                logger.info(
                    "epoch %d: dropping final partial batch (%d of %d samples unused in the larger domain)",
                    self.epoch, stream.remaining, self._larger,
                )
            stream.reset_pass()
        self.step_in_epoch = 0

    def next_batch(self) -> BatchPair:
        """Next unpaired batch; advances epoch bookkeeping as needed."""
        if self.step_in_epoch == 0:
            self._epoch_reset()
        tag = f"epoch{self.epoch}:step{self.step_in_epoch}"
        picked_a = self._stream_a.take(self.batch_size)
        picked_b = self._stream_b.take(self.batch_size)
        pair = BatchPair(
            batch_a=_stack(picked_a),
            batch_b=_stack(picked_b),
            ids_a=[s.id for s in picked_a],
            ids_b=[s.id for s in picked_b],
            rng_state_tag=tag,
        )
        self.step_in_epoch += 1
        if self.step_in_epoch >= self.epoch_length:
            self.epoch += 1
            self.step_in_epoch = 0
        return pair

    def epoch_batches(self):
        """Yield exactly one epoch's worth of batches."""
        for _ in range(self.epoch_length):
            yield self.next_batch()

    def state_dict(self) -> dict:
        """Resumable sampler state: RNG, pass orders, and cursors."""
        return {
            "epoch": self.epoch,
            "step_in_epoch": self.step_in_epoch,
            "rng_state": self.rng.bit_generator.state,
            "stream_a": {"order": list(self._stream_a._order), "cursor": self._stream_a._cursor},
            "stream_b": {"order": list(self._stream_b._order), "cursor": self._stream_b._cursor},
        }

    def load_state_dict(self, state: dict):
        """Restore a state_dict onto a sampler built over the same domains."""
        self.epoch = int(state["epoch"])
        self.step_in_epoch = int(state["step_in_epoch"])
        self.rng.bit_generator.state = state["rng_state"]
        for stream, key in ((self._stream_a, "stream_a"), (self._stream_b, "stream_b")):
            stream._order = [int(i) for i in state[key]["order"]]
            stream._cursor = int(state[key]["cursor"])
