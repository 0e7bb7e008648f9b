"""Dataset augmentation with the defect-adding generator.

Defect-free images are translated into synthetic defective ones and written
as PNGs next to a manifest that records, per output file, which input and
which generator produced it. Generated images are only ever merged into a
train split; the test split stays untouched real data.
"""

import json
import logging
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from sigan.data import (
    DEFECT_CLASSES,
    PROVENANCE_GENERATED,
    DomainCollection,
    ImageSample,
    denormalize_to_uint8,
    preprocess,
    _read_grayscale,
)
from sigan.errors import ConfigError, DatasetLayoutError, RoleMismatchError
from sigan.networks import ROLE_G

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"


@dataclass
class ManifestEntry:
    """One generated image: where it is and where it came from."""

    output_path: str  # relative to the manifest's directory
    source_id: str
    generator_checkpoint: str
    target_class: str
    provenance: str = PROVENANCE_GENERATED


@dataclass
class AugmentationManifest:
    """Inventory of one generation run."""

    target_class: str
    generator_checkpoint: str
    seed: int
    counts: dict[str, dict[str, int]] = field(default_factory=dict)
    entries: list[ManifestEntry] = field(default_factory=list)

    def validate(self):
        per_class: dict[str, int] = {}
        for e in self.entries:
            per_class[e.target_class] = per_class.get(e.target_class, 0) + 1
        for cls, n in per_class.items():
            recorded = self.counts.get(cls, {}).get("fake")
            if recorded != n:
                raise ConfigError(f"manifest counts for {cls!r} record {recorded} fakes but list {n} entries")

    def to_dict(self) -> dict:
        return {
            "format_version": 1,
            "target_class": self.target_class,
            "generator_checkpoint": self.generator_checkpoint,
            "seed": self.seed,
            "counts": self.counts,
            "entries": [asdict(e) for e in self.entries],
        }


def save_manifest(manifest: AugmentationManifest, out_dir) -> str:
    manifest.validate()
    path = Path(out_dir) / MANIFEST_NAME
    tmp = path.with_name(MANIFEST_NAME + ".tmp")
    tmp.write_text(json.dumps(manifest.to_dict(), indent=1))
    os.replace(tmp, path)
    return str(path)


def load_manifest(path) -> AugmentationManifest:
    p = Path(path)
    if p.is_dir():
        p = p / MANIFEST_NAME
    if not p.is_file():
        raise DatasetLayoutError(f"no manifest found at {p}")
    data = json.loads(p.read_text())
    manifest = AugmentationManifest(
        target_class=data["target_class"],
        generator_checkpoint=data.get("generator_checkpoint", ""),
        seed=int(data.get("seed", 0)),
        counts=data.get("counts", {}),
        entries=[ManifestEntry(**e) for e in data.get("entries", [])],
    )
    manifest.validate()
    return manifest


def _pick_sources(pool_size: int, count: int, rng: np.random.Generator) -> list[int]:
    # Without replacement until the pool is exhausted, then fresh permutations.
    picks: list[int] = []
    while len(picks) < count:
        order = rng.permutation(pool_size).tolist()
        picks.extend(order[: count - len(picks)])
    return picks


def generate_defective(
    defect_free: list[ImageSample],
    generator: torch.nn.Module,
    count: int,
    out_dir,
    target_class: str,
    seed: int = 0,
    checkpoint_ref: str = "",
    batch_size: int = 8,
) -> AugmentationManifest:
    """Translate defect-free inputs into `count` synthetic defective PNGs.

    Inputs are drawn without replacement while they last; if count exceeds
    the pool, further rounds reuse inputs (fresh shuffle per round). Output
    files land in <out_dir>/<target_class>/ with the manifest at
    <out_dir>/manifest.json. Deterministic for a fixed seed and checkpoint.
    """
    role = getattr(generator, "role", None)
    if role != ROLE_G:
        raise RoleMismatchError(f"augmentation needs the defect-adding generator ({ROLE_G}), got {role!r}")
    if target_class not in DEFECT_CLASSES:
        raise ConfigError(f"unknown target class {target_class!r}; expected one of {DEFECT_CLASSES}")
    if count < 0:
        raise ConfigError(f"count must be nonnegative, got {count}")
    if count > 0 and not defect_free:
        raise ConfigError("no defect-free inputs to translate")

    # Fail on an unwritable destination before spending any compute.
    out_root = Path(out_dir)
    class_dir = out_root / target_class
    class_dir.mkdir(parents=True, exist_ok=True)
    probe = class_dir / ".write-probe"
    probe.touch()
    probe.unlink()

    rng = np.random.default_rng(seed)
    picks = _pick_sources(len(defect_free), count, rng)
    generator.eval()
    entries: list[ManifestEntry] = []
    for start in range(0, count, batch_size):
        chunk = picks[start : start + batch_size]
        batch = np.stack([defect_free[i].pixels for i in chunk])[:, None, :, :]
        with torch.no_grad():
            fakes = generator(torch.from_numpy(np.ascontiguousarray(batch))).numpy()
        for offset, src_idx in enumerate(chunk):
            index = start + offset
            name = f"fake_{target_class}_{index:05d}.png"
            rel_path = f"{target_class}/{name}"
            Image.fromarray(denormalize_to_uint8(fakes[offset, 0]), mode="L").save(out_root / rel_path)
            entries.append(
                ManifestEntry(
                    output_path=rel_path,
                    source_id=defect_free[src_idx].id,
                    generator_checkpoint=checkpoint_ref,
                    target_class=target_class,
                )
            )

    manifest = AugmentationManifest(
        target_class=target_class,
        generator_checkpoint=checkpoint_ref,
        seed=seed,
        counts={target_class: {"fake": len(entries)}},
        entries=entries,
    )
    save_manifest(manifest, out_root)
    logger.info("generated %d %s images under %s", len(entries), target_class, out_root)
    return manifest


def record_real_counts(manifest: AugmentationManifest, collection: DomainCollection) -> AugmentationManifest:
    """Add real-image counts from a collection to the manifest's tallies."""
    for cls, tally in manifest.counts.items():
        tally["real"] = collection.counts.get(cls, 0)
    return manifest


def merge_dataset(base: DomainCollection, manifest: AugmentationManifest, manifest_dir) -> DomainCollection:
    """Extend a train-split collection with the manifest's generated images.

    Every manifest entry must resolve to an existing file (checked up front);
    the images are loaded at the collection's working resolution and join the
    defective domain with provenance "generated". Merging into a test split
    is refused.
    """
    if base.split != "train":
        raise ConfigError(f"generated images may only be merged into the train split, not {base.split!r}")
    manifest.validate()
    root = Path(manifest_dir)
    paths = []
    for entry in manifest.entries:
        path = root / entry.output_path
        if not path.is_file():
            raise DatasetLayoutError(f"manifest entry {entry.output_path!r} (from {entry.source_id}) is missing")
        paths.append(path)

    if base.defect_free:
        image_size = base.defect_free[0].pixels.shape[0]
    elif base.defective:
        image_size = base.defective[0].pixels.shape[0]
    else:
        raise ConfigError("cannot infer working resolution from an empty collection")

    generated: list[ImageSample] = []
    for entry, path in zip(manifest.entries, paths):
        raw = _read_grayscale(path)
        generated.append(
            ImageSample(
                id=f"train/{entry.target_class}/generated/{path.stem}",
                domain=entry.target_class,
                pixels=preprocess(raw, image_size=image_size),
                original_size=(raw.shape[0], raw.shape[1]),
                provenance=PROVENANCE_GENERATED,
                source_path=str(path),
            )
        )
    return DomainCollection(
        split="train",
        defect_free=list(base.defect_free),
        defective=list(base.defective) + generated,
    )
