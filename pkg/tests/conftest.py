"""Shared fixtures: tiny architectures, synthetic datasets, a trained checkpoint."""

import numpy as np
import pytest
import torch
from PIL import Image

from sigan import (
    DiscriminatorArch,
    DomainCollection,
    GeneratorArch,
    ImageSample,
    TrainConfig,
    Trainer,
)

torch.set_num_threads(1)


def make_sample(
    pixels: np.ndarray,
    sample_id: str = "train/defect_free/x",
    domain: str = "defect_free",
) -> ImageSample:
    return ImageSample(
        id=sample_id,
        domain=domain,
        pixels=np.asarray(pixels, dtype=np.float32),
        original_size=pixels.shape,
    )


def synthetic_cell(rng: np.random.Generator, size: int = 32, defect: bool = False) -> np.ndarray:
    """A bright cell patch, optionally with a dark bar defect."""
    base = rng.uniform(0.2, 0.5) + rng.normal(0, 0.05, (size, size))
    if defect:
        r = int(rng.integers(4, size - 8))
        c = int(rng.integers(2, size // 2))
        base[r : r + 3, c : c + size // 2] = -0.7
    return np.clip(base, -1, 1).astype(np.float32)


def synthetic_collection(seed: int = 0, n: int = 6, size: int = 32, split: str = "train") -> DomainCollection:
    rng = np.random.default_rng(seed)
    defect_free = [
        make_sample(synthetic_cell(rng, size), f"{split}/defect_free/s{i}", "defect_free") for i in range(n)
    ]
    defective = [
        make_sample(synthetic_cell(rng, size, defect=True), f"{split}/crack/s{i}", "crack") for i in range(n)
    ] + [
        make_sample(synthetic_cell(rng, size, defect=True), f"{split}/finger_interruption/s{i}", "finger_interruption")
        for i in range(n)
    ]
    return DomainCollection(split=split, defect_free=defect_free, defective=defective)


def write_dataset_tree(root, n: int = 4, size: int = 32, seed: int = 0, splits=("train", "test")):
    """Write a dataset directory tree of synthetic PNGs; returns the root."""
    rng = np.random.default_rng(seed)
    for split in splits:
        for cls in ("defect_free", "crack", "finger_interruption"):
            d = root / split / cls
            d.mkdir(parents=True, exist_ok=True)
            for i in range(n):
                arr = rng.integers(100, 200, size=(size, size), dtype=np.uint8)
                if cls != "defect_free":
                    r = int(rng.integers(4, size - 6))
                    arr[r : r + 3, 2 : size - 2] = 25
                Image.fromarray(arr, mode="L").save(d / f"img_{i:03d}.png")
    return root


@pytest.fixture
def tiny_gen_arch() -> GeneratorArch:
    return GeneratorArch(image_size=32, base_width=4)


@pytest.fixture
def tiny_disc_arch() -> DiscriminatorArch:
    return DiscriminatorArch()


def tiny_train_config(**overrides) -> TrainConfig:
    values = dict(
        image_size=32,
        base_width=4,
        batch_size=2,
        epochs_constant=1,
        epochs_decay=1,
        checkpoint_every=0,
        seed=3,
        offline_augment=False,
        defect_class="crack",
    )
    values.update(overrides)
    return TrainConfig(**values)


@pytest.fixture
def tiny_config() -> TrainConfig:
    return tiny_train_config()


@pytest.fixture(scope="session")
def trained_trainer(tmp_path_factory):
    """A trainer advanced a few steps at 32px; shared where history is irrelevant."""
    out = tmp_path_factory.mktemp("trained")
    trainer = Trainer(tiny_train_config(), out_dir=out)
    data = synthetic_collection(seed=11)
    sampler = trainer.build_sampler(data)
    for _ in range(3):
        trainer.train_step(sampler.next_batch())
    return trainer


@pytest.fixture(scope="session")
def tiny_checkpoint(trained_trainer, tmp_path_factory):
    """Checkpoint directory saved from the session trainer."""
    path = tmp_path_factory.mktemp("ck") / "checkpoint"
    trained_trainer.save(path)
    return path


@pytest.fixture(scope="session")
def dataset_root(tmp_path_factory):
    """Synthetic on-disk dataset tree shared by CLI tests."""
    return write_dataset_tree(tmp_path_factory.mktemp("data"), n=4, size=32, seed=5)
