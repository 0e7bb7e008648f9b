"""Dataset loading, preprocessing, offline augmentation, and unpaired sampling."""

import numpy as np
import pytest
import torch
from PIL import Image

from sigan import (
    ConfigError,
    DatasetLayoutError,
    ImageDecodeError,
    ImageSample,
    UnpairedSampler,
    augment_offline,
    denormalize_to_uint8,
    load_dataset,
    preprocess,
)
from sigan.data import DomainCollection

from conftest import make_sample, synthetic_collection, write_dataset_tree


# -- preprocessing -----------------------------------------------------------


def test_value_mapping_midpoint():
    arr = np.full((8, 8), 128, dtype=np.uint8)
    out = preprocess(arr, image_size=8)
    assert out.shape == (8, 8)
    assert np.allclose(out, 2.0 * (128.0 / 255.0) - 1.0, atol=1e-6)
    assert abs(float(out[0, 0]) - 0.0039216) < 1e-6


def test_value_mapping_endpoints():
    lo = preprocess(np.zeros((4, 4), dtype=np.uint8), image_size=4)
    hi = preprocess(np.full((4, 4), 255, dtype=np.uint8), image_size=4)
    assert np.allclose(lo, -1.0) and np.allclose(hi, 1.0)


def test_preprocess_resizes_to_square():
    arr = np.random.default_rng(0).integers(0, 255, size=(30, 50), dtype=np.uint8)
    out = preprocess(arr, image_size=16)
    assert out.shape == (16, 16)
    assert out.dtype == np.float32
    assert out.min() >= -1.0 and out.max() <= 1.0


def test_preprocess_output_range_property():
    rng = np.random.default_rng(1)
    for _ in range(20):
        h, w = int(rng.integers(2, 40)), int(rng.integers(2, 40))
        arr = rng.integers(0, 256, size=(h, w), dtype=np.uint8)
        out = preprocess(arr, image_size=int(rng.integers(4, 48)))
        assert out.min() >= -1.0 - 1e-6 and out.max() <= 1.0 + 1e-6


def test_preprocess_multichannel_collapses_with_warning(caplog):
    arr = np.random.default_rng(0).integers(0, 255, size=(8, 8, 3), dtype=np.uint8)
    with caplog.at_level("WARNING"):
        out = preprocess(arr, image_size=8)
    assert out.shape == (8, 8)
    assert any("multi-channel" in r.message for r in caplog.records)


def test_preprocess_rejects_tiny_images():
    with pytest.raises(ValueError):
        preprocess(np.zeros((1, 5), dtype=np.uint8))


def test_denormalize_roundtrip():
    values = np.arange(256, dtype=np.uint8).reshape(16, 16)
    back = denormalize_to_uint8(preprocess(values, image_size=16))
    assert np.array_equal(back, values)


# -- sample and collection validation ----------------------------------------


def test_sample_rejects_out_of_range_pixels():
    with pytest.raises(ConfigError):
        make_sample(np.full((4, 4), 1.5, dtype=np.float32))


def test_sample_rejects_unknown_domain():
    with pytest.raises(ConfigError):
        ImageSample(id="x", domain="scratch", pixels=np.zeros((4, 4), np.float32), original_size=(4, 4))


def test_collection_rejects_duplicate_ids():
    s = make_sample(np.zeros((4, 4), np.float32))
    with pytest.raises(ConfigError):
        DomainCollection(split="train", defect_free=[s, s], defective=[])


def test_collection_counts_and_subset():
    data = synthetic_collection(n=3)
    assert data.counts == {"defect_free": 3, "crack": 3, "finger_interruption": 3}
    assert len(data.defective_subset("crack")) == 3
    assert len(data.defective_subset("all")) == 6
    with pytest.raises(ConfigError):
        data.defective_subset("scratch")


# -- on-disk loading -----------------------------------------------------------


def test_load_dataset_layout_and_order(tmp_path):
    write_dataset_tree(tmp_path, n=3, size=16)
    data = load_dataset(tmp_path, "train", image_size=16)
    assert data.counts == {"defect_free": 3, "crack": 3, "finger_interruption": 3}
    ids = [s.id for s in data.defect_free]
    assert ids == sorted(ids)  # lexicographic file order
    assert ids[0] == "train/defect_free/img_000"
    assert data.defect_free[0].pixels.shape == (16, 16)
    assert data.defect_free[0].original_size == (16, 16)
    assert data.defect_free[0].provenance == "real"


def test_load_dataset_workers_preserve_order(tmp_path):
    write_dataset_tree(tmp_path, n=5, size=16)
    serial = load_dataset(tmp_path, "train", image_size=16)
    threaded = load_dataset(tmp_path, "train", image_size=16, workers=4)
    assert [s.id for s in serial.defect_free] == [s.id for s in threaded.defect_free]
    for a, b in zip(serial.defective, threaded.defective):
        assert np.array_equal(a.pixels, b.pixels)


def test_load_dataset_missing_class_dir_names_path(tmp_path):
    write_dataset_tree(tmp_path, n=1, size=16)
    victim = tmp_path / "train" / "crack"
    for f in victim.iterdir():
        f.unlink()
    victim.rmdir()
    with pytest.raises(DatasetLayoutError) as err:
        load_dataset(tmp_path, "train", image_size=16)
    assert "crack" in str(err.value)


def test_load_dataset_missing_split(tmp_path):
    with pytest.raises(DatasetLayoutError):
        load_dataset(tmp_path, "test", image_size=16)


def test_load_dataset_empty_class(tmp_path):
    write_dataset_tree(tmp_path, n=1, size=16)
    for f in (tmp_path / "train" / "crack").iterdir():
        f.unlink()
    with pytest.raises(ConfigError):
        load_dataset(tmp_path, "train", image_size=16)


def test_load_dataset_corrupt_file(tmp_path):
    write_dataset_tree(tmp_path, n=1, size=16)
    (tmp_path / "train" / "crack" / "bad.png").write_bytes(b"not a png at all")
    with pytest.raises(ImageDecodeError) as err:
        load_dataset(tmp_path, "train", image_size=16)
    assert "bad.png" in str(err.value)


def test_load_dataset_skips_non_image_suffixes(tmp_path):
    write_dataset_tree(tmp_path, n=2, size=16)
    (tmp_path / "train" / "crack" / "notes.txt").write_text("ignore me")
    data = load_dataset(tmp_path, "train", image_size=16)
    assert data.counts["crack"] == 2


# -- offline augmentation -------------------------------------------------------


def test_offline_augmentation_quadruples():
    data = synthetic_collection(n=50).defective_subset("crack")
    out = augment_offline(data)
    assert len(out) == 200  # 4x: original + mirror + flip + contrast
    assert sum(1 for s in out if s.provenance == "real") == 50
    assert sum(1 for s in out if s.provenance == "offline_augmented") == 150
    assert len({s.id for s in out}) == 200


def test_offline_transforms_are_correct():
    pixels = np.arange(16, dtype=np.float32).reshape(4, 4) / 16.0
    sample = make_sample(pixels, "train/crack/a", "crack")
    out = augment_offline([sample])
    by_suffix = {s.id.rsplit("_", 1)[-1]: s for s in out[1:]}
    assert np.array_equal(by_suffix["mirror"].pixels, pixels[:, ::-1])
    assert np.array_equal(by_suffix["flip"].pixels, pixels[::-1, :])


def test_contrast_stretch_hits_full_range():
    pixels = np.linspace(-0.5, 0.5, 16, dtype=np.float32).reshape(4, 4)
    out = augment_offline([make_sample(pixels, "train/crack/a", "crack")], transforms=("contrast",))
    stretched = out[1].pixels
    assert stretched.min() == pytest.approx(-1.0, abs=1e-6)
    assert stretched.max() == pytest.approx(1.0, abs=1e-6)


def test_contrast_of_constant_image_is_unchanged():
    pixels = np.full((4, 4), 0.25, dtype=np.float32)
    out = augment_offline([make_sample(pixels, "train/crack/a", "crack")], transforms=("contrast",))
    assert np.array_equal(out[1].pixels, pixels)


def test_unknown_transform_rejected():
    with pytest.raises(ConfigError):
        augment_offline([], transforms=("rotate",))


# -- unpaired sampling ---------------------------------------------------------


def _domains(n_a: int, n_b: int, size: int = 8):
    rng = np.random.default_rng(0)
    a = [
        make_sample(rng.uniform(-1, 1, (size, size)).astype(np.float32), f"train/defect_free/a{i}", "defect_free")
        for i in range(n_a)
    ]
    b = [
        make_sample(rng.uniform(-1, 1, (size, size)).astype(np.float32), f"train/crack/b{i}", "crack")
        for i in range(n_b)
    ]
    return a, b


def test_epoch_covers_larger_domain_once_and_recycles_smaller():
    a, b = _domains(200, 50)
    sampler = UnpairedSampler(a, b, batch_size=4, seed=0)
    assert sampler.epoch_length == 50
    ids_a, ids_b = [], []
    for batch in sampler.epoch_batches():
        ids_a.extend(batch.ids_a)
        ids_b.extend(batch.ids_b)
    counts_a = {i: ids_a.count(i) for i in set(ids_a)}
    counts_b = {i: ids_b.count(i) for i in set(ids_b)}
    assert len(ids_a) == 200 and set(counts_a.values()) == {1}
    assert len(ids_b) == 200 and set(counts_b.values()) == {4}


def test_sampler_is_deterministic_for_a_seed():
    a, b = _domains(10, 4)
    seq1 = [tuple(batch.ids_a + batch.ids_b) for batch in UnpairedSampler(a, b, 2, seed=9).epoch_batches()]
    seq2 = [tuple(batch.ids_a + batch.ids_b) for batch in UnpairedSampler(a, b, 2, seed=9).epoch_batches()]
    seq3 = [tuple(batch.ids_a + batch.ids_b) for batch in UnpairedSampler(a, b, 2, seed=10).epoch_batches()]
    assert seq1 == seq2
    assert seq1 != seq3


def test_sampler_drops_tail_and_logs(caplog):
    a, b = _domains(10, 3)
    sampler = UnpairedSampler(a, b, batch_size=4, seed=0)
    assert sampler.epoch_length == 2
    with caplog.at_level("INFO"):
        ids = [i for batch in sampler.epoch_batches() for i in batch.ids_a]
        list(sampler.epoch_batches())  # second epoch triggers the reset log
    assert len(ids) == 8 and len(set(ids)) == 8
    assert any("partial batch" in r.message for r in caplog.records)


def test_sampler_batch_shapes_and_tags():
    a, b = _domains(6, 6, size=8)
    sampler = UnpairedSampler(a, b, batch_size=3, seed=0)
    batch = sampler.next_batch()
    assert batch.batch_a.shape == batch.batch_b.shape == torch.Size([3, 1, 8, 8])
    assert batch.rng_state_tag == "epoch0:step0"
    assert sampler.next_batch().rng_state_tag == "epoch0:step1"
    assert sampler.next_batch().rng_state_tag == "epoch1:step0"


def test_sampler_rejects_oversized_batch():
    a, b = _domains(3, 3)
    with pytest.raises(ConfigError):
        UnpairedSampler(a, b, batch_size=4, seed=0)


def test_sampler_state_roundtrip_resumes_identically():
    a, b = _domains(9, 4)
    ref = UnpairedSampler(a, b, batch_size=2, seed=5)
    for _ in range(3):
        ref.next_batch()
    state = ref.state_dict()
    expected = [tuple(ref.next_batch().ids_a) for _ in range(6)]

    resumed = UnpairedSampler(a, b, batch_size=2, seed=999)
    resumed.load_state_dict(state)
    got = [tuple(resumed.next_batch().ids_a) for _ in range(6)]
    assert got == expected
