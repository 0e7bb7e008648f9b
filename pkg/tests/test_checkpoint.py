"""Checkpoint directory format: exact round-trips, rebuilds, corruption handling."""

import json

import numpy as np
import pytest
import torch

from sigan import (
    CheckpointError,
    DiscriminatorArch,
    GeneratorArch,
    PatchDiscriminator,
    ROLE_DA,
    ROLE_G,
    UNetGenerator,
    load_checkpoint,
    save_checkpoint,
)

from conftest import tiny_train_config


def _tiny_nets(seed=0):
    torch.manual_seed(seed)
    g = UNetGenerator(GeneratorArch(image_size=32, base_width=4), ROLE_G)
    d = PatchDiscriminator(DiscriminatorArch(), ROLE_DA)
    return {"G": g, "D_a": d}


def test_roundtrip_is_bitwise_exact(tmp_path):
    nets = _tiny_nets()
    path = tmp_path / "ck"
    save_checkpoint(path, networks=nets, epoch=3, step=17)
    ck = load_checkpoint(path)
    assert ck.epoch == 3 and ck.step == 17
    for name, module in nets.items():
        restored = ck.network_state_dict(name)
        for key, tensor in module.state_dict().items():
            assert torch.equal(tensor, restored[key]), f"{name}/{key}"
            assert tensor.dtype == restored[key].dtype


def test_rebuilt_network_forward_matches_within_tolerance(tmp_path):
    nets = _tiny_nets(seed=2)
    probe = torch.rand(2, 1, 32, 32) * 2 - 1
    nets["G"].eval()
    with torch.no_grad():
        before = nets["G"](probe)
    save_checkpoint(tmp_path / "ck", networks=nets)
    rebuilt = load_checkpoint(tmp_path / "ck").build_networks()["G"]
    rebuilt.eval()
    with torch.no_grad():
        after = rebuilt(probe)
    assert float((before - after).abs().max()) <= 1e-6
    assert rebuilt.role == ROLE_G
    assert rebuilt.arch == nets["G"].arch


def test_integer_buffers_keep_dtype_and_value(tmp_path):
    nets = _tiny_nets()
    nets["G"].train()
    nets["G"](torch.rand(2, 1, 32, 32) * 2 - 1)  # advances num_batches_tracked
    key = "enc_norms.1.num_batches_tracked"
    assert int(nets["G"].state_dict()[key]) == 1
    save_checkpoint(tmp_path / "ck", networks=nets)
    restored = load_checkpoint(tmp_path / "ck").network_state_dict("G")
    assert restored[key].dtype == torch.int64
    assert int(restored[key]) == 1


def test_metadata_and_array_files(tmp_path):
    save_checkpoint(tmp_path / "ck", networks=_tiny_nets(), config={"image_size": 32})
    meta = json.loads((tmp_path / "ck" / "metadata.json").read_text())
    assert meta["format_version"] == 1
    assert meta["config"] == {"image_size": 32}
    assert set(meta["networks"]) == {"G", "D_a"}
    assert meta["networks"]["G"]["kind"] == "unet_generator"
    for entry in meta["arrays"]:
        f = tmp_path / "ck" / entry["file"]
        assert f.is_file()
        n = int(np.prod(entry["shape"])) if entry["shape"] else 1
        assert f.stat().st_size == 4 * n


def test_no_temp_directory_left_behind(tmp_path):
    save_checkpoint(tmp_path / "ck", networks=_tiny_nets())
    leftovers = [p for p in tmp_path.iterdir() if "tmp" in p.name]
    assert leftovers == []


def test_save_replaces_existing_checkpoint(tmp_path):
    path = tmp_path / "ck"
    save_checkpoint(path, networks=_tiny_nets(seed=1), step=1)
    save_checkpoint(path, networks=_tiny_nets(seed=2), step=2)
    assert load_checkpoint(path).step == 2


def test_truncated_array_file_rejected(tmp_path):
    path = tmp_path / "ck"
    save_checkpoint(path, networks=_tiny_nets())
    victim = path / "arrays" / "00000.f32"
    victim.write_bytes(victim.read_bytes()[:-4])
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_missing_metadata_rejected(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path)


def test_wrong_format_version_rejected(tmp_path):
    path = tmp_path / "ck"
    save_checkpoint(path, networks=_tiny_nets())
    meta = json.loads((path / "metadata.json").read_text())
    meta["format_version"] = 99
    (path / "metadata.json").write_text(json.dumps(meta))
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_corrupt_metadata_json_rejected(tmp_path):
    path = tmp_path / "ck"
    save_checkpoint(path, networks=_tiny_nets())
    (path / "metadata.json").write_text("{ not json")
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_mismatched_arch_rejected_on_rebuild(tmp_path):
    path = tmp_path / "ck"
    save_checkpoint(path, networks=_tiny_nets())
    meta = json.loads((path / "metadata.json").read_text())
    meta["networks"]["G"]["arch"]["base_width"] = 8  # no longer matches the arrays
    (path / "metadata.json").write_text(json.dumps(meta))
    with pytest.raises(CheckpointError):
        load_checkpoint(path).build_networks()


def test_optimizer_state_roundtrip(tmp_path, trained_trainer):
    path = tmp_path / "opt-ck"
    trained_trainer.save(path)
    ck = load_checkpoint(path)
    nets = ck.build_networks()
    import itertools

    opt = torch.optim.Adam(itertools.chain(nets["G"].parameters(), nets["F"].parameters()), lr=1e-3)
    ck.load_optimizer("generators", opt)
    original = trained_trainer.state.opt_generators.state_dict()
    restored = opt.state_dict()
    assert len(original["state"]) == len(restored["state"])
    for idx, entry in original["state"].items():
        assert float(entry["step"]) == float(restored["state"][idx]["step"])
        assert torch.equal(entry["exp_avg"], restored["state"][idx]["exp_avg"])
        assert torch.equal(entry["exp_avg_sq"], restored["state"][idx]["exp_avg_sq"])
    for g_orig, g_rest in zip(original["param_groups"], restored["param_groups"]):
        assert g_orig["betas"] == g_rest["betas"]
        assert g_orig["eps"] == g_rest["eps"]


def test_optimizer_param_count_mismatch_rejected(tmp_path, trained_trainer):
    path = tmp_path / "opt-ck2"
    trained_trainer.save(path)
    ck = load_checkpoint(path)
    nets = ck.build_networks()
    opt = torch.optim.Adam(nets["G"].parameters(), lr=1e-3)  # missing F's params
    with pytest.raises(CheckpointError):
        ck.load_optimizer("generators", opt)


def test_missing_optimizer_name_rejected(tmp_path):
    path = tmp_path / "ck"
    save_checkpoint(path, networks=_tiny_nets())
    ck = load_checkpoint(path)
    opt = torch.optim.Adam([torch.nn.Parameter(torch.zeros(1))])
    with pytest.raises(CheckpointError):
        ck.load_optimizer("generators", opt)


def test_foreign_module_rejected(tmp_path):
    with pytest.raises(CheckpointError):
        save_checkpoint(tmp_path / "ck", networks={"m": torch.nn.Linear(2, 2)})


def test_config_roundtrips_through_checkpoint(tmp_path):
    cfg = tiny_train_config()
    save_checkpoint(tmp_path / "ck", networks=_tiny_nets(), config=cfg.to_flat_dict())
    from sigan import TrainConfig

    restored = TrainConfig.from_flat_dict(load_checkpoint(tmp_path / "ck").config())
    assert restored == cfg
