"""Checkpoint directory format: metadata.json plus raw float32 arrays.

Layout:

    <dir>/metadata.json         names, shapes, dtypes, config, counters, RNG
    <dir>/arrays/00000.f32 ...  one raw little-endian float32 buffer per array

Every tensor (network parameters and buffers, optimizer moments) is stored
as its own flat '<f4' file, indexed by metadata. Integer tensors are cast
to float32 with the original dtype recorded and restored on load; the
values involved (batch counters, step counts) stay well below 2**24, where
that cast is exact. Writes go to a temporary sibling directory and are
renamed into place, so a crash never leaves a half-written checkpoint at
the target path.
"""

import base64
import json
import logging
import os
import shutil
from pathlib import Path

import numpy as np
import torch

from sigan.errors import CheckpointError
from sigan.networks import DiscriminatorArch, GeneratorArch, PatchDiscriminator, UNetGenerator

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1

_INT_DTYPES = {"int64": np.int64, "int32": np.int32, "int16": np.int16, "uint8": np.uint8}
_EXACT_INT_LIMIT = 2**24


def _dtype_name(tensor: torch.Tensor) -> str:
    name = str(tensor.dtype).removeprefix("torch.")
    if name == "float32" or name in _INT_DTYPES:
        return name
    raise CheckpointError(f"unsupported tensor dtype {name!r}; expected float32 or an integer type")


def _to_f32_array(tensor: torch.Tensor, key: str) -> np.ndarray:
    arr = tensor.detach().cpu().numpy()
    if arr.dtype != np.float32:
        if np.abs(arr).max(initial=0) >= _EXACT_INT_LIMIT:
            raise CheckpointError(f"array {key!r} holds integers too large to store exactly as float32")
        arr = arr.astype(np.float32)
    # ascontiguousarray promotes 0-dim to (1,); keep the true shape so
    # scalar buffers (batch counters, step counts) restore 0-dim.
    return np.ascontiguousarray(arr).reshape(arr.shape)


def _network_kind(module: torch.nn.Module) -> str:
    if isinstance(module, UNetGenerator):
        return "unet_generator"
    if isinstance(module, PatchDiscriminator):
        return "patch_discriminator"
    raise CheckpointError(f"cannot checkpoint module of type {type(module).__name__}")


def _import_dataclasses_asdict():
    import dataclasses

    return dataclasses.asdict


def save_checkpoint(
    path,
    *,
    networks: dict[str, torch.nn.Module],
    optimizers: dict[str, torch.optim.Optimizer] | None = None,
    config: dict | None = None,
    epoch: int = 0,
    step: int = 0,
    extra_rng: dict | None = None,
) -> str:
    """Write a checkpoint directory; replaces an existing one at `path`."""
    asdict = _import_dataclasses_asdict()
    target = Path(path)
    arrays: list[tuple[str, np.ndarray, str]] = []  # (key, f32 array, dtype name)

    net_meta = {}
    for name, module in networks.items():
        net_meta[name] = {
            "kind": _network_kind(module),
            "role": module.role,
            "arch": asdict(module.arch),
        }
        for key, tensor in module.state_dict().items():
            arrays.append((f"net/{name}/{key}", _to_f32_array(tensor, key), _dtype_name(tensor)))

    opt_meta = {}
    for name, opt in (optimizers or {}).items():
        groups = []
        for group in opt.param_groups:
            plain = {k: v for k, v in group.items() if k != "params"}
            plain["num_params"] = len(group["params"])
            groups.append(plain)
        flat_params = [p for group in opt.param_groups for p in group["params"]]
        steps: dict[str, float] = {}
        for idx, param in enumerate(flat_params):
            state = opt.state.get(param)
            if not state:
                continue
            for key, value in state.items():
                if key == "step":
                    steps[str(idx)] = float(value)
                elif isinstance(value, torch.Tensor):
                    arrays.append((f"opt/{name}/{idx}/{key}", _to_f32_array(value, key), _dtype_name(value)))
                else:
                    raise CheckpointError(f"optimizer {name!r} has unsupported state entry {key!r}")
        opt_meta[name] = {"kind": type(opt).__name__.lower(), "param_groups": groups, "steps": steps}

    array_index = []
    for i, (key, arr, dtype) in enumerate(arrays):
        array_index.append(
            {"key": key, "file": f"arrays/{i:05d}.f32", "shape": list(arr.shape), "dtype": dtype}
        )

    from sigan import __version__

    metadata = {
        "format_version": FORMAT_VERSION,
        "tool": "sigan",
        "tool_version": __version__,
        "epoch": int(epoch),
        "step": int(step),
        "config": config,
        "networks": net_meta,
        "optimizers": opt_meta,
        "arrays": array_index,
        "rng": {
            "torch": base64.b64encode(torch.get_rng_state().numpy().tobytes()).decode("ascii"),
            "extra": extra_rng or {},
        },
    }

    tmp = target.parent / (target.name + ".tmp-write")
    if tmp.exists():
        shutil.rmtree(tmp)
    (tmp / "arrays").mkdir(parents=True)
    try:
        for entry, (_, arr, _) in zip(array_index, arrays):
            (tmp / entry["file"]).write_bytes(arr.astype("<f4", copy=False).tobytes())
        (tmp / "metadata.json").write_text(json.dumps(metadata, indent=1))
        if target.exists():
            shutil.rmtree(target)
        os.replace(tmp, target)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    logger.info("checkpoint written to %s (%d arrays)", target, len(array_index))
    return str(target)


class LoadedCheckpoint:
    """Parsed checkpoint: metadata plus all arrays, restored to their dtypes."""

    def __init__(self, metadata: dict, arrays: dict[str, torch.Tensor], path: str):
        self.metadata = metadata
        self.arrays = arrays
        self.path = path

    @property
    def epoch(self) -> int:
        return int(self.metadata["epoch"])

    @property
    def step(self) -> int:
        return int(self.metadata["step"])

    def config(self) -> dict:
        return self.metadata.get("config") or {}

    def network_names(self) -> list[str]:
        return list(self.metadata["networks"])

    def network_state_dict(self, name: str) -> dict[str, torch.Tensor]:
        prefix = f"net/{name}/"
        found = {key[len(prefix):]: t for key, t in self.arrays.items() if key.startswith(prefix)}
        if not found:
            raise CheckpointError(f"checkpoint has no arrays for network {name!r}")
        return found

    def build_networks(self) -> dict[str, torch.nn.Module]:
        """Reconstruct each network from its recorded architecture and weights."""
        nets: dict[str, torch.nn.Module] = {}
        for name, meta in self.metadata["networks"].items():
            arch_dict = dict(meta["arch"])
            if meta["kind"] == "unet_generator":
                module = UNetGenerator(GeneratorArch(**arch_dict), role=meta["role"])
            elif meta["kind"] == "patch_discriminator":
                for key in ("filters", "strides"):
                    if key in arch_dict and isinstance(arch_dict[key], list):
                        arch_dict[key] = tuple(arch_dict[key])
                module = PatchDiscriminator(DiscriminatorArch(**arch_dict), role=meta["role"])
            else:
                raise CheckpointError(f"unknown network kind {meta['kind']!r}")
            try:
                module.load_state_dict(self.network_state_dict(name), strict=True)
            except RuntimeError as exc:
                raise CheckpointError(f"network {name!r} does not match its recorded architecture: {exc}") from exc
            nets[name] = module
        return nets

    def load_optimizer(self, name: str, optimizer: torch.optim.Optimizer):
        """Restore saved moments and step counts into a freshly built optimizer.

        The optimizer must hold the same parameters in the same order as at
        save time (rebuild the networks first, then the optimizer over them).
        """
        meta = self.metadata.get("optimizers", {}).get(name)
        if meta is None:
            raise CheckpointError(f"checkpoint has no optimizer state for {name!r}")
        saved_counts = [g["num_params"] for g in meta["param_groups"]]
        actual_counts = [len(g["params"]) for g in optimizer.param_groups]
        if saved_counts != actual_counts:
            raise CheckpointError(
                f"optimizer {name!r} param-group sizes {actual_counts} do not match saved {saved_counts}"
            )
        groups = []
        start = 0
        for group in meta["param_groups"]:
            plain = {k: v for k, v in group.items() if k != "num_params"}
            if isinstance(plain.get("betas"), list):
                plain["betas"] = tuple(plain["betas"])
            plain["params"] = list(range(start, start + group["num_params"]))
            groups.append(plain)
            start += group["num_params"]
        state: dict[int, dict] = {}
        prefix = f"opt/{name}/"
        for key, tensor in self.arrays.items():
            if not key.startswith(prefix):
                continue
            _, _, idx, entry = key.split("/", 3)
            state.setdefault(int(idx), {})[entry] = tensor
        for idx_str, step_value in meta.get("steps", {}).items():
            state.setdefault(int(idx_str), {})["step"] = torch.tensor(float(step_value))
        optimizer.load_state_dict({"state": state, "param_groups": groups})

    def extra_rng(self) -> dict:
        return self.metadata.get("rng", {}).get("extra", {})

    def restore_rng(self):
        encoded = self.metadata.get("rng", {}).get("torch")
        if encoded:
            raw = np.frombuffer(base64.b64decode(encoded), dtype=np.uint8).copy()
            torch.set_rng_state(torch.from_numpy(raw))


def load_checkpoint(path) -> LoadedCheckpoint:
    """Read and validate a checkpoint directory written by save_checkpoint."""
    root = Path(path)
    meta_path = root / "metadata.json"
    if not meta_path.is_file():
        raise CheckpointError(f"not a checkpoint directory (no metadata.json): {root}")
    try:
        metadata = json.loads(meta_path.read_text())
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"corrupt checkpoint metadata in {meta_path}: {exc}") from exc
    version = metadata.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format_version {version!r} (expected {FORMAT_VERSION})")

    arrays: dict[str, torch.Tensor] = {}
    for entry in metadata.get("arrays", []):
        file_path = root / entry["file"]
        if not file_path.is_file():
            raise CheckpointError(f"checkpoint array file missing: {file_path}")
        raw = file_path.read_bytes()
        shape = tuple(entry["shape"])
        expected_bytes = int(np.prod(shape, dtype=np.int64)) * 4 if shape else 4
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        if len(raw) != expected_bytes:
            raise CheckpointError(
                f"array {entry['key']!r}: file holds {len(raw)} bytes, expected {expected_bytes} for shape {shape}"
            )
        values = np.frombuffer(raw, dtype="<f4", count=count).reshape(shape)
        dtype = entry.get("dtype", "float32")
        if dtype == "float32":
            tensor = torch.from_numpy(values.astype(np.float32, copy=True))
        elif dtype in _INT_DTYPES:
            tensor = torch.from_numpy(values.astype(_INT_DTYPES[dtype]))
        else:
            raise CheckpointError(f"array {entry['key']!r}: unknown dtype {dtype!r}")
        if entry["key"] in arrays:
            raise CheckpointError(f"duplicate array key {entry['key']!r}")
        arrays[entry["key"]] = tensor
    return LoadedCheckpoint(metadata, arrays, str(root))
