"""Checkpoints as a JSON manifest plus one raw little-endian float32 blob.

The manifest lists every array with name, shape and byte offset, so the
blob can be read from any language without this package.
"""
from __future__ import annotations

import base64
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

FORMAT = "interactpred-checkpoint"
VERSION = 1


class CheckpointError(Exception):
    pass


@dataclass
class Checkpoint:
    config: dict
    vocab: dict
    step: int
    arrays: dict[str, np.ndarray]
    optimizer: dict = field(default_factory=dict)
    rng: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def model_arrays(self) -> dict[str, np.ndarray]:
        return {k[len("model."):]: v for k, v in self.arrays.items() if k.startswith("model.")}


def _blob_path(manifest: Path) -> Path:
    return manifest.with_suffix(".bin")


def _atomic_write(path: Path, data: bytes):
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def save_checkpoint(path, model: torch.nn.Module, config: dict, vocab: dict, step: int = 0,
                    optimizer: torch.optim.Optimizer | None = None, extra: dict | None = None) -> Path:
    """Write ``path`` (manifest, .json) and its sibling .bin blob, each via rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    named = [("model." + k, v) for k, v in model.state_dict().items()]
    opt_meta = {}
    if optimizer is not None:
        names = {id(p): n for n, p in model.named_parameters()}
        opt_meta = {"param_groups": [], "steps": {}}
        for group in optimizer.param_groups:
            hyper = {k: (list(v) if isinstance(v, tuple) else v) for k, v in group.items()
                     if k != "params"}
            hyper["params"] = [names[id(p)] for p in group["params"]]
            opt_meta["param_groups"].append(hyper)
            for p in group["params"]:
                state = optimizer.state.get(p)
                if not state:
                    continue
                n = names[id(p)]
                opt_meta["steps"][n] = float(state["step"])
                named.append((f"optim.exp_avg.{n}", state["exp_avg"]))
                named.append((f"optim.exp_avg_sq.{n}", state["exp_avg_sq"]))
    entries, chunks, offset = [], [], 0
    for name, tensor in named:
        arr = np.ascontiguousarray(tensor.detach().cpu().numpy(), dtype="<f4")
        raw = arr.tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": "<f4",
                        "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    blob = b"".join(chunks)
    manifest = {
        "format": FORMAT, "version": VERSION, "step": int(step), "config": config,
        "vocab": vocab, "tensors": entries, "optimizer": opt_meta,
        "rng": {"torch": base64.b64encode(torch.get_rng_state().numpy().tobytes()).decode()},
        "blob": {"file": _blob_path(path).name, "nbytes": len(blob),
                 "sha256": hashlib.sha256(blob).hexdigest()},
        "extra": extra or {},
    }
    _atomic_write(_blob_path(path), blob)
    _atomic_write(path, json.dumps(manifest, indent=1).encode())
    return path


def load_checkpoint(path, expect_config: dict | None = None) -> Checkpoint:
    """Read and fully validate a checkpoint before anything is built from it."""
    path = Path(path)
    try:
        manifest = json.loads(path.read_text())
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"checkpoint manifest {path} is corrupt: {exc}") from exc
    if manifest.get("format") != FORMAT or manifest.get("version") != VERSION:
        raise CheckpointError(
            f"unsupported checkpoint format/version {manifest.get('format')}/{manifest.get('version')}")
    if expect_config is not None:
        _compare_configs(expect_config, manifest["config"])
    blob_file = path.parent / manifest["blob"]["file"]
    try:
        blob = blob_file.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint blob {blob_file}: {exc}") from exc
    if len(blob) != manifest["blob"]["nbytes"]:
        raise CheckpointError(
            f"checkpoint blob {blob_file} truncated: {len(blob)} of {manifest['blob']['nbytes']} bytes")
    if hashlib.sha256(blob).hexdigest() != manifest["blob"]["sha256"]:
        raise CheckpointError(f"checkpoint blob {blob_file} checksum mismatch")
    arrays = {}
    for entry in manifest["tensors"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        if entry["dtype"] != "<f4" or entry["nbytes"] != 4 * count:
            raise CheckpointError(f"bad tensor entry for {entry['name']}")
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=entry["offset"])
        arrays[entry["name"]] = arr.reshape(entry["shape"]).copy()
    return Checkpoint(config=manifest["config"], vocab=manifest["vocab"], step=manifest["step"],
                      arrays=arrays, optimizer=manifest.get("optimizer", {}),
                      rng=manifest.get("rng", {}), extra=manifest.get("extra", {}))


def _compare_configs(expected, found, prefix=""):
    for key in sorted(set(expected) | set(found)):
        a, b = expected.get(key), found.get(key)
        if isinstance(a, dict) and isinstance(b, dict):
            _compare_configs(a, b, prefix + key + ".")
        elif _norm(a) != _norm(b):
            raise CheckpointError(f"config mismatch for {prefix}{key}: expected {a!r}, checkpoint has {b!r}")


def _norm(v):
    return list(v) if isinstance(v, tuple) else v


def restore_model(model: torch.nn.Module, ckpt: Checkpoint):
    """Copy arrays into ``model``; every shape is checked before any copy happens."""
    arrays = ckpt.model_arrays()
    state = model.state_dict()
    missing = set(state) - set(arrays)
    if missing:
        raise CheckpointError(f"checkpoint lacks parameter {sorted(missing)[0]}")
    unexpected = set(arrays) - set(state)
    if unexpected:
        raise CheckpointError(f"checkpoint has unknown parameter {sorted(unexpected)[0]}")
    for name, tensor in state.items():
        if tuple(tensor.shape) != arrays[name].shape:
            raise CheckpointError(
                f"shape mismatch for parameter {name}: model {tuple(tensor.shape)}, "
                f"checkpoint {arrays[name].shape}")
    with torch.no_grad():
        for name, tensor in state.items():
            tensor.copy_(torch.from_numpy(arrays[name]).to(tensor.dtype))


def restore_optimizer(optimizer: torch.optim.Optimizer, model: torch.nn.Module, ckpt: Checkpoint):
    params = dict(model.named_parameters())
    steps = ckpt.optimizer.get("steps", {})
    for name, step in steps.items():
        p = params[name]
        optimizer.state[p] = {
            "step": torch.tensor(step),
            "exp_avg": torch.from_numpy(ckpt.arrays[f"optim.exp_avg.{name}"]).to(p.dtype).clone(),
            "exp_avg_sq": torch.from_numpy(ckpt.arrays[f"optim.exp_avg_sq.{name}"]).to(p.dtype).clone(),
        }
    saved_groups = ckpt.optimizer.get("param_groups", [])
    for group, saved in zip(optimizer.param_groups, saved_groups):
        for k, v in saved.items():
            if k != "params":
                group[k] = tuple(v) if isinstance(v, list) else v
    if "torch" in ckpt.rng:
        raw = np.frombuffer(base64.b64decode(ckpt.rng["torch"]), dtype=np.uint8).copy()
        torch.set_rng_state(torch.from_numpy(raw))
