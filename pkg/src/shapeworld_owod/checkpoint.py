"""Checkpoint archives: manifest.json + one raw tensor blob.

The blob holds model parameters (float32 by default), the Gaussian objectness
statistics (float64, exact round-trip), optimizer moments and the torch RNG
state; the manifest records the tensor table, config hash, task/phase/epoch
and the numpy RNG state. Loading restores everything bit-exactly, so training
can resume as if uninterrupted and evaluation of a reloaded checkpoint
reproduces identical numbers.
"""

import json
from pathlib import Path

import numpy as np
import torch

from .numerics import read_blob, write_blob


class CheckpointError(RuntimeError):
    pass


def _optimizer_entries(optimizer, named_params):
    if optimizer is None:
        return [], {}
    id_to_name = {id(p): n for n, p in named_params}
    entries = []
    steps = {}
    for group_idx, group in enumerate(optimizer.param_groups):
        for p in group["params"]:
            state = optimizer.state.get(p)
            if not state:
                continue
            name = id_to_name[id(p)]
            for key in ("exp_avg", "exp_avg_sq"):
                entries.append((f"optim.{name}.{key}", state[key].detach().cpu().numpy()))
            step = state["step"]
            steps[name] = float(step.item() if torch.is_tensor(step) else step)
    meta = {
        "steps": steps,
        "param_groups": [
            {k: v for k, v in g.items() if k != "params"} for g in optimizer.param_groups
        ],
    }
    return entries, meta


def save_checkpoint(path, model, stats, optimizer=None, *, config_hash="", task_id=0,
                    phase="train", epoch=0, numpy_rng_state=None, extra=None):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    named = sorted(model.named_parameters())
    entries = [(f"model.{n}", p.detach().cpu().numpy()) for n, p in named]
    entries += [(f"stats.{k}", v.numpy()) for k, v in stats.state_tensors().items()]
    opt_entries, opt_meta = _optimizer_entries(optimizer, named)
    entries += opt_entries
    entries.append(("rng.torch", torch.get_rng_state().numpy()))

    blob, table = write_blob(entries)
    (path / "tensors.bin").write_bytes(blob)
    manifest = {
        "format_version": 1,
        "config_hash": config_hash,
        "task_id": task_id,
        "phase": phase,
        "epoch": epoch,
        "stats": {
            "step_count": stats.step_count,
            "momentum": stats.momentum,
            "cov_reg": stats.cov_reg,
            "dim": stats.dim,
        },
        "optimizer": opt_meta,
        "numpy_rng_state": numpy_rng_state,
        "extra": extra or {},
        "tensors": table,
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def load_checkpoint(path, model, stats, optimizer=None, expect_config_hash=None):
    """Restore model/stats (and optimizer + RNG when given). Returns manifest."""
    path = Path(path)
    manifest_path = path / "manifest.json"
    if not manifest_path.exists():
        raise CheckpointError(f"missing checkpoint manifest: {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    if expect_config_hash is not None and manifest.get("config_hash") != expect_config_hash:
        raise CheckpointError(
            f"checkpoint config hash {manifest.get('config_hash')!r} does not match "
            f"the active config {expect_config_hash!r}")
    blob = (path / "tensors.bin").read_bytes()
    tensors = read_blob(blob, manifest["tensors"])

    named = dict(model.named_parameters())
    with torch.no_grad():
        for name, p in named.items():
            key = f"model.{name}"
            if key not in tensors:
                raise CheckpointError(f"checkpoint is missing parameter {name}")
            arr = tensors[key]
            if tuple(arr.shape) != tuple(p.shape):
                raise CheckpointError(f"shape mismatch for {name}: {arr.shape} vs {tuple(p.shape)}")
            p.copy_(torch.from_numpy(arr).to(p.dtype))

    stats.load_state(tensors["stats.mean"], tensors["stats.cov"],
                     manifest["stats"]["step_count"])

    if optimizer is not None and manifest["optimizer"]:
        groups_meta = manifest["optimizer"]["param_groups"]
        if len(groups_meta) != len(optimizer.param_groups):
            raise CheckpointError("optimizer param group count mismatch")
        for group, meta in zip(optimizer.param_groups, groups_meta):
            group.update(meta)
        steps = manifest["optimizer"]["steps"]
        for name, p in named.items():
            key = f"optim.{name}.exp_avg"
            if key not in tensors:
                continue
            state = optimizer.state.setdefault(p, {})
            state["exp_avg"] = torch.from_numpy(tensors[key]).to(p.dtype)
            state["exp_avg_sq"] = torch.from_numpy(tensors[f"optim.{name}.exp_avg_sq"]).to(p.dtype)
            state["step"] = torch.tensor(steps[name])
    if "rng.torch" in tensors:
        torch.set_rng_state(torch.from_numpy(tensors["rng.torch"]))
    return manifest
