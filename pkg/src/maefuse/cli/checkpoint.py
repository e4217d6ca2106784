"""Checkpoints: a JSON manifest plus little-endian float32 blobs.

``checkpoint.json`` holds the format version, a config snapshot, the
parameter table (name, shape, byte offset, frozen flag; sorted by name),
RNG stream states and the step counter. ``checkpoint.bin`` is the
concatenation of the parameters in table order. Optimizer moments, when
present, go to ``checkpoint.opt.bin`` with their own table so training can
resume exactly.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import CheckpointError
from ..nnkit.layers import Module
from ..nnkit.optim import AdamWState
from ..nnkit.tensor import Parameter

FORMAT = "maefuse-checkpoint"
FORMAT_VERSION = 1
_DTYPE = np.dtype("<f4")


@dataclass
class Checkpoint:
    config: dict
    params: dict[str, np.ndarray]
    frozen: dict[str, bool]
    rng: dict[str, dict] = field(default_factory=dict)
    step: int = 0
    optimizer: AdamWState | None = None
    extra: dict = field(default_factory=dict)


def _table(arrays: dict[str, np.ndarray], frozen: dict[str, bool] | None = None) -> tuple[list[dict], bytes]:
    rows, chunks, offset = [], [], 0
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype=_DTYPE)
        row = {"name": name, "shape": list(arr.shape), "offset": offset}
        if frozen is not None:
            row["frozen"] = bool(frozen[name])
        rows.append(row)
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    return rows, b"".join(chunks)


def _write_atomic(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def paths(base: str | Path) -> tuple[Path, Path, Path]:
    """(manifest, blob, optimizer blob) for a directory, manifest path or stem."""
    base = Path(base)
    if base.suffix == ".json":
        manifest = base
    elif base.is_dir():
        manifest = base / "checkpoint.json"
    else:
        manifest = base.with_suffix(".json")
    return manifest, manifest.with_suffix(".bin"), manifest.with_suffix(".opt.bin")


def collect(module: Module) -> tuple[dict[str, np.ndarray], dict[str, bool]]:
    """Parameters keyed by their assigned names."""
    params: dict[str, Parameter] = {}
    for p in module.parameters():
        if not p.name:
            raise CheckpointError("every parameter needs a name before checkpointing")
        if p.name in params:
            raise CheckpointError(f"duplicate parameter name {p.name!r}")
        params[p.name] = p
    return {k: p.data for k, p in params.items()}, {k: p.frozen for k, p in params.items()}


def save_checkpoint(
    path: str | Path,
    module: Module,
    config: dict,
    rng: dict[str, dict] | None = None,
    step: int = 0,
    optimizer: AdamWState | None = None,
    extra: dict | None = None,
) -> Path:
    manifest_path, blob_path, opt_path = paths(path)
    manifest_path.parent.mkdir(parents=True, exist_ok=True)
    arrays, frozen = collect(module)
    rows, blob = _table(arrays, frozen)
    manifest = {
        "format": FORMAT,
        "format_version": FORMAT_VERSION,
        "config": config,
        "step": int(step),
        "rng": rng or {},
        "parameters": rows,
        "blob": blob_path.name,
        "blob_bytes": len(blob),
        "blob_sha256": hashlib.sha256(blob).hexdigest(),
        "extra": extra or {},
    }
    if optimizer is not None:
        moments = {f"m/{k}": v for k, v in optimizer.m.items()} | {f"v/{k}": v for k, v in optimizer.v.items()}
        opt_rows, opt_blob = _table(moments)
        manifest["optimizer"] = {
            "lr": optimizer.lr,
            "beta1": optimizer.beta1,
            "beta2": optimizer.beta2,
            "eps": optimizer.eps,
            "weight_decay": optimizer.weight_decay,
            "step": optimizer.step,
            "tensors": opt_rows,
            "blob": opt_path.name,
            "blob_bytes": len(opt_blob),
            "blob_sha256": hashlib.sha256(opt_blob).hexdigest(),
        }
        _write_atomic(opt_path, opt_blob)
    _write_atomic(blob_path, blob)
    _write_atomic(manifest_path, (json.dumps(manifest, indent=1, sort_keys=True) + "\n").encode("utf-8"))
    return manifest_path


def _read_blob(path: Path, expected: int, digest: str, rows: list[dict]) -> dict[str, np.ndarray]:
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint blob {path}: {exc}") from exc
    total = sum(4 * int(np.prod(r["shape"], dtype=np.int64)) for r in rows)
    if len(data) != expected or total != expected:
        raise CheckpointError(
            f"corrupt checkpoint: blob {path.name} has {len(data)} bytes, manifest expects {expected} (tables sum to {total})"
        )
    if hashlib.sha256(data).hexdigest() != digest:
        raise CheckpointError(f"corrupt checkpoint: checksum mismatch for {path.name}")
    out = {}
    for r in rows:
        n = int(np.prod(r["shape"], dtype=np.int64))
        arr = np.frombuffer(data, dtype=_DTYPE, count=n, offset=r["offset"]).reshape(r["shape"])
        out[r["name"]] = arr.astype(np.float32)
    return out


def load_checkpoint(path: str | Path) -> Checkpoint:
    """Read and verify a checkpoint; nothing is returned unless it is intact."""
    manifest_path, _, _ = paths(path)
    try:
        manifest = json.loads(manifest_path.read_text())
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint manifest {manifest_path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"corrupt checkpoint manifest {manifest_path}: {exc}") from exc
    if manifest.get("format") != FORMAT:
        raise CheckpointError(f"{manifest_path} is not a {FORMAT} manifest")
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"checkpoint format version {version} is not supported (this build reads version {FORMAT_VERSION})")
    rows = manifest["parameters"]
    names = [r["name"] for r in rows]
    if names != sorted(set(names)):
        raise CheckpointError("corrupt checkpoint: parameter table must list unique names in sorted order")
    base = manifest_path.parent
    params = _read_blob(base / manifest["blob"], manifest["blob_bytes"], manifest["blob_sha256"], rows)
    optimizer = None
    if "optimizer" in manifest:
        o = manifest["optimizer"]
        moments = _read_blob(base / o["blob"], o["blob_bytes"], o["blob_sha256"], o["tensors"])
        optimizer = AdamWState(
            lr=o["lr"],
            beta1=o["beta1"],
            beta2=o["beta2"],
            eps=o["eps"],
            weight_decay=o["weight_decay"],
            step=o["step"],
            m={k[2:]: v for k, v in moments.items() if k.startswith("m/")},
            v={k[2:]: v for k, v in moments.items() if k.startswith("v/")},
        )
    return Checkpoint(
        config=manifest["config"],
        params=params,
        frozen={r["name"]: r["frozen"] for r in rows},
        rng=manifest.get("rng", {}),
        step=manifest["step"],
        optimizer=optimizer,
        extra=manifest.get("extra", {}),
    )


def restore(module: Module, ckpt: Checkpoint, restore_frozen: bool = True) -> Module:
    """Copy checkpoint tensors into ``module`` (matched by parameter name)."""
    own = {p.name: p for p in module.parameters()}
    missing = sorted(set(own) - set(ckpt.params))
    extra = sorted(set(ckpt.params) - set(own))
    if missing or extra:
        raise CheckpointError(f"checkpoint does not match model: missing={missing[:5]} unexpected={extra[:5]}")
    for name, p in own.items():
        if ckpt.params[name].shape != p.shape:
            raise CheckpointError(f"shape mismatch for {name}: checkpoint {ckpt.params[name].shape}, model {p.shape}")
    for name, p in own.items():
        p.data = ckpt.params[name].astype(p.dtype, copy=True)
        p.grad = None
        if restore_frozen:
            p.frozen = ckpt.frozen[name]
    return module
