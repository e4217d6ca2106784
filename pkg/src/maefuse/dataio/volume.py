"""3D volumes: container, raw-sidecar IO, isotropic resampling, stride slicing."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..errors import ContractError, DataError
from ..nnkit.functional import bilinear_matrix

MODALITIES = ("T1", "T2", "FLAIR", "PD", "T2STAR", "SWI", "DWI")


@dataclass
class Volume:
    """A scan indexed ``data[x, y, z]``; serialized buffers are x-fastest."""

    data: np.ndarray
    voxel_size: tuple[float, float, float] = (1.0, 1.0, 1.0)
    modality_label: str | None = None
    subject_id: str = ""

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.dtype.kind != "f":
            self.data = self.data.astype(np.float32)
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise DataError(f"volume must be 3D with every dim >= 1, got shape {self.data.shape}")
        if not np.isfinite(self.data).all():
            raise DataError("volume contains NaN or infinite voxels")
        self.voxel_size = tuple(float(s) for s in self.voxel_size)
        if len(self.voxel_size) != 3 or min(self.voxel_size) <= 0:
            raise DataError(f"voxel sizes must be three positive numbers, got {self.voxel_size}")
        if self.modality_label is not None and self.modality_label not in MODALITIES:
            raise DataError(f"unknown modality {self.modality_label!r}; expected one of {MODALITIES}")

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(d) for d in self.data.shape)

    def flat(self) -> np.ndarray:
        """Buffer in x-fastest order."""
        return self.data.ravel(order="F")


def from_flat(buffer: np.ndarray, dims, **kwargs) -> Volume:
    data = np.asarray(buffer).reshape(tuple(dims), order="F")
    return Volume(data, **kwargs)


def resample_isotropic(v: Volume, order: int = 1) -> Volume:
    """Resample to cubic voxels of edge ``min(voxel_size)``.

    ``order=1`` is trilinear with voxel-centre alignment; ``order=0`` is
    nearest neighbour, used for label volumes. Already-isotropic volumes are
    returned unchanged.
    """
    target = min(v.voxel_size)
    if all(s == target for s in v.voxel_size):
        return v
    new_dims = [max(1, int(math.floor(d * s / target + 0.5))) for d, s in zip(v.dims, v.voxel_size)]
    out = v.data.astype(np.float64)
    for axis, (old, new) in enumerate(zip(v.dims, new_dims)):
        if old == new:
            continue
        if order == 1:
            m = bilinear_matrix(old, new)
            out = np.moveaxis(np.tensordot(m, np.moveaxis(out, axis, 0), axes=(1, 0)), 0, axis)
        else:
            idx = _nearest_index(old, new)
            out = np.take(out, idx, axis=axis)
    return Volume(
        out.astype(v.data.dtype),
        voxel_size=(target, target, target),
        modality_label=v.modality_label,
        subject_id=v.subject_id,
    )


def _nearest_index(in_size: int, out_size: int) -> np.ndarray:
    scale = in_size / out_size
    return np.minimum(np.floor((np.arange(out_size) + 0.5) * scale).astype(int), in_size - 1)


def slice_indices(dim: int, k: int) -> list[int]:
    if k < 1:
        raise ContractError(f"stride must be >= 1, got {k}")
    return list(range(0, dim, k))


def take_slice(data: np.ndarray, axis: int, index: int) -> np.ndarray:
    return np.take(data, index, axis=axis)


def extract_slices(v: Volume, axes=(0, 1, 2), k: int = 1, resample: bool = True) -> list[tuple[np.ndarray, tuple[str, int, int]]]:
    """Every k-th slice along each requested axis.

    Volumes that extend along all three axes are first resampled to
    isotropic voxels. Returns ``(slice, (subject_id, axis, index))`` pairs.
    """
    axes = sorted(set(axes))
    if not axes:
        raise ContractError("extract_slices needs at least one axis")
    if any(a not in (0, 1, 2) for a in axes):
        raise ContractError(f"axes must be drawn from {{0,1,2}}, got {axes}")
    if k < 1:
        raise ContractError(f"stride must be >= 1, got {k}")
    if resample and min(v.dims) > 1:
        v = resample_isotropic(v)
    out = []
    for a in axes:
        for i in slice_indices(v.dims[a], k):
            out.append((take_slice(v.data, a, i), (v.subject_id, a, i)))
    return out


def write_raw(v: Volume, path: str | Path) -> Path:
    """Write ``<stem>.json`` + ``<stem>.bin`` (little-endian float32)."""
    path = Path(path)
    stem = path.with_suffix("")
    meta = {
        "dims": list(v.dims),
        "voxel_size": list(v.voxel_size),
        "dtype": "f32",
        "subject_id": v.subject_id,
        "modality": v.modality_label,
    }
    stem.with_suffix(".bin").write_bytes(v.flat().astype("<f4").tobytes())
    sidecar = stem.with_suffix(".json")
    sidecar.write_text(json.dumps(meta, sort_keys=True) + "\n")
    return sidecar


def read_raw(path: str | Path) -> Volume:
    path = Path(path)
    sidecar = path.with_suffix(".json")
    blob = path.with_suffix(".bin")
    try:
        meta = json.loads(sidecar.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read raw sidecar {sidecar}: {exc}") from exc
    if meta.get("dtype", "f32") != "f32":
        raise DataError(f"raw sidecar dtype {meta.get('dtype')!r} unsupported (only 'f32')")
    dims = [int(d) for d in meta["dims"]]
    raw = blob.read_bytes()
    expected = 4 * int(np.prod(dims))
    if len(raw) != expected:
        raise DataError(f"raw blob {blob}: expected {expected} bytes, got {len(raw)}")
    buf = np.frombuffer(raw, dtype="<f4").astype(np.float32)
    return from_flat(
        buf,
        dims,
        voxel_size=tuple(meta.get("voxel_size", (1, 1, 1))),
        modality_label=meta.get("modality"),
        subject_id=meta.get("subject_id") or stem_name(path),
    )


def stem_name(path: Path) -> str:
    name = path.name
    for suffix in (".nii", ".json", ".bin"):
        if name.endswith(suffix):
            return name[: -len(suffix)]
    return name


def load_volume(path: str | Path) -> Volume:
    """Load a ``.nii`` file or a raw ``.json``/``.bin`` pair."""
    from .nifti import parse_nifti1

    path = Path(path)
    if path.suffix == ".nii":
        try:
            raw = path.read_bytes()
        except OSError as exc:
            raise DataError(f"cannot read {path}: {exc}") from exc
        vol = parse_nifti1(raw)
        vol.subject_id = vol.subject_id or stem_name(path)
        return vol
    if path.suffix in (".json", ".bin"):
        return read_raw(path)
    raise DataError(f"unsupported volume file {path} (expected .nii, .json or .bin)")
