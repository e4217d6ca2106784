"""Slice records, coverage weights, dataset manifests and few-shot sampling."""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from ..errors import ContractError, DataError
from .preprocess import IMAGE_SIZE, clamp_bounds, preprocess_mask, preprocess_slice
from .volume import Volume, load_volume, resample_isotropic, take_slice

COVERAGE_TAU = 0.2
COVERAGE_FLOOR = 0.05


def brain_coverage_weight(mask: np.ndarray, tau: float = COVERAGE_TAU, w_min: float = COVERAGE_FLOOR) -> float:
    """Clamped linear ramp ``max(w_min, min(1, coverage / tau))``.

    Coverage is the fraction of pixels inside the brain mask.
    """
    mask = np.asarray(mask)
    if mask.size == 0:
        raise ContractError("brain mask is empty")
    if not np.isin(mask, (0, 1)).all():
        raise ContractError("brain mask must be binary (values in {0, 1})")
    coverage = float(mask.sum()) / mask.size
    return max(w_min, min(1.0, coverage / tau))


@dataclass
class SliceRecord:
    image: np.ndarray
    source: tuple[str, int, int] = ("", 0, 0)
    label: int | None = None
    seg_mask: np.ndarray | None = None
    brain_mask: np.ndarray | None = None
    weight: float | None = None
    dataset_tag: str = ""

    def __post_init__(self):
        img = np.asarray(self.image, dtype=np.float32)
        if img.ndim != 2 or img.shape[0] != img.shape[1]:
            raise ContractError(f"slice image must be square 2D, got shape {img.shape}")
        if img.min() < 0.0 or img.max() > 1.0:
            raise ContractError("slice image values must lie in [0, 1]")
        self.image = img
        if self.seg_mask is not None:
            self.seg_mask = np.asarray(self.seg_mask, dtype=np.int64)
            if self.seg_mask.shape != img.shape:
                raise ContractError(f"seg_mask shape {self.seg_mask.shape} != image shape {img.shape}")
            if self.seg_mask.min() < 0:
                raise ContractError("seg_mask labels must be non-negative")
        if self.brain_mask is not None:
            self.brain_mask = np.asarray(self.brain_mask, dtype=np.uint8)
            if self.brain_mask.shape != img.shape:
                raise ContractError(f"brain_mask shape {self.brain_mask.shape} != image shape {img.shape}")
            if self.weight is None:
                self.weight = brain_coverage_weight(self.brain_mask)
        if self.weight is not None and not 0.0 <= self.weight <= 1.0:
            raise ContractError(f"sample weight {self.weight} outside [0, 1]")

    @property
    def effective_weight(self) -> float:
        return 1.0 if self.weight is None else float(self.weight)


@dataclass(frozen=True)
class Entry:
    """One manifest line: where a slice lives and what it is labelled."""

    path: str
    axis: int
    index: int
    label: int | None = None
    mask_path: str | None = None
    brain_mask_path: str | None = None
    dataset_tag: str = ""

    @property
    def key(self) -> tuple[str, int, int]:
        return (self.path, self.axis, self.index)


@dataclass
class DatasetIndex:
    entries: list[Entry]
    class_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        seen = set()
        for e in self.entries:
            if e.key in seen:
                raise DataError(f"duplicate manifest entry {e.key}")
            seen.add(e.key)
            if e.label is not None and not 0 <= e.label < len(self.class_names):
                raise DataError(f"label {e.label} out of range for {len(self.class_names)} classes at {e.key}")

    def __len__(self) -> int:
        return len(self.entries)

    def subset(self, entries) -> "DatasetIndex":
        return DatasetIndex(list(entries), list(self.class_names))

    def labels(self) -> list[int | None]:
        return [e.label for e in self.entries]


def read_manifest(path: str | Path, class_names: list[str] | None = None) -> DatasetIndex:
    """Parse a JSONL manifest; relative paths resolve against its directory.

    Labels may be integers or class names. Without ``class_names``, string
    labels define the class list in sorted order.
    """
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from exc
    rows = []
    for n, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            rows.append(json.loads(line))
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}:{n}: invalid JSON ({exc})") from exc
    if class_names is None:
        names = sorted({r["label"] for r in rows if isinstance(r.get("label"), str)})
        ints = [r["label"] for r in rows if isinstance(r.get("label"), int)]
        if ints and not names:
            names = [str(i) for i in range(max(ints) + 1)]
        class_names = names
    lookup = {name: i for i, name in enumerate(class_names)}
    base = path.parent
    entries = []
    for n, r in enumerate(rows, 1):
        try:
            label = r.get("label")
            if isinstance(label, str):
                if label not in lookup:
                    raise DataError(f"{path}:{n}: unknown class {label!r}")
                label = lookup[label]
            entries.append(
                Entry(
                    path=str(_resolve(base, r["path"])),
                    axis=int(r["axis"]),
                    index=int(r["index"]),
                    label=label,
                    mask_path=_opt(base, r.get("mask_path")),
                    brain_mask_path=_opt(base, r.get("brain_mask_path")),
                    dataset_tag=str(r.get("dataset_tag", "")),
                )
            )
        except KeyError as exc:
            raise DataError(f"{path}:{n}: missing field {exc}") from exc
    return DatasetIndex(entries, list(class_names))


def write_manifest(index: DatasetIndex, path: str | Path) -> None:
    path = Path(path)
    base = path.parent.resolve()
    with path.open("w") as fh:
        for e in index.entries:
            label = e.label if e.label is None or not index.class_names else index.class_names[e.label]
            row = {"path": _rel(base, e.path), "axis": e.axis, "index": e.index, "label": label, "dataset_tag": e.dataset_tag}
            if e.mask_path:
                row["mask_path"] = _rel(base, e.mask_path)
            if e.brain_mask_path:
                row["brain_mask_path"] = _rel(base, e.brain_mask_path)
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def _resolve(base: Path, p: str) -> Path:
    p = Path(p)
    return p if p.is_absolute() else base / p


def _opt(base: Path, p):
    return None if p is None else str(_resolve(base, p))


def _rel(base: Path, p: str) -> str:
    try:
        return str(Path(p).resolve().relative_to(base))
    except ValueError:
        return str(p)


def few_shot_sample(index: DatasetIndex, n_per_class: int, rng: np.random.Generator) -> DatasetIndex:
    """Draw ``n_per_class`` entries per (class, dataset tag) without replacement.

    Strata are visited in sorted order and picks keep manifest order, so the
    result depends only on the seed and the index order.
    """
    if n_per_class < 1:
        raise ContractError(f"n_per_class must be >= 1, got {n_per_class}")
    strata: dict[tuple[int, str], list[int]] = defaultdict(list)
    for i, e in enumerate(index.entries):
        if e.label is None:
            raise DataError(f"unlabelled entry {e.key} cannot be class-sampled")
        strata[(e.label, e.dataset_tag)].append(i)
    picked: list[int] = []
    for key in sorted(strata):
        members = strata[key]
        if len(members) < n_per_class:
            label, tag = key
            name = index.class_names[label]
            raise DataError(
                f"class {name!r} (dataset {tag!r}) has {len(members)} entries, fewer than n_per_class={n_per_class}"
            )
        choice = np.sort(rng.choice(len(members), size=n_per_class, replace=False))
        picked.extend(members[j] for j in choice)
    picked.sort()
    return index.subset(index.entries[i] for i in picked)


class VolumeCache:
    """Loads each file once and keeps the isotropic version."""

    def __init__(self):
        self._store: dict[tuple[str, int], Volume] = {}

    def get(self, path: str, labels: bool = False) -> Volume:
        key = (path, int(labels))
        if key not in self._store:
            self._store[key] = resample_isotropic(load_volume(path), order=0 if labels else 1)
        return self._store[key]


def load_records(
    index: DatasetIndex,
    size: int = IMAGE_SIZE,
    per_volume: bool = False,
    cache: VolumeCache | None = None,
) -> list[SliceRecord]:
    """Materialize preprocessed slices for every manifest entry.

    Slice coordinates refer to the isotropically resampled volume.
    """
    cache = cache or VolumeCache()
    bounds_cache: dict[str, tuple[float, float]] = {}
    out = []
    for e in index.entries:
        vol = cache.get(e.path)
        if not 0 <= e.axis <= 2 or not 0 <= e.index < vol.dims[e.axis]:
            raise DataError(f"slice {e.key} out of range for volume dims {vol.dims}")
        bounds = None
        if per_volume:
            if e.path not in bounds_cache:
                bounds_cache[e.path] = clamp_bounds(vol.data)
            bounds = bounds_cache[e.path]
        image = preprocess_slice(take_slice(vol.data, e.axis, e.index), size, bounds)
        seg = brain = None
        if e.mask_path:
            seg = preprocess_mask(take_slice(cache.get(e.mask_path, labels=True).data, e.axis, e.index), size)
        if e.brain_mask_path:
            brain = preprocess_mask(take_slice(cache.get(e.brain_mask_path, labels=True).data, e.axis, e.index), size)
            brain = (brain > 0).astype(np.uint8)
        out.append(
            SliceRecord(
                image=image,
                source=(vol.subject_id, e.axis, e.index),
                label=e.label,
                seg_mask=seg,
                brain_mask=brain,
                dataset_tag=e.dataset_tag,
            )
        )
    return out


def with_image(record: SliceRecord, image, seg_mask=None, brain_mask=None) -> SliceRecord:
    weight = brain_coverage_weight(brain_mask) if brain_mask is not None else record.weight
    return replace(record, image=image, seg_mask=seg_mask, brain_mask=brain_mask, weight=weight)
