"""Synthetic desk-scale datasets stored as raw volumes plus a JSONL manifest.

Classification sets are stacks of oriented textures, one volume per
(class, dataset tag, subject). Segmentation sets are stacks of
disk/ellipse/ring label maps with a matching intensity image.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .records import DatasetIndex, Entry, write_manifest
from .volume import Volume, write_raw

TEXTURES = ("hstripes", "vstripes", "checker", "rings", "blobs", "diagonal", "noise")


def texture_slice(kind: str, size: int, rng: np.random.Generator) -> np.ndarray:
    """One textured slice in a soft elliptical 'head' envelope."""
    yy, xx = np.mgrid[0:size, 0:size] / size
    freq = rng.uniform(4.0, 7.0)
    phase = rng.uniform(0, 2 * np.pi)
    if kind == "hstripes":
        tex = np.sin(2 * np.pi * freq * yy + phase)
    elif kind == "vstripes":
        tex = np.sin(2 * np.pi * freq * xx + phase)
    elif kind == "checker":
        tex = np.sin(2 * np.pi * freq * xx + phase) * np.sin(2 * np.pi * freq * yy + phase)
    elif kind == "rings":
        r = np.hypot(xx - 0.5, yy - 0.5)
        tex = np.sin(2 * np.pi * freq * 1.5 * r + phase)
    elif kind == "diagonal":
        tex = np.sin(2 * np.pi * freq * (xx + yy) / np.sqrt(2) + phase)
    elif kind == "blobs":
        tex = np.zeros((size, size))
        for _ in range(6):
            cy, cx = rng.uniform(0.2, 0.8, 2)
            tex += np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / 0.004)
        tex = 2 * tex / max(tex.max(), 1e-6) - 1
    elif kind == "noise":
        tex = rng.standard_normal((size, size))
        tex = np.clip(tex / 3, -1, 1)
    else:
        raise ValueError(f"unknown texture {kind!r}")
    ry, rx = rng.uniform(0.35, 0.45, 2)
    envelope = (((yy - 0.5) / ry) ** 2 + ((xx - 0.5) / rx) ** 2) < 1.0
    img = envelope * (0.55 + 0.4 * tex) + 0.03 * rng.standard_normal((size, size))
    return np.clip(img, 0.0, 1.0)


def shape_slice(size: int, rng: np.random.Generator, num_classes: int = 2) -> tuple[np.ndarray, np.ndarray]:
    """Intensity image and label map of a random disk, ellipse or ring.

    With ``num_classes == 2`` the foreground is a filled ellipse or disk,
    or a ring. With ``num_classes >= 3`` class 1 is an inner ellipse and
    class 2 the ring enclosing it.
    """
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    cy, cx = rng.uniform(0.38, 0.62, 2) * size
    a, b = rng.uniform(0.16, 0.3, 2) * size
    theta = rng.uniform(0, np.pi)
    dy, dx = yy - cy, xx - cx
    u = (dx * np.cos(theta) + dy * np.sin(theta)) / a
    v = (-dx * np.sin(theta) + dy * np.cos(theta)) / b
    r = np.sqrt(u * u + v * v)
    labels = np.zeros((size, size), dtype=np.int64)
    if num_classes >= 3:
        labels[r < 1.35] = 2
        labels[r < 0.9] = 1
    else:
        kind = rng.integers(3)
        if kind == 2:
            labels[(r > 0.6) & (r < 1.0)] = 1
        else:
            labels[r < 1.0] = 1
    levels = np.array([0.08, 0.75, 0.45, 0.95])[: max(num_classes, 2)]
    image = levels[labels] + 0.04 * rng.standard_normal((size, size))
    return np.clip(image, 0.0, 1.0), labels


def write_classification_set(
    outdir: str | Path,
    classes=("hstripes", "vstripes", "checker"),
    tags=("synthA",),
    slices_per_class: int = 30,
    subjects: int = 2,
    size: int = 64,
    seed: int = 0,
    manifest_name: str = "manifest.jsonl",
) -> Path:
    """Texture volumes for every (class, tag); returns the manifest path."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(11,)))
    entries = []
    per_subject = -(-slices_per_class // subjects)
    for ci, kind in enumerate(classes):
        for tag in tags:
            made = 0
            for s in range(subjects):
                depth = min(per_subject, slices_per_class - made)
                if depth <= 0:
                    break
                stack = np.stack([texture_slice(kind, size, rng) for _ in range(depth)], axis=2)
                sid = f"{tag}-{kind}-{s:02d}"
                sidecar = write_raw(Volume(stack.astype(np.float32), subject_id=sid), outdir / sid)
                entries.extend(Entry(str(sidecar), 2, z, ci, dataset_tag=tag) for z in range(depth))
                made += depth
    manifest = outdir / manifest_name
    write_manifest(DatasetIndex(entries, list(classes)), manifest)
    return manifest


def write_segmentation_set(
    outdir: str | Path,
    subjects: int = 2,
    slices_per_subject: int = 10,
    size: int = 64,
    num_classes: int = 2,
    seed: int = 0,
    tag: str = "synthseg",
    manifest_name: str = "manifest.jsonl",
    brain_masks: bool = True,
) -> Path:
    """Shape volumes with label volumes (and optional brain masks)."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(12,)))
    entries = []
    for s in range(subjects):
        pairs = [shape_slice(size, rng, num_classes) for _ in range(slices_per_subject)]
        img = np.stack([p[0] for p in pairs], axis=2).astype(np.float32)
        lab = np.stack([p[1] for p in pairs], axis=2).astype(np.float32)
        sid = f"{tag}-{s:02d}"
        img_path = write_raw(Volume(img, subject_id=sid), outdir / sid)
        lab_path = write_raw(Volume(lab, subject_id=sid), outdir / f"{sid}_labels")
        brain_path = None
        if brain_masks:
            brain_path = write_raw(Volume((lab > 0).astype(np.float32), subject_id=sid), outdir / f"{sid}_brain")
        for z in range(slices_per_subject):
            entries.append(
                Entry(
                    str(img_path),
                    2,
                    z,
                    None,
                    mask_path=str(lab_path),
                    brain_mask_path=None if brain_path is None else str(brain_path),
                    dataset_tag=tag,
                )
            )
    manifest = outdir / manifest_name
    write_manifest(DatasetIndex(entries, []), manifest)
    return manifest
