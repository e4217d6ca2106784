"""Shared fixtures and the acceptance-criteria summary printed after the run."""

from __future__ import annotations

import contextlib
import time
from dataclasses import dataclass, field

import numpy as np
import pytest

from maefuse.dataio import load_records, read_manifest, synth
from maefuse.mae import MaeConfig, MaeModel
from maefuse.nnkit.rng import stream

ACCEPTANCE: dict[int, dict[str, "Outcome"]] = {}
TITLES: dict[int, str] = {}


@dataclass
class Outcome:
    passed: bool = False
    detail: str = ""
    seconds: float = 0.0
    notes: list[str] = field(default_factory=list)


def _line(criterion: int) -> str:
    parts = ACCEPTANCE[criterion]
    ok = all(o.passed for o in parts.values())
    details = "; ".join(f"{k + ': ' if k else ''}{o.detail}" for k, o in sorted(parts.items()))
    secs = sum(o.seconds for o in parts.values())
    return f"criterion {criterion:>2} {'PASS' if ok else 'FAIL'} [{secs:6.1f}s] {TITLES[criterion]} -- {details}"


@contextlib.contextmanager
def _record(criterion: int, title: str, part: str = ""):
    TITLES[criterion] = title
    outcome = Outcome()
    ACCEPTANCE.setdefault(criterion, {})[part] = outcome
    start = time.perf_counter()
    try:
        yield outcome
        outcome.passed = True
    except BaseException as exc:
        outcome.passed = False
        outcome.detail = (outcome.detail + " | " if outcome.detail else "") + f"{type(exc).__name__}: {exc}"
        raise
    finally:
        outcome.seconds = time.perf_counter() - start
        print(_line(criterion), flush=True)


@pytest.fixture
def acceptance():
    """``with acceptance(n, title, part) as out: ...`` records a pass/fail line."""
    return _record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for criterion in sorted(ACCEPTANCE):
        terminalreporter.write_line(_line(criterion))


@pytest.fixture(scope="session")
def desk_cfg() -> MaeConfig:
    return MaeConfig.desk()


@pytest.fixture
def desk_mae(desk_cfg) -> MaeModel:
    return MaeModel(desk_cfg, stream(0, "init"))


@pytest.fixture(scope="session")
def texture_dir(tmp_path_factory):
    """Three texture classes, 30 slices per class in each of train and test."""
    root = tmp_path_factory.mktemp("textures")
    train = synth.write_classification_set(root / "train", slices_per_class=30, subjects=2, seed=0)
    test = synth.write_classification_set(root / "test", slices_per_class=30, subjects=2, seed=1)
    return train, test


@pytest.fixture(scope="session")
def texture_records(texture_dir):
    train, test = texture_dir
    return load_records(read_manifest(train), size=64), load_records(read_manifest(test), size=64)


@pytest.fixture(scope="session")
def shape_dir(tmp_path_factory):
    """Ten binary disk/ellipse/ring slices in one volume."""
    root = tmp_path_factory.mktemp("shapes")
    return synth.write_segmentation_set(root, subjects=1, slices_per_subject=10, size=64, seed=0)


@pytest.fixture(scope="session")
def shape_records(shape_dir):
    return load_records(read_manifest(shape_dir), size=64)


def random_array(rng: np.random.Generator, *shape) -> np.ndarray:
    return rng.standard_normal(shape)
