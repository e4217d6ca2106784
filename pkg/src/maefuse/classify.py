"""Linear probing on the frozen encoder's CLS embedding."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .dataio.augment import AugmentPolicy, augment
from .dataio.records import DatasetIndex, SliceRecord, load_records
from .errors import ConfigError, ContractError, DataError, NonFiniteError
from .mae import MaeModel, encode_frozen
from .nnkit import functional as F
from .nnkit.layers import Module, trunc_normal, zeros
from .nnkit.optim import AdamW
from .nnkit.tensor import Parameter, Tensor, no_grad

SEQUENCE_CLASSES = ["T1", "T2", "FLAIR", "PD", "T2*", "SWI", "DTI/DWI"]


class LinearHead(Module):
    def __init__(self, dim: int, class_names: list[str], rng: np.random.Generator):
        self.class_names = list(class_names)
        c = len(self.class_names)
        self.weight = Parameter(trunc_normal(rng, (c, dim)))
        self.bias = Parameter(zeros(c))
        self.assign_names("head.")

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def forward(self, features) -> Tensor:
        return F.linear(Tensor(features) if not isinstance(features, Tensor) else features, self.weight, self.bias)


def head_param_count(num_classes: int, dim: int) -> int:
    return num_classes * dim + num_classes


@dataclass
class ProbeConfig:
    lr: float = 1e-4
    batch_size: int = 48
    steps: int = 500
    seed: int = 0
    n_per_class: int = 30
    weight_decay: float = 0.01
    augment: bool = True

    def __post_init__(self):
        for name in ("lr", "batch_size", "steps", "n_per_class"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"ProbeConfig.{name} must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


def _require_frozen(mae: MaeModel) -> None:
    live = [p.name for p in mae.encoder_parameters() if not p.frozen]
    if live:
        raise ContractError(f"encoder must be frozen before probing; trainable: {live[:3]}...")


def cls_features(images, mae: MaeModel) -> np.ndarray:
    """Layer-E CLS embedding (after the encoder's final norm), all patches visible."""
    _require_frozen(mae)
    latents = encode_frozen(images, mae)
    with no_grad():
        normed = mae.norm(Tensor(latents[-1]))
    return normed.data[:, 0, :].copy()


def cross_entropy(logits, y) -> Tensor:
    """``-z_y + logsumexp(z)`` for one logit vector or a batch of rows."""
    logits = logits if isinstance(logits, Tensor) else Tensor(np.asarray(logits, dtype=np.float64))
    if logits.ndim == 1:
        logits = logits.reshape(1, -1)
        y = [y]
    return F.cross_entropy(logits, np.asarray(y))


def predict(logits: np.ndarray) -> np.ndarray:
    """Argmax with ties resolved to the lowest class index."""
    return np.argmax(np.asarray(logits), axis=-1)


def _check_labels(labels: np.ndarray, num_classes: int) -> None:
    if labels.size == 0:
        raise DataError("probe training set is empty")
    if labels.min() < 0 or labels.max() >= num_classes:
        raise DataError("probe labels out of range")
    if np.unique(labels).size < 2:
        raise DataError("probe training needs at least two classes")


def fit_head(
    features: np.ndarray,
    labels,
    class_names: list[str],
    cfg: ProbeConfig,
    init_rng: np.random.Generator | None = None,
    data_rng: np.random.Generator | None = None,
) -> tuple[LinearHead, list[float]]:
    """Train a linear head on precomputed features; returns head and loss curve."""
    features = np.asarray(features, dtype=np.float32)
    labels = np.asarray(labels, dtype=np.intp)
    _check_labels(labels, len(class_names))
    init_rng = init_rng or np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(1,)))
    data_rng = data_rng or np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(2,)))
    head = LinearHead(features.shape[1], class_names, init_rng)
    opt = AdamW(head.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    n = len(labels)
    losses = []
    for step in range(cfg.steps):
        idx = np.sort(data_rng.choice(n, size=min(cfg.batch_size, n), replace=False))
        losses.append(_head_step(head, opt, features[idx], labels[idx], step))
    return head, losses


def _head_step(head: LinearHead, opt: AdamW, feats: np.ndarray, labels: np.ndarray, step: int) -> float:
    opt.zero_grad()
    try:
        loss = F.cross_entropy(head(feats), labels)
        loss.backward()
        opt.step()
    except NonFiniteError as exc:
        raise NonFiniteError(f"probe training aborted at step {step}: {exc}") from exc
    return float(loss.data)


def _records(data, mae: MaeModel) -> list[SliceRecord]:
    if isinstance(data, DatasetIndex):
        return load_records(data, size=mae.cfg.image_size)
    return list(data)


def train_linear_probe(
    train,
    mae: MaeModel,
    cfg: ProbeConfig,
    class_names: list[str] | None = None,
    policy: AugmentPolicy | None = None,
    rngs: dict | None = None,
) -> tuple[LinearHead, list[float]]:
    """Fit a head on CLS features of a frozen encoder.

    ``train`` is a ``DatasetIndex`` or a list of labelled ``SliceRecord``.
    With ``cfg.augment`` every step re-extracts features from freshly
    augmented slices; otherwise features are computed once.
    """
    _require_frozen(mae)
    if class_names is None:
        if not isinstance(train, DatasetIndex):
            raise ContractError("class_names are required when training from records")
        class_names = train.class_names
    records = _records(train, mae)
    if any(r.label is None for r in records):
        raise DataError("every probe training slice needs a label")
    labels = np.array([r.label for r in records], dtype=np.intp)
    _check_labels(labels, len(class_names))
    rngs = rngs or {}
    init_rng = rngs.get("init") or np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(1,)))
    data_rng = rngs.get("data") or np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(2,)))
    aug_rng = rngs.get("augment") or np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(3,)))

    if not cfg.augment:
        feats = cls_features(np.stack([r.image for r in records]), mae)
        return fit_head(feats, labels, class_names, cfg, init_rng, data_rng)

    policy = policy or AugmentPolicy()
    head = LinearHead(mae.cfg.enc_dim, class_names, init_rng)
    opt = AdamW(head.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    n = len(records)
    losses = []
    for step in range(cfg.steps):
        idx = np.sort(data_rng.choice(n, size=min(cfg.batch_size, n), replace=False))
        batch = [augment(records[i], policy, aug_rng) for i in idx]
        feats = cls_features(np.stack([r.image for r in batch]), mae)
        losses.append(_head_step(head, opt, feats, labels[idx], step))
    return head, losses


@dataclass
class AccuracyReport:
    class_names: list[str]
    per_class: list[float | None]  # None: class absent from the test set
    counts: list[int]
    overall: float

    @property
    def macro(self) -> float:
        vals = [a for a in self.per_class if a is not None]
        return float(np.mean(vals)) if vals else float("nan")


def accuracy_from_predictions(pred, truth, class_names: list[str]) -> AccuracyReport:
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if truth.size == 0:
        raise DataError("evaluation set is empty")
    per_class, counts = [], []
    for c in range(len(class_names)):
        sel = truth == c
        counts.append(int(sel.sum()))
        per_class.append(float((pred[sel] == c).mean()) if sel.any() else None)
    return AccuracyReport(list(class_names), per_class, counts, float((pred == truth).mean()))


def evaluate_accuracy(test, mae: MaeModel, head: LinearHead) -> AccuracyReport:
    """Per-class and overall (micro) accuracy without augmentation."""
    records = _records(test, mae)
    if not records:
        raise DataError("evaluation set is empty")
    truth = np.array([r.label for r in records], dtype=np.intp)
    feats = cls_features(np.stack([r.image for r in records]), mae)
    with no_grad():
        logits = head(feats).data
    return accuracy_from_predictions(predict(logits), truth, head.class_names)
