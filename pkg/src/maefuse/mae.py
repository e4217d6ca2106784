"""Masked-autoencoder model, masking, and brain-coverage-weighted pretraining."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .dataio.augment import AugmentPolicy, augment
from .dataio.records import SliceRecord, brain_coverage_weight
from .errors import ConfigError, ContractError, NonFiniteError
from .nnkit import functional as F
from .nnkit.layers import LayerNorm, Linear, Module, TransformerBlock, trunc_normal
from .nnkit.optim import AdamW
from .nnkit.tensor import Parameter, Tensor, concat, no_grad, take_along


@dataclass
class MaeConfig:
    image_size: int = 224
    patch_size: int = 16
    enc_dim: int = 768
    enc_layers: int = 12
    enc_heads: int = 12
    dec_dim: int = 512
    dec_layers: int = 8
    dec_heads: int = 16
    mask_ratio: float = 0.75
    mlp_ratio: float = 4.0
    norm_pix_loss: bool = False
    # "n" divides the weighted sum by the batch size; "weights" by sum(w).
    loss_normalization: str = "n"

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ConfigError(f"image_size {self.image_size} is not a multiple of patch_size {self.patch_size}")
        if self.enc_dim % self.enc_heads:
            raise ConfigError(f"enc_dim {self.enc_dim} is not divisible by enc_heads {self.enc_heads}")
        if self.dec_dim % self.dec_heads:
            raise ConfigError(f"dec_dim {self.dec_dim} is not divisible by dec_heads {self.dec_heads}")
        if not 0.0 < self.mask_ratio < 1.0:
            raise ConfigError(f"mask_ratio must lie in (0, 1), got {self.mask_ratio}")
        if self.loss_normalization not in ("n", "weights"):
            raise ConfigError(f"loss_normalization must be 'n' or 'weights', got {self.loss_normalization!r}")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid**2

    @property
    def patch_dim(self) -> int:
        return self.patch_size**2

    @classmethod
    def full(cls, **overrides) -> "MaeConfig":
        """ViT-Base encoder with the canonical lightweight decoder."""
        return cls(**overrides)

    @classmethod
    def desk(cls, **overrides) -> "MaeConfig":
        base = dict(image_size=64, patch_size=8, enc_dim=64, enc_layers=4, enc_heads=4, dec_dim=32, dec_layers=2, dec_heads=4)
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class MaskPlan:
    visible_idx: np.ndarray
    masked_idx: np.ndarray
    num_tokens: int = field(default=0)

    def __post_init__(self):
        self.visible_idx = np.asarray(self.visible_idx, dtype=np.intp)
        self.masked_idx = np.asarray(self.masked_idx, dtype=np.intp)
        if not self.num_tokens:
            self.num_tokens = self.visible_idx.size + self.masked_idx.size

    @property
    def is_full(self) -> bool:
        return self.masked_idx.size == 0

    def masked_indicator(self) -> np.ndarray:
        m = np.zeros(self.num_tokens, dtype=bool)
        m[self.masked_idx] = True
        return m


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def random_mask(num_tokens: int, mask_ratio: float, rng: np.random.Generator) -> MaskPlan:
    """Uniform random split keeping ``round(T * (1 - mask_ratio))`` tokens."""
    if not 0.0 < mask_ratio < 1.0:
        raise ContractError(f"mask_ratio must lie in (0, 1), got {mask_ratio}")
    keep = _round_half_up(num_tokens * (1.0 - mask_ratio))
    perm = rng.permutation(num_tokens)
    return MaskPlan(np.sort(perm[:keep]), np.sort(perm[keep:]), num_tokens)


def full_plan(num_tokens: int) -> MaskPlan:
    """Every token visible (used for probing and segmentation)."""
    return MaskPlan(np.arange(num_tokens), np.zeros(0, dtype=np.intp), num_tokens)


def patchify(images: np.ndarray, patch_size: int) -> np.ndarray:
    """(1, H, W) -> (T, p*p) or (N, 1, H, W) -> (N, T, p*p), row-major patches."""
    images = np.asarray(images)
    single = images.ndim == 3
    if single:
        images = images[None]
    if images.ndim != 4 or images.shape[1] != 1:
        raise ContractError(f"patchify expects (1,H,W) or (N,1,H,W), got {np.shape(images)}")
    n, _, h, w = images.shape
    p = patch_size
    if h != w or h % p:
        raise ContractError(f"image {h}x{w} is not square or not divisible by patch size {p}")
    g = h // p
    tokens = images.reshape(n, g, p, g, p).transpose(0, 1, 3, 2, 4).reshape(n, g * g, p * p)
    return tokens[0] if single else tokens


def unpatchify(tokens: np.ndarray, patch_size: int) -> np.ndarray:
    tokens = np.asarray(tokens)
    single = tokens.ndim == 2
    if single:
        tokens = tokens[None]
    n, t, _ = tokens.shape
    p = patch_size
    g = int(round(math.sqrt(t)))
    if g * g != t or tokens.shape[2] != p * p:
        raise ContractError(f"cannot unpatchify tokens of shape {tokens.shape} with patch size {p}")
    images = tokens.reshape(n, g, g, p, p).transpose(0, 1, 3, 2, 4).reshape(n, 1, g * p, g * p)
    return images[0] if single else images


class MaeModel(Module):
    def __init__(self, cfg: MaeConfig, rng: np.random.Generator):
        self.cfg = cfg
        t = cfg.num_patches
        self.patch_embed = Linear(cfg.patch_dim, cfg.enc_dim, rng)
        self.cls_token = Parameter(trunc_normal(rng, (1, 1, cfg.enc_dim)))
        self.pos_embed = Parameter(trunc_normal(rng, (1, 1 + t, cfg.enc_dim)))
        self.blocks = [TransformerBlock(cfg.enc_dim, cfg.enc_heads, cfg.mlp_ratio, rng) for _ in range(cfg.enc_layers)]
        self.norm = LayerNorm(cfg.enc_dim)
        self.decoder_embed = Linear(cfg.enc_dim, cfg.dec_dim, rng)
        self.mask_token = Parameter(trunc_normal(rng, (1, 1, cfg.dec_dim)))
        self.decoder_pos_embed = Parameter(trunc_normal(rng, (1, 1 + t, cfg.dec_dim)))
        self.decoder_blocks = [TransformerBlock(cfg.dec_dim, cfg.dec_heads, cfg.mlp_ratio, rng) for _ in range(cfg.dec_layers)]
        self.decoder_norm = LayerNorm(cfg.dec_dim)
        self.decoder_pred = Linear(cfg.dec_dim, cfg.patch_dim, rng)
        self.assign_names()

    def encoder_parameters(self) -> list[Parameter]:
        return [p for name, p in self.named_parameters() if not name.startswith("decoder") and name != "mask_token"]


def _stack_plans(plans: list[MaskPlan]) -> tuple[np.ndarray, np.ndarray]:
    vis = np.stack([p.visible_idx for p in plans])
    masked = np.stack([p.masked_idx for p in plans])
    return vis, masked


def _as_batch(images) -> np.ndarray:
    images = np.asarray(images, dtype=np.float32)
    if images.ndim == 2:
        images = images[None, None]
    elif images.ndim == 3:
        images = images[:, None] if images.shape[0] != 1 else images[None]
    return images


def encode(images, plans: list[MaskPlan] | None, model: MaeModel) -> list[Tensor]:
    """Run the encoder on visible patches; returns every block's output.

    Each element is (N, 1 + visible, enc_dim) with the CLS token first.
    ``plans=None`` keeps every patch visible.
    """
    cfg = model.cfg
    images = _as_batch(images)
    n = images.shape[0]
    if images.shape[2:] != (cfg.image_size, cfg.image_size):
        raise ContractError(f"image size {images.shape[2:]} does not match model size {cfg.image_size}")
    tokens = Tensor(patchify(images, cfg.patch_size).astype(model.pos_embed.dtype))
    x = model.patch_embed(tokens) + model.pos_embed[:, 1:, :]
    if plans is not None:
        if len(plans) != n:
            raise ContractError(f"{len(plans)} mask plans for {n} images")
        if any(p.num_tokens != cfg.num_patches for p in plans):
            raise ContractError(f"mask plans must cover T={cfg.num_patches} tokens")
        vis, _ = _stack_plans(plans)
        if vis.shape[1] != cfg.num_patches:
            x = take_along(x, vis, axis=1)
    cls = model.cls_token + model.pos_embed[:, :1, :]
    cls = cls + Tensor(np.zeros((n, 1, cfg.enc_dim), dtype=cls.dtype))
    x = concat([cls, x], axis=1)
    latents = []
    for block in model.blocks:
        x = block(x)
        latents.append(x)
    return latents


def assemble_tokens(visible: Tensor, mask_tokens: Tensor, plans: list[MaskPlan], masked_first: bool = False) -> Tensor:
    """Place visible and mask tokens at their patch positions.

    Tokens are concatenated in either order and then gathered by position,
    so the result does not depend on the concatenation order.
    """
    vis, masked = _stack_plans(plans)
    if masked_first:
        full = concat([mask_tokens, visible], axis=1)
        order = np.concatenate([masked, vis], axis=1)
    else:
        full = concat([visible, mask_tokens], axis=1)
        order = np.concatenate([vis, masked], axis=1)
    restore = np.argsort(order, axis=1, kind="stable")
    return take_along(full, restore, axis=1)


def decode(latent_last: Tensor, plans: list[MaskPlan], model: MaeModel, masked_first: bool = False) -> Tensor:
    """Predict pixels for all T patches, (N, T, p*p)."""
    cfg = model.cfg
    n = latent_last.shape[0]
    x = model.decoder_embed(model.norm(latent_last))
    cls = x[:, :1, :]
    visible = x[:, 1:, :]
    n_masked = plans[0].masked_idx.size
    zeros = Tensor(np.zeros((n, n_masked, cfg.dec_dim), dtype=x.dtype))
    mask_tokens = zeros + model.mask_token
    full = assemble_tokens(visible, mask_tokens, plans, masked_first=masked_first)
    x = concat([cls, full], axis=1) + model.decoder_pos_embed
    for block in model.decoder_blocks:
        x = block(x)
    x = model.decoder_pred(model.decoder_norm(x))
    return x[:, 1:, :]


def per_patch_target(target: np.ndarray, norm_pix: bool) -> np.ndarray:
    if not norm_pix:
        return target
    mu = target.mean(axis=-1, keepdims=True)
    var = target.var(axis=-1, keepdims=True)
    return (target - mu) / np.sqrt(var + 1e-6)


def weighted_recon_loss(pred: Tensor, target, plans: list[MaskPlan], weights, normalization: str = "n") -> Tensor:
    """Mean over samples of ``w_i * l_i``.

    ``l_i`` is the squared pixel error averaged over each patch and then
    over the masked patches of sample i. Visible patches contribute nothing.
    ``normalization="weights"`` divides by ``sum(w)`` instead of N.
    """
    target = np.asarray(target, dtype=pred.dtype)
    weights = np.asarray(weights, dtype=np.float64)
    n = pred.shape[0]
    if target.shape != pred.shape:
        raise ContractError(f"target shape {target.shape} != prediction shape {pred.shape}")
    if weights.shape != (n,):
        raise ContractError(f"need {n} weights, got shape {weights.shape}")
    if (weights < 0).any() or (weights > 1).any():
        raise ContractError("sample weights must lie in [0, 1]")
    counts = np.array([p.masked_idx.size for p in plans], dtype=np.float64)
    if (counts == 0).any():
        raise ContractError("a mask plan has no masked patches; the per-sample loss is undefined")
    indicator = np.stack([p.masked_indicator() for p in plans]).astype(pred.dtype)
    diff = pred - Tensor(target)
    per_patch = (diff * diff).mean(axis=-1)
    per_sample = (per_patch * Tensor(indicator)).sum(axis=1) * Tensor((1.0 / counts).astype(pred.dtype))
    total = (per_sample * Tensor(weights.astype(pred.dtype))).sum()
    if normalization == "weights":
        denom = weights.sum()
        if denom == 0:
            return total * 0.0
        return total * (1.0 / denom)
    return total * (1.0 / n)


def per_sample_losses(pred: np.ndarray, target: np.ndarray, plans: list[MaskPlan]) -> np.ndarray:
    """Unweighted masked MSE per sample (numpy; for reporting)."""
    out = []
    for i, p in enumerate(plans):
        d = pred[i, p.masked_idx] - target[i, p.masked_idx]
        out.append(float((d * d).mean()))
    return np.array(out)


class Pretrainer:
    """Owns the model, optimizer and RNG streams for a pretraining run."""

    def __init__(
        self,
        model: MaeModel,
        records: list[SliceRecord],
        lr: float = 1e-4,
        batch_size: int = 48,
        weight_decay: float = 0.01,
        data_rng: np.random.Generator | None = None,
        mask_rng: np.random.Generator | None = None,
        augment_rng: np.random.Generator | None = None,
        policy: AugmentPolicy | None = None,
        coverage_tau: float = 0.2,
        coverage_floor: float = 0.05,
    ):
        if not records:
            raise ContractError("pretraining needs at least one slice")
        self.model = model
        self.records = records
        self.batch_size = batch_size
        self.opt = AdamW(model.trainable_parameters(), lr=lr, weight_decay=weight_decay)
        self.data_rng = data_rng or np.random.default_rng(0)
        self.mask_rng = mask_rng or np.random.default_rng(1)
        self.augment_rng = augment_rng or np.random.default_rng(2)
        self.policy = policy
        self.coverage_tau = coverage_tau
        self.coverage_floor = coverage_floor
        self.step_count = 0

    def _weight(self, rec: SliceRecord) -> float:
        if rec.brain_mask is None:
            return rec.effective_weight
        return brain_coverage_weight(rec.brain_mask, self.coverage_tau, self.coverage_floor)

    def next_batch(self) -> list[SliceRecord]:
        n = len(self.records)
        idx = self.data_rng.choice(n, size=min(self.batch_size, n), replace=False)
        batch = [self.records[i] for i in np.sort(idx)]
        if self.policy is not None:
            batch = [augment(r, self.policy, self.augment_rng) for r in batch]
        return batch

    def step(self, batch: list[SliceRecord] | None = None) -> float:
        batch = self.next_batch() if batch is None else batch
        loss = pretrain_step(batch, self.model, self.opt, self.mask_rng, self._weight, step=self.step_count)
        self.step_count += 1
        return loss

    def run(self, steps: int) -> list[float]:
        return [self.step() for _ in range(steps)]


def pretrain_step(batch: list[SliceRecord], model: MaeModel, opt: AdamW, rng: np.random.Generator, weight_fn=None, step: int = 0) -> float:
    """One forward/backward/AdamW cycle on the weighted reconstruction loss."""
    if not batch:
        raise ContractError("pretrain_step needs a non-empty batch")
    cfg = model.cfg
    weight_fn = weight_fn or (lambda r: r.effective_weight)
    images = np.stack([r.image for r in batch])[:, None].astype(np.float32)
    weights = np.array([weight_fn(r) for r in batch])
    plans = [random_mask(cfg.num_patches, cfg.mask_ratio, rng) for _ in batch]
    target = per_patch_target(patchify(images, cfg.patch_size), cfg.norm_pix_loss)
    opt.zero_grad()
    try:
        latents = encode(images, plans, model)
        pred = decode(latents[-1], plans, model)
        loss = weighted_recon_loss(pred, target, plans, weights, cfg.loss_normalization)
        loss.backward()
        opt.step()
    except NonFiniteError as exc:
        ids = [r.source for r in batch]
        raise NonFiniteError(f"pretraining aborted at step {step}: {exc}; batch={ids}") from exc
    return float(loss.data)


def encode_frozen(images, model: MaeModel) -> list[np.ndarray]:
    """Unmasked encoder taps as plain arrays, without recording a graph."""
    with no_grad():
        return [t.data for t in encode(images, None, model)]
