"""MAE-FUnet: a U-Net whose bottleneck and decoder stages fuse frozen MAE tokens."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from ..dataio.augment import AugmentPolicy, augment
from ..dataio.records import SliceRecord
from ..errors import ConfigError, ContractError, NonFiniteError
from ..mae import MaeModel, encode_frozen
from ..nnkit import functional as F
from ..nnkit.layers import Conv2d, GroupNorm, Module, MultiHeadAttention
from ..nnkit.optim import AdamW
from ..nnkit.tensor import Tensor, concat, no_grad
from .losses import FOCAL_ALPHA, FOCAL_GAMMA, LossWeights, hybrid_loss

STRATEGIES = ("concat", "add", "attention")


@dataclass
class FunetConfig:
    base_width: int = 64
    depth: int = 4
    fusion_layers: list[int] = field(default_factory=lambda: [1, 3, 6, 9, 12])
    fusion_strategy: str = "concat"
    num_classes: int = 2
    groups: int = 8
    loss_weights: tuple[float, float, float] = (1.0, 1.0, 1.0)
    focal_gamma: float = FOCAL_GAMMA
    focal_alpha: float = FOCAL_ALPHA

    def __post_init__(self):
        self.fusion_layers = [int(i) for i in self.fusion_layers]
        self.loss_weights = tuple(float(w) for w in self.loss_weights)
        if self.fusion_strategy not in STRATEGIES:
            raise ConfigError(f"fusion_strategy must be one of {STRATEGIES}, got {self.fusion_strategy!r}")
        if len(self.fusion_layers) != self.depth + 1:
            raise ConfigError(f"need depth+1={self.depth + 1} fusion layers, got {self.fusion_layers}")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2 (class 0 is background)")
        if self.base_width % self.groups:
            raise ConfigError(f"base_width {self.base_width} must be a multiple of groups {self.groups}")

    @classmethod
    def desk(cls, **overrides) -> "FunetConfig":
        base = dict(base_width=8, depth=3, fusion_layers=[1, 2, 3, 4])
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        return asdict(self)


def mae_token_grid(latent, grid: int | None = None) -> np.ndarray:
    """Drop CLS and lay the patch tokens out row-major as (N, D, g, g).

    Position (r, c) holds token ``g*r + c``.
    """
    latent = latent.data if isinstance(latent, Tensor) else np.asarray(latent)
    n, t, d = latent.shape
    g = int(round(np.sqrt(t - 1))) if grid is None else grid
    if g * g != t - 1:
        raise ContractError(f"expected 1+g^2 tokens from an unmasked encoding, got {t}")
    return np.ascontiguousarray(latent[:, 1:, :].reshape(n, g, g, d).transpose(0, 3, 1, 2))


class FusionBlock(Module):
    """Merge a projected MAE token grid into a CNN feature map of width ``channels``."""

    def __init__(self, strategy: str, channels: int, emb_dim: int, rng: np.random.Generator):
        if strategy not in STRATEGIES:
            raise ConfigError(f"unknown fusion strategy {strategy!r}")
        self.strategy = strategy
        self.channels = channels
        if strategy in ("concat", "add"):
            self.proj = Conv2d(emb_dim, channels, 1, rng)
        if strategy == "concat":
            self.post = Conv2d(2 * channels, channels, 3, rng)
        if strategy == "attention":
            self.attn = MultiHeadAttention(channels, 1, rng, kv_dim=emb_dim, out_dim=channels)

    def forward(self, cnn: Tensor, grid: Tensor) -> Tensor:
        n, c, h, w = cnn.shape
        if self.strategy == "attention":
            queries = cnn.reshape(n, c, h * w).transpose(0, 2, 1)
            d = grid.shape[1]
            kv = grid.reshape(n, d, -1).transpose(0, 2, 1)
            out = self.attn(queries, kv).transpose(0, 2, 1).reshape(n, c, h, w)
            fused = cnn + out
        else:
            emb = F.resize_bilinear(self.proj(grid), h, w)
            if emb.shape != cnn.shape:
                raise AssertionError(f"fusion projection shape {emb.shape} != CNN shape {cnn.shape}")
            fused = self.post(concat([cnn, emb], axis=1)) if self.strategy == "concat" else cnn + emb
        if fused.shape != cnn.shape:
            raise AssertionError(f"fused shape {fused.shape} != CNN shape {cnn.shape}")
        return fused


def fuse(cnn_feat: Tensor, grid, block: FusionBlock) -> Tensor:
    grid = grid if isinstance(grid, Tensor) else Tensor(np.asarray(grid, dtype=cnn_feat.dtype))
    return block(cnn_feat, grid)


class DoubleConv(Module):
    def __init__(self, in_ch: int, out_ch: int, groups: int, rng: np.random.Generator):
        self.conv1 = Conv2d(in_ch, out_ch, 3, rng)
        self.norm1 = GroupNorm(out_ch, groups)
        self.conv2 = Conv2d(out_ch, out_ch, 3, rng)
        self.norm2 = GroupNorm(out_ch, groups)

    def forward(self, x: Tensor) -> Tensor:
        x = F.relu(self.norm1(self.conv1(x)))
        return F.relu(self.norm2(self.conv2(x)))


class FunetModel(Module):
    """U-Net backbone with a fusion block at the bottleneck and after each decoder stage."""

    def __init__(self, cfg: FunetConfig, emb_dim: int, enc_layers: int, rng: np.random.Generator):
        if any(not 1 <= i <= enc_layers for i in cfg.fusion_layers):
            raise ConfigError(f"fusion layers {cfg.fusion_layers} must lie in [1, {enc_layers}]")
        self.cfg = cfg
        b, d, g = cfg.base_width, cfg.depth, cfg.groups
        widths = [b * 2**i for i in range(d)]
        self.down = []
        in_ch = 1
        for wdt in widths:
            self.down.append(DoubleConv(in_ch, wdt, g, rng))
            in_ch = wdt
        self.bottleneck = DoubleConv(widths[-1], b * 2**d, g, rng)
        self.fuse_bottleneck = FusionBlock(cfg.fusion_strategy, b * 2**d, emb_dim, rng)
        self.up = []
        self.fuse_up = []
        prev = b * 2**d
        for level in reversed(range(d)):
            self.up.append(DoubleConv(prev + widths[level], widths[level], g, rng))
            self.fuse_up.append(FusionBlock(cfg.fusion_strategy, widths[level], emb_dim, rng))
            prev = widths[level]
        self.head = Conv2d(b, cfg.num_classes, 1, rng)
        self.assign_names("funet.")

    def forward(self, images, grids: dict[int, np.ndarray], return_stages: bool = False):
        """``grids`` maps encoder layer index -> (N, D, g, g) token grid."""
        x = images if isinstance(images, Tensor) else Tensor(np.asarray(images, dtype=self.head.weight.dtype))
        skips = []
        for block in self.down:
            x = block(x)
            skips.append(x)
            x = F.max_pool2d(x)
        x = self.bottleneck(x)
        layers = sorted(self.cfg.fusion_layers)
        x = fuse(x, grids[layers[-1]], self.fuse_bottleneck)
        stages = [x.shape]
        for j, (block, fblock) in enumerate(zip(self.up, self.fuse_up)):
            skip = skips[-1 - j]
            x = F.upsample_bilinear2x(x)
            x = block(concat([x, skip], axis=1))
            x = fuse(x, grids[layers[-2 - j]], fblock)
            stages.append(x.shape)
        logits = self.head(x)
        return (logits, stages) if return_stages else logits


class MaeDirect(Module):
    """Conv head on the last encoder layer's token grid (ablation baseline)."""

    def __init__(self, emb_dim: int, width: int, num_classes: int, image_size: int, rng: np.random.Generator):
        self.conv1 = Conv2d(emb_dim, width, 3, rng)
        self.conv2 = Conv2d(width, width, 3, rng)
        self.conv3 = Conv2d(width, num_classes, 3, rng)
        self.image_size = image_size
        self.assign_names("direct.")

    def forward(self, grid) -> Tensor:
        x = grid if isinstance(grid, Tensor) else Tensor(np.asarray(grid, dtype=self.conv1.weight.dtype))
        x = F.upsample_bilinear2x(F.relu(self.conv1(x)))
        x = F.upsample_bilinear2x(F.relu(self.conv2(x)))
        x = self.conv3(x)
        return F.resize_bilinear(x, self.image_size, self.image_size)


def mae_grids(images, mae: MaeModel, layers) -> dict[int, np.ndarray]:
    """Unmasked frozen-encoder token grids for the requested 1-based layers."""
    live = [p.name for p in mae.encoder_parameters() if not p.frozen]
    if live:
        raise ContractError("the MAE encoder must be frozen for segmentation")
    latents = encode_frozen(images, mae)
    return {i: mae_token_grid(latents[i - 1], mae.cfg.grid) for i in sorted(set(layers))}


def funet_forward(images, mae: MaeModel, model: FunetModel) -> Tensor:
    images = _batch(images)
    return model(images, mae_grids(images, mae, model.cfg.fusion_layers))


def mae_direct_forward(images, mae: MaeModel, head: MaeDirect) -> Tensor:
    images = _batch(images)
    return head(mae_grids(images, mae, [mae.cfg.enc_layers])[mae.cfg.enc_layers])


def _batch(images) -> np.ndarray:
    images = np.asarray(images, dtype=np.float32)
    if images.ndim == 2:
        return images[None, None]
    if images.ndim == 3:
        return images[:, None]
    return images


class SegTrainer:
    """Trains a FUnet or MAE-direct model against a frozen MAE."""

    def __init__(
        self,
        model: FunetModel | MaeDirect,
        mae: MaeModel,
        records: list[SliceRecord],
        lr: float = 1e-4,
        batch_size: int = 48,
        weight_decay: float = 0.01,
        loss_weights: LossWeights = LossWeights(),
        gamma: float = FOCAL_GAMMA,
        alpha: float = FOCAL_ALPHA,
        data_rng: np.random.Generator | None = None,
        augment_rng: np.random.Generator | None = None,
        policy: AugmentPolicy | None = None,
    ):
        if not records:
            raise ContractError("segmentation training needs at least one slice")
        if any(r.seg_mask is None for r in records):
            raise ContractError("every segmentation training slice needs a seg_mask")
        self.model = model
        self.mae = mae
        self.records = records
        self.batch_size = batch_size
        self.opt = AdamW(model.trainable_parameters(), lr=lr, weight_decay=weight_decay)
        self.loss_weights = loss_weights
        self.gamma = gamma
        self.alpha = alpha
        self.data_rng = data_rng or np.random.default_rng(0)
        self.augment_rng = augment_rng or np.random.default_rng(1)
        self.policy = policy
        self.step_count = 0
        self._grid_cache: dict[int, dict[int, np.ndarray]] = {}

    def _layers(self) -> list[int]:
        if isinstance(self.model, FunetModel):
            return self.model.cfg.fusion_layers
        return [self.mae.cfg.enc_layers]

    def _grids(self, idx: np.ndarray, batch: list[SliceRecord]) -> dict[int, np.ndarray]:
        # Frozen encoder outputs only change when the input is augmented.
        if self.policy is not None:
            return mae_grids(np.stack([r.image for r in batch])[:, None], self.mae, self._layers())
        missing = [i for i in idx if i not in self._grid_cache]
        if missing:
            imgs = np.stack([self.records[i].image for i in missing])[:, None]
            g = mae_grids(imgs, self.mae, self._layers())
            for k, i in enumerate(missing):
                self._grid_cache[i] = {layer: arr[k] for layer, arr in g.items()}
        return {layer: np.stack([self._grid_cache[i][layer] for i in idx]) for layer in self._layers()}

    def forward(self, images: np.ndarray, grids: dict[int, np.ndarray]) -> Tensor:
        if isinstance(self.model, FunetModel):
            return self.model(images, grids)
        return self.model(grids[self.mae.cfg.enc_layers])

    def step(self) -> dict[str, float]:
        n = len(self.records)
        idx = np.sort(self.data_rng.choice(n, size=min(self.batch_size, n), replace=False))
        batch = [self.records[i] for i in idx]
        if self.policy is not None:
            batch = [augment(r, self.policy, self.augment_rng) for r in batch]
        parts = seg_train_step(batch, self, self._grids(idx, batch))
        self.step_count += 1
        return parts

    def run(self, steps: int) -> list[dict[str, float]]:
        return [self.step() for _ in range(steps)]

    def predict(self, images: np.ndarray, batch_size: int = 16) -> np.ndarray:
        images = _batch(images)
        out = []
        with no_grad():
            for s in range(0, len(images), batch_size):
                chunk = images[s : s + batch_size]
                grids = mae_grids(chunk, self.mae, self._layers())
                out.append(np.argmax(self.forward(chunk, grids).data, axis=1))
        return np.concatenate(out)


def seg_train_step(batch: list[SliceRecord], trainer: SegTrainer, grids: dict[int, np.ndarray]) -> dict[str, float]:
    """Forward, hybrid loss, backward and AdamW on the trainable subset."""
    images = np.stack([r.image for r in batch])[:, None].astype(np.float32)
    target = np.stack([r.seg_mask for r in batch])
    trainer.opt.zero_grad()
    try:
        logits = trainer.forward(images, grids)
        total, parts = hybrid_loss(logits, target, trainer.loss_weights, trainer.gamma, trainer.alpha)
        total.backward()
        trainer.opt.step()
    except NonFiniteError as exc:
        ids = [r.source for r in batch]
        raise NonFiniteError(f"segmentation training aborted at step {trainer.step_count}: {exc}; batch={ids}") from exc
    parts["total"] = float(total.data)
    return parts
