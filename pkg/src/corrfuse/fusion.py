"""Ensembling of multi-layer diffusion features and fusion with ViT tokens.

The two halves of the pipeline's descriptor:

* ``ensemble_sd`` reduces each decoder layer of an image pair with a joint
  source+target PCA, resamples every reduced layer to one working grid, and
  concatenates them channel-wise. The per-layer dimension budget splits the
  total proportionally to the raw channel counts (rounded, remainder to the
  first layer), so wide layers keep more capacity.
* ``fuse`` aligns the ensembled map with the ViT token map by normalizing
  each token of both independently to unit norm, scaling the two blocks by
  ``alpha`` and ``1 - alpha``, and concatenating. For tokens with both
  blocks nonzero the fused norm is exactly sqrt(alpha^2 + (1-alpha)^2).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .featmap import FeatureMap, ValidationError, bilinear_resize, normalize_tokens
from .pca import fit_pair_pca

DEFAULT_ALPHA = 0.5
DEFAULT_PCA_DIM = 256
DEFAULT_TARGET = 60


@dataclass(frozen=True)
class FusionConfig:
    alpha: float = DEFAULT_ALPHA
    pca_dim: int = DEFAULT_PCA_DIM
    target_h: int = DEFAULT_TARGET
    target_w: int = DEFAULT_TARGET
    sd_layers: tuple[str, ...] = ("2", "5", "8")
    method: str = "exact"
    oversample: int = 10
    power_iters: int = 2
    seed: int | None = None

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValidationError(f"alpha must be in [0, 1], got {self.alpha}")
        if self.pca_dim < 1:
            raise ValidationError(f"pca_dim must be >= 1, got {self.pca_dim}")
        if self.target_h < 1 or self.target_w < 1:
            raise ValidationError(
                f"target dims must be >= 1, got {self.target_h}x{self.target_w}"
            )
        if self.method not in ("exact", "randomized"):
            raise ValidationError(f"unknown PCA method {self.method!r}")


def split_budget(total: int, channel_counts: list[int]) -> list[int]:
    """Split ``total`` output channels across layers proportionally to their
    raw channel counts; rounding remainder (of either sign) goes to the
    first layer."""
    if total < len(channel_counts):
        raise ValidationError(
            f"pca_dim={total} smaller than the number of layers ({len(channel_counts)})"
        )
    weight = sum(channel_counts)
    budgets = [int(round(total * c / weight)) for c in channel_counts]
    budgets[0] += total - sum(budgets)
    for b, c in zip(budgets, channel_counts):
        if b < 1:
            raise ValidationError(f"layer budget {b} from split of {total} is not >= 1")
        if b > c:
            raise ValidationError(
                f"layer budget {b} exceeds the layer's channel count {c}"
            )
    return budgets


def ensemble_sd(
    src_layers: list[FeatureMap],
    tgt_layers: list[FeatureMap],
    cfg: FusionConfig,
) -> tuple[FeatureMap, FeatureMap]:
    """Joint-pair PCA per layer, resize to the working grid, concatenate.

    Output channel count equals ``cfg.pca_dim`` exactly for both maps.
    """
    if len(src_layers) != len(tgt_layers) or not src_layers:
        raise ValidationError("src and tgt need the same nonzero number of layers")
    for i, (s, t) in enumerate(zip(src_layers, tgt_layers)):
        if s.channels != t.channels:
            raise ValidationError(
                f"layer {i}: channel mismatch ({s.channels} vs {t.channels})"
            )
    budgets = split_budget(cfg.pca_dim, [m.channels for m in src_layers])

    src_parts, tgt_parts = [], []
    for i, (s, t, k) in enumerate(zip(src_layers, tgt_layers, budgets)):
        seed = None if cfg.seed is None else cfg.seed + i
        ps, pt, _ = fit_pair_pca(
            s,
            t,
            k,
            method=cfg.method,
            oversample=cfg.oversample,
            power_iters=cfg.power_iters,
            seed=seed,
        )
        src_parts.append(bilinear_resize(ps, cfg.target_h, cfg.target_w).data)
        tgt_parts.append(bilinear_resize(pt, cfg.target_h, cfg.target_w).data)

    src_out = np.concatenate(src_parts, axis=-1)
    tgt_out = np.concatenate(tgt_parts, axis=-1)
    return (
        src_layers[0].with_data(src_out),
        tgt_layers[0].with_data(tgt_out),
    )


def fuse(sd: FeatureMap, dino: FeatureMap, alpha: float = DEFAULT_ALPHA) -> FeatureMap:
    """Concatenate the two descriptors after independent per-token
    normalization, weighted ``alpha`` / ``1 - alpha``.

    All-zero tokens contribute an all-zero block. Spatial dims must match.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValidationError(f"alpha must be in [0, 1], got {alpha}")
    if (sd.height, sd.width) != (dino.height, dino.width):
        raise ValidationError(
            f"spatial dims differ: {sd.height}x{sd.width} vs {dino.height}x{dino.width}"
        )
    first = alpha * normalize_tokens(sd.data)
    second = (1.0 - alpha) * normalize_tokens(dino.data)
    fused = np.concatenate([first, second], axis=-1).astype(np.float32)
    return sd.with_data(fused)


def fuse_pair(
    src_sd_layers: list[FeatureMap],
    tgt_sd_layers: list[FeatureMap],
    src_dino: FeatureMap,
    tgt_dino: FeatureMap,
    cfg: FusionConfig,
) -> tuple[FeatureMap, FeatureMap]:
    """Full per-pair descriptor: ensembled diffusion block fused with the
    ViT block, both on the configured working grid."""
    if src_dino.channels != tgt_dino.channels:
        raise ValidationError(
            f"dino channel mismatch: {src_dino.channels} vs {tgt_dino.channels}"
        )
    src_sd, tgt_sd = ensemble_sd(src_sd_layers, tgt_sd_layers, cfg)
    src_dino = bilinear_resize(src_dino, cfg.target_h, cfg.target_w)
    tgt_dino = bilinear_resize(tgt_dino, cfg.target_h, cfg.target_w)
    return fuse(src_sd, src_dino, cfg.alpha), fuse(tgt_sd, tgt_dino, cfg.alpha)
