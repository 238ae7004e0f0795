"""Backend registry."""

from __future__ import annotations

from ..config import ExtractConfig
from .base import BackendUnavailable, DiffusionBackbone, LayerFeatures, TokenBackbone

BACKENDS = ("procedural", "torch")


def diffusion_backbone(cfg: ExtractConfig) -> DiffusionBackbone:
    if cfg.backend == "procedural":
        from .procedural import ProceduralDiffusion

        return ProceduralDiffusion()
    if cfg.backend == "torch":
        from .torch_sd import TorchDiffusion

        return TorchDiffusion(cfg.weights_dir, cfg.device)
    raise BackendUnavailable(f"unknown backend {cfg.backend!r} (known: {BACKENDS})")


def token_backbone(cfg: ExtractConfig) -> TokenBackbone:
    if cfg.backend == "procedural":
        from .procedural import ProceduralTokens

        return ProceduralTokens()
    if cfg.backend == "torch":
        from .torch_dino import TorchTokens

        return TorchTokens(cfg.weights_dir, cfg.device)
    raise BackendUnavailable(f"unknown backend {cfg.backend!r} (known: {BACKENDS})")


__all__ = [
    "BACKENDS",
    "BackendUnavailable",
    "DiffusionBackbone",
    "LayerFeatures",
    "TokenBackbone",
    "diffusion_backbone",
    "token_backbone",
]
