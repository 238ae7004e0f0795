"""Backbone interfaces the extraction pipeline drives.

A diffusion backbone encodes an RGB frame into a latent grid and, given a
noised latent plus timestep, yields per-decoder-layer feature grids. A
token backbone yields one ViT-style token grid. Implementations must be
deterministic functions of their inputs (any internal weights are fixed).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol

import numpy as np


class BackendUnavailable(RuntimeError):
    """Requested backend cannot run here (missing dependency or weights)."""


@dataclass(frozen=True)
class LayerFeatures:
    tag: str
    data: np.ndarray  # (h, w, c) float32
    hook: str  # which submodule/derivation produced this grid


class DiffusionBackbone(Protocol):
    latent_downsample: int

    def encode(self, image: np.ndarray) -> np.ndarray:
        """(H, W, 3) float in [0, 1] -> latent grid (H/d, W/d, L)."""
        ...

    def decoder_features(
        self, z_t: np.ndarray, t: int, layers: tuple[str, ...]
    ) -> list[LayerFeatures]:
        """One denoising pass over the noised latent; capture layer outputs."""
        ...


class TokenBackbone(Protocol):
    patch_size: int

    def token_features(self, image: np.ndarray, layer: int, facet: str) -> LayerFeatures:
        """(H, W, 3) float in [0, 1] -> token grid (H/p, W/p, C)."""
        ...
