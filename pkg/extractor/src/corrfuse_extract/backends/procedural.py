"""Weightless stand-in backbones.

These run the full extraction pipeline (latent encoding, schedule noise,
per-layer grids with the reference channel widths) without any model
weights, so the end-to-end path is exercisable on any machine. They are
deterministic functions of the input image: internal projection weights
come from fixed per-layer seeds, never from the run seed.

The two backbones deliberately mirror the qualitative split of their real
counterparts: the diffusion stand-in pools the noised latent and blurs it
over the grid (spatially coherent, low-frequency), while the token
stand-in adds a content-keyed pseudo-random component per patch (exact
repeats of a patch reproduce their vector; any content drift decorrelates
it), which yields accurate-or-scattered matches.
"""

from __future__ import annotations

import hashlib

import numpy as np

from ..config import DINO_PATCH, SD_LAYER_CHANNELS, SD_LAYER_STRIDES
from .base import LayerFeatures

LATENT_CHANNELS = 4
SMOOTH_SIGMA = 1.4
TOKEN_JITTER_WEIGHT = 1.5
TOKEN_QUANT_STEP = 0.05


def _pool(image: np.ndarray, factor: int) -> np.ndarray:
    h, w = image.shape[:2]
    c = image.shape[2]
    gh, gw = h // factor, w // factor
    view = image[: gh * factor, : gw * factor].reshape(gh, factor, gw, factor, c)
    return view.mean(axis=(1, 3))


def _pool_std(gray: np.ndarray, factor: int) -> np.ndarray:
    h, w = gray.shape
    gh, gw = h // factor, w // factor
    view = gray[: gh * factor, : gw * factor].reshape(gh, factor, gw, factor)
    return view.std(axis=(1, 3))


def _fixed_matrix(key: str, rows: int, cols: int) -> np.ndarray:
    seed = int.from_bytes(hashlib.blake2b(key.encode(), digest_size=8).digest(), "little")
    return np.random.default_rng(seed).standard_normal((rows, cols)) / np.sqrt(rows)


def _gaussian_blur(grid: np.ndarray, sigma: float) -> np.ndarray:
    radius = max(1, int(round(3 * sigma)))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-0.5 * (x / sigma) ** 2)
    kernel /= kernel.sum()
    padded = np.pad(grid, ((radius, radius), (0, 0), (0, 0)), mode="reflect")
    rows = sum(kernel[i] * padded[i : i + grid.shape[0]] for i in range(2 * radius + 1))
    padded = np.pad(rows, ((0, 0), (radius, radius), (0, 0)), mode="reflect")
    return sum(kernel[i] * padded[:, i : i + grid.shape[1]] for i in range(2 * radius + 1))


class ProceduralDiffusion:
    """Latent = pooled image statistics; decoder grids = blurred seeded
    projections of the pooled noised latent plus a timestep embedding."""

    latent_downsample = 8

    def encode(self, image: np.ndarray) -> np.ndarray:
        rgb = _pool(image, self.latent_downsample)
        gray = image.mean(axis=2)
        texture = _pool_std(gray, self.latent_downsample)
        latent = np.concatenate([(rgb - 0.5) * 2.0, texture[..., None] * 4.0], axis=-1)
        return latent.astype(np.float64)

    def decoder_features(self, z_t, t, layers):
        out = []
        t_embed = np.array([np.sin(t / 1000.0 * np.pi), np.cos(t / 1000.0 * np.pi)])
        for tag in layers:
            factor = SD_LAYER_STRIDES[tag] // self.latent_downsample
            pooled = _pool(z_t, factor) if factor > 1 else z_t
            gh, gw = pooled.shape[:2]
            stats = np.concatenate(
                [pooled, np.broadcast_to(t_embed, (gh, gw, 2))], axis=-1
            )
            weights = _fixed_matrix(f"sd.{tag}", stats.shape[-1], SD_LAYER_CHANNELS[tag])
            grid = _gaussian_blur(stats @ weights, SMOOTH_SIGMA)
            out.append(
                LayerFeatures(
                    tag=tag,
                    data=grid.astype(np.float32),
                    hook=f"procedural/pool{SD_LAYER_STRIDES[tag]}+blur",
                )
            )
        return out


class ProceduralTokens:
    """Patch statistics projected to the token width, plus a pseudo-random
    component keyed on quantized patch content."""

    patch_size = DINO_PATCH
    channels = 768

    def token_features(self, image: np.ndarray, layer: int, facet: str) -> LayerFeatures:
        rgb = _pool(image, self.patch_size)
        gray = image.mean(axis=2)
        texture = _pool_std(gray, self.patch_size)
        gy, gx = np.gradient(gray)
        grad = _pool(np.stack([np.abs(gx), np.abs(gy)], axis=-1), self.patch_size)
        stats = np.concatenate([rgb, texture[..., None], grad], axis=-1)  # (gh, gw, 6)
        gh, gw, sdim = stats.shape

        weights = _fixed_matrix(f"dino.layer{layer}", sdim, self.channels)
        base = stats @ weights

        quant = np.round(stats / TOKEN_QUANT_STEP).astype(np.int64)
        jitter = np.empty((gh, gw, self.channels))
        for r in range(gh):
            for c in range(gw):
                digest = hashlib.blake2b(
                    quant[r, c].tobytes() + f"L{layer}".encode(), digest_size=8
                ).digest()
                token_rng = np.random.default_rng(int.from_bytes(digest, "little"))
                jitter[r, c] = token_rng.standard_normal(self.channels)
        jitter /= np.sqrt(self.channels)

        data = base + TOKEN_JITTER_WEIGHT * jitter
        return LayerFeatures(
            tag=f"layer{layer}",
            data=data.astype(np.float32),
            hook="procedural/patch-stats+content-keyed-jitter",
        )
