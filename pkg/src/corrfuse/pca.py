"""Dimensionality reduction for token grids.

Two fit paths share one model type: an exact truncated SVD, and a
randomized range-finder approximation (Gaussian sketch, QR
re-orthonormalized power iterations, small exact SVD) for large token
matrices. Fits are always mean-centered, and a deterministic sign
convention (the largest-magnitude entry of each basis row is made
positive) removes the sign ambiguity of singular vectors so identical
data always produces identical models.

The joint source+target fit (`fit_pair_pca`) stacks the tokens of both
maps of an image pair and fits a single model, so the pair shares one
projection basis.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .featmap import FeatureMap, ValidationError

ORTHONORMALITY_TOL = 1e-5


@dataclass(frozen=True)
class PcaModel:
    """A fitted mean-centered rank-k projection.

    mean: (C,) column mean of the fitted tokens.
    basis: (k, C) orthonormal principal directions, deterministic signs.
    explained: (k,) singular values of the centered token matrix,
        non-increasing.
    """

    mean: np.ndarray
    basis: np.ndarray
    explained: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64)
        basis = np.asarray(self.basis, dtype=np.float64)
        explained = np.asarray(self.explained, dtype=np.float64)
        if basis.ndim != 2 or mean.ndim != 1 or basis.shape[1] != mean.shape[0]:
            raise ValidationError(
                f"inconsistent model shapes: basis {basis.shape}, mean {mean.shape}"
            )
        if explained.shape != (basis.shape[0],):
            raise ValidationError("explained must have one entry per basis row")
        gram = basis @ basis.T
        err = np.linalg.norm(gram - np.eye(basis.shape[0]))
        if err > ORTHONORMALITY_TOL:
            raise ValidationError(f"basis rows not orthonormal (deviation {err:.2e})")
        if np.any(explained < 0) or np.any(np.diff(explained) > 0):
            raise ValidationError("explained values must be non-negative, non-increasing")
        for name, arr in (("mean", mean), ("basis", basis), ("explained", explained)):
            arr = np.ascontiguousarray(arr)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def k(self) -> int:
        return self.basis.shape[0]

    @property
    def input_channels(self) -> int:
        return self.basis.shape[1]

    def captured_variance(self) -> float:
        """Sum of squared singular values retained by the basis."""
        return float(np.sum(self.explained**2))


def _check_fit_args(tokens: np.ndarray, k: int) -> np.ndarray:
    tokens = np.asarray(tokens, dtype=np.float64)
    if tokens.ndim != 2:
        raise ValidationError(f"tokens must be (N, C), got shape {tokens.shape}")
    n, c = tokens.shape
    if n < 2:
        raise ValidationError(f"need at least 2 tokens to fit, got {n}")
    if not 1 <= k <= min(n, c):
        raise ValidationError(f"k={k} out of range [1, {min(n, c)}] for {n}x{c} tokens")
    if not np.isfinite(tokens).all():
        raise ValidationError("tokens contain NaN or Inf")
    return tokens


def _fix_signs(basis: np.ndarray) -> np.ndarray:
    # Flip each row so its largest-magnitude entry is positive; first
    # maximal entry wins on exact ties.
    idx = np.argmax(np.abs(basis), axis=1)
    signs = np.sign(basis[np.arange(basis.shape[0]), idx])
    signs[signs == 0] = 1.0
    return basis * signs[:, None]


def fit_pca_exact(tokens: np.ndarray, k: int) -> PcaModel:
    """Rank-k PCA via full SVD of the mean-centered token matrix."""
    tokens = _check_fit_args(tokens, k)
    mean = tokens.mean(axis=0)
    centered = tokens - mean
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    return PcaModel(mean=mean, basis=_fix_signs(vt[:k]), explained=s[:k])


def fit_pca_randomized(
    tokens: np.ndarray,
    k: int,
    oversample: int = 10,
    power_iters: int = 2,
    *,
    seed: int,
) -> PcaModel:
    """Rank-k PCA via a Gaussian range finder plus small exact SVD.

    Deterministic for a fixed seed. ``power_iters`` QR-re-orthonormalized
    passes over the centered matrix sharpen the sketch on slowly decaying
    spectra; oversample=10 / power_iters=2 are good defaults.
    """
    if oversample < 0 or power_iters < 0:
        raise ValidationError("oversample and power_iters must be >= 0")
    tokens = _check_fit_args(tokens, k)
    n, c = tokens.shape
    mean = tokens.mean(axis=0)
    centered = tokens - mean

    rng = np.random.default_rng(seed)
    sketch_dim = min(k + oversample, min(n, c))
    omega = rng.standard_normal((c, sketch_dim))
    q, _ = np.linalg.qr(centered @ omega)
    for _ in range(power_iters):
        q, _ = np.linalg.qr(centered.T @ q)
        q, _ = np.linalg.qr(centered @ q)
    small = q.T @ centered
    _, s, vt = np.linalg.svd(small, full_matrices=False)
    return PcaModel(mean=mean, basis=_fix_signs(vt[:k]), explained=s[:k])


def project(model: PcaModel, fmap: FeatureMap) -> FeatureMap:
    """Project every token of ``fmap`` onto the model basis (k channels out)."""
    if fmap.channels != model.input_channels:
        raise ValidationError(
            f"map has {fmap.channels} channels, model expects {model.input_channels}"
        )
    shifted = fmap.tokens().astype(np.float64) - model.mean
    proj = shifted @ model.basis.T
    return fmap.with_data(
        proj.reshape(fmap.height, fmap.width, model.k).astype(np.float32)
    )


def reconstruct(model: PcaModel, projected: FeatureMap) -> FeatureMap:
    """Map a projected grid back to the original channel space."""
    if projected.channels != model.k:
        raise ValidationError(
            f"map has {projected.channels} channels, model projects to {model.k}"
        )
    tokens = projected.tokens().astype(np.float64) @ model.basis + model.mean
    return projected.with_data(
        tokens.reshape(projected.height, projected.width, -1).astype(np.float32)
    )


def fit_pair_pca(
    src: FeatureMap,
    tgt: FeatureMap,
    k: int,
    method: str = "exact",
    *,
    oversample: int = 10,
    power_iters: int = 2,
    seed: int | None = None,
) -> tuple[FeatureMap, FeatureMap, PcaModel]:
    """Fit one PCA on the union of source and target tokens, project both.

    Source tokens are stacked above target tokens; the fit is order-invariant
    up to the deterministic sign rule. Spatial dims of the two maps may
    differ, channel counts may not.
    """
    if src.channels != tgt.channels:
        raise ValidationError(
            f"channel mismatch: src has {src.channels}, tgt has {tgt.channels}"
        )
    stacked = np.vstack([src.tokens(), tgt.tokens()])
    if method == "exact":
        model = fit_pca_exact(stacked, k)
    elif method == "randomized":
        if seed is None:
            raise ValidationError("randomized PCA requires an explicit seed")
        model = fit_pca_randomized(
            stacked, k, oversample=oversample, power_iters=power_iters, seed=seed
        )
    else:
        raise ValidationError(f"unknown PCA method {method!r}")
    return project(model, src), project(model, tgt), model
