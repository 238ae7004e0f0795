"""Forward-diffusion noising of encoded latents.

The latent is pushed to timestep t of the pretrained model's variance
schedule (scaled-linear betas over 1000 steps, the stable-diffusion v1
convention):

    z_t = sqrt(abar_t) * z_0 + sqrt(1 - abar_t) * eps,  eps ~ N(0, I)

with abar_t the cumulative product of (1 - beta). The noise draw is
seeded so extraction is reproducible end to end.
"""

from __future__ import annotations

import numpy as np

from .config import SCHEDULE_STEPS

BETA_START = 0.00085
BETA_END = 0.012


def alpha_bar() -> np.ndarray:
    """Cumulative signal coefficients for all timesteps, shape (1000,)."""
    betas = np.linspace(BETA_START**0.5, BETA_END**0.5, SCHEDULE_STEPS) ** 2
    return np.cumprod(1.0 - betas)


_ALPHA_BAR = alpha_bar()


def noise_latent(z0: np.ndarray, t: int, rng: np.random.Generator) -> np.ndarray:
    """Diffuse a latent to timestep ``t`` with seeded Gaussian noise."""
    if not 0 <= t < SCHEDULE_STEPS:
        raise ValueError(f"timestep {t} outside schedule range [0, {SCHEDULE_STEPS})")
    ab = _ALPHA_BAR[t]
    eps = rng.standard_normal(z0.shape)
    return np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * eps
