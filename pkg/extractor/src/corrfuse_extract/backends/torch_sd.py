"""Diffusion backbone backed by a local diffusers checkpoint.

Requires the optional ``diffusers`` dependency and a local stable-diffusion
v1-x checkpoint directory (VAE + UNet; nothing is downloaded). Decoder
hooks are registered on the up-block outputs:

    layer tag "2" -> unet.up_blocks[0]   (stride 32 grid)
    layer tag "5" -> unet.up_blocks[1]   (stride 16 grid)
    layer tag "8" -> unet.up_blocks[2]   (stride 8 grid)

The observed channel width of each hook is recorded in the FMAP meta; the
reference extraction stack reports 1280/960/480 for these tags, but a
plain v1-x UNet without the captioner wrapper exposes its native widths,
so consumers must read the channel count from the file header rather than
assume it.
"""

from __future__ import annotations

import numpy as np

from .base import BackendUnavailable, LayerFeatures

_TAG_TO_UP_BLOCK = {"2": 0, "5": 1, "8": 2}


class TorchDiffusion:
    latent_downsample = 8

    def __init__(self, weights_dir: str | None, device: str = "cpu"):
        if not weights_dir:
            raise BackendUnavailable(
                "torch sd backend needs weights_dir pointing at a local "
                "stable-diffusion checkpoint directory"
            )
        try:
            import torch  # noqa: F401
            from diffusers import AutoencoderKL, UNet2DConditionModel
        except ImportError as exc:
            raise BackendUnavailable(
                "torch sd backend needs torch and diffusers installed "
                "(diffusers is an optional extra; install it alongside "
                "'corrfuse-extract[torch]')"
            ) from exc
        import torch

        self._torch = torch
        try:
            self._vae = AutoencoderKL.from_pretrained(weights_dir, subfolder="vae")
            self._unet = UNet2DConditionModel.from_pretrained(weights_dir, subfolder="unet")
        except (OSError, EnvironmentError) as exc:
            raise BackendUnavailable(
                f"could not load sd weights from {weights_dir}: {exc}"
            ) from exc
        self._vae.eval()
        self._unet.eval()
        self._device = device
        self._vae.to(device)
        self._unet.to(device)

    def encode(self, image: np.ndarray) -> np.ndarray:
        torch = self._torch
        pixels = image * 2.0 - 1.0
        batch = torch.from_numpy(
            np.ascontiguousarray(pixels.transpose(2, 0, 1)[None]).astype(np.float32)
        ).to(self._device)
        with torch.no_grad():
            posterior = self._vae.encode(batch).latent_dist
            z0 = posterior.mean * self._vae.config.scaling_factor
        return z0[0].cpu().numpy().transpose(1, 2, 0).astype(np.float64)

    def decoder_features(self, z_t, t, layers):
        torch = self._torch
        captured: dict[str, np.ndarray] = {}
        hooks = []
        for tag in layers:
            block = self._unet.up_blocks[_TAG_TO_UP_BLOCK[tag]]

            def make_hook(tag=tag):
                def hook(_module, _inputs, output):
                    captured[tag] = (
                        output[0].detach().cpu().numpy().transpose(1, 2, 0)
                    )
                return hook

            hooks.append(block.register_forward_hook(make_hook()))
        latents = torch.from_numpy(
            np.ascontiguousarray(z_t.transpose(2, 0, 1)[None]).astype(np.float32)
        ).to(self._device)
        # unconditional embedding stands in for the captioner conditioning
        embed_dim = self._unet.config.cross_attention_dim
        conditioning = torch.zeros((1, 77, embed_dim), device=self._device)
        try:
            with torch.no_grad():
                self._unet(latents, torch.tensor([t], device=self._device), conditioning)
        finally:
            for h in hooks:
                h.remove()
        return [
            LayerFeatures(
                tag=tag,
                data=captured[tag].astype(np.float32),
                hook=f"diffusers.UNet2DConditionModel/up_blocks[{_TAG_TO_UP_BLOCK[tag]}]",
            )
            for tag in layers
        ]
