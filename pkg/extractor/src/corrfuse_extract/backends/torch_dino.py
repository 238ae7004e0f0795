"""ViT token backbone backed by a local transformers Dinov2 checkpoint.

Loads weights from ``weights_dir`` (a directory previously produced by
``save_pretrained``; nothing is downloaded). The "token" facet of layer i
is the patch-token output of transformer block i, i.e.
``hidden_states[i + 1]`` with the class/register tokens stripped.
"""

from __future__ import annotations

import numpy as np

from ..config import DINO_PATCH
from .base import BackendUnavailable, LayerFeatures

IMAGENET_MEAN = np.array([0.485, 0.456, 0.406])
IMAGENET_STD = np.array([0.229, 0.224, 0.225])


class TorchTokens:
    patch_size = DINO_PATCH

    def __init__(self, weights_dir: str | None, device: str = "cpu"):
        if not weights_dir:
            raise BackendUnavailable(
                "torch dino backend needs weights_dir pointing at a local "
                "Dinov2 checkpoint directory"
            )
        try:
            import torch
            from transformers import Dinov2Model
        except ImportError as exc:
            raise BackendUnavailable(
                "torch dino backend needs the optional dependencies: "
                "pip install 'corrfuse-extract[torch]'"
            ) from exc
        self._torch = torch
        try:
            self._model = Dinov2Model.from_pretrained(weights_dir)
        except (OSError, EnvironmentError) as exc:
            raise BackendUnavailable(
                f"could not load Dinov2 weights from {weights_dir}: {exc}"
            ) from exc
        if self._model.config.patch_size != DINO_PATCH:
            raise BackendUnavailable(
                f"checkpoint patch size {self._model.config.patch_size} != {DINO_PATCH}"
            )
        self._model.eval()
        self._device = device
        self._model.to(device)

    def token_features(self, image: np.ndarray, layer: int, facet: str) -> LayerFeatures:
        torch = self._torch
        h, w = image.shape[:2]
        gh, gw = h // self.patch_size, w // self.patch_size
        pixels = (image - IMAGENET_MEAN) / IMAGENET_STD
        batch = torch.from_numpy(
            np.ascontiguousarray(pixels.transpose(2, 0, 1)[None]).astype(np.float32)
        ).to(self._device)
        with torch.no_grad():
            outputs = self._model(batch, output_hidden_states=True)
        hidden = outputs.hidden_states[layer + 1][0].cpu().numpy()
        n_special = hidden.shape[0] - gh * gw  # cls (+ register) tokens lead
        tokens = hidden[n_special:].reshape(gh, gw, -1)
        return LayerFeatures(
            tag=f"layer{layer}",
            data=tokens.astype(np.float32),
            hook=f"transformers.Dinov2Model/hidden_states[{layer + 1}]/patch-tokens",
        )
