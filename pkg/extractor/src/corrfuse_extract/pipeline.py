"""Extraction pipeline: image preparation, backbone runs, FMAP emission.

Images are letterboxed to the model's square input (aspect-preserving
scale of the longer side, bottom/right zero padding); the policy and the
original size are stamped into every FMAP's extraction params. Output
files are written atomically and named ``<stem>.<model>.<layer>.fmap``.
"""

from __future__ import annotations

import logging
from pathlib import Path

import numpy as np
from PIL import Image

from .backends import diffusion_backbone, token_backbone
from .config import ExtractConfig
from .fmapio import meta_json, write_fmap_atomic
from .schedule import noise_latent

logger = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")


def load_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def letterbox(image: np.ndarray, size: int) -> tuple[np.ndarray, dict[str, str]]:
    """Scale the longer side to ``size`` and pad bottom/right with black."""
    h, w = image.shape[:2]
    scale = size / max(h, w)
    new_h, new_w = max(1, round(h * scale)), max(1, round(w * scale))
    resized = np.asarray(
        Image.fromarray((image * 255.0).astype(np.uint8)).resize(
            (new_w, new_h), Image.BILINEAR
        ),
        dtype=np.float64,
    ) / 255.0
    out = np.zeros((size, size, 3), dtype=np.float64)
    out[:new_h, :new_w] = resized
    info = {
        "letterbox": "pad_bottom_right",
        "original_width": str(w),
        "original_height": str(h),
        "scaled_width": str(new_w),
        "scaled_height": str(new_h),
    }
    return out, info


def extract_sd(image_path, cfg: ExtractConfig, out_dir, backbone=None) -> list[Path]:
    """One denoising pass; writes one FMAP per configured decoder layer."""
    backbone = backbone or diffusion_backbone(cfg)
    image = load_image(image_path)
    prepared, box_info = letterbox(image, cfg.sd_input)
    rng = np.random.default_rng(cfg.seed)
    z0 = backbone.encode(prepared)
    z_t = noise_latent(z0, cfg.sd_timestep, rng)
    layer_feats = backbone.decoder_features(z_t, cfg.sd_timestep, cfg.sd_layers)

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = Path(image_path).stem
    written = []
    for feats in layer_feats:
        params = {
            "model": "sd_unet",
            "backend": cfg.backend,
            "timestep": str(cfg.sd_timestep),
            "layer": feats.tag,
            "hook": feats.hook,
            "channels": str(feats.data.shape[2]),
            "seed": str(cfg.seed),
            **box_info,
        }
        meta = meta_json(cfg.sd_input, cfg.sd_input, f"sd_unet/layer{feats.tag}", params)
        path = out_dir / f"{stem}.sd.{feats.tag}.fmap"
        write_fmap_atomic(feats.data, meta, path)
        written.append(path)
        logger.info("wrote %s (%s)", path, "x".join(map(str, feats.data.shape)))
    return written


def extract_dino(image_path, cfg: ExtractConfig, out_dir, backbone=None) -> Path:
    """Token-facet grid of the configured transformer layer."""
    backbone = backbone or token_backbone(cfg)
    image = load_image(image_path)
    prepared, box_info = letterbox(image, cfg.dino_input)
    feats = backbone.token_features(prepared, cfg.dino_layer, cfg.dino_facet)

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    params = {
        "model": "dino_vit",
        "backend": cfg.backend,
        "dino_layer": str(cfg.dino_layer),
        "dino_facet": cfg.dino_facet,
        "hook": feats.hook,
        "channels": str(feats.data.shape[2]),
        "seed": str(cfg.seed),
        **box_info,
    }
    meta = meta_json(cfg.dino_input, cfg.dino_input, f"dino_vit/layer{cfg.dino_layer}", params)
    path = Path(out_dir) / f"{Path(image_path).stem}.dino.{cfg.dino_layer}.fmap"
    write_fmap_atomic(feats.data, meta, path)
    logger.info("wrote %s (%s)", path, "x".join(map(str, feats.data.shape)))
    return path


def extract_directory(images_dir, cfg: ExtractConfig, out_dir) -> list[Path]:
    """Extract every image in a directory (sorted, sequential)."""
    images = sorted(
        p for p in Path(images_dir).iterdir() if p.suffix.lower() in IMAGE_SUFFIXES
    )
    if not images:
        raise FileNotFoundError(f"{images_dir}: no images found")
    backbone = (
        diffusion_backbone(cfg) if cfg.model == "sd_unet" else token_backbone(cfg)
    )
    written: list[Path] = []
    for img in images:
        if cfg.model == "sd_unet":
            written.extend(extract_sd(img, cfg, out_dir, backbone=backbone))
        else:
            written.append(extract_dino(img, cfg, out_dir, backbone=backbone))
    return written
