"""corrfuse-extract: dump diffusion/ViT activations as FMAP grids."""

from .config import ConfigError, ExtractConfig
from .pipeline import extract_dino, extract_directory, extract_sd

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "ExtractConfig",
    "extract_dino",
    "extract_directory",
    "extract_sd",
    "__version__",
]
