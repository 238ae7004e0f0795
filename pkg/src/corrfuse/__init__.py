"""corrfuse: semantic correspondence from fused diffusion and ViT features.

Feature grids come in as FMAP files, get reduced and fused into one
descriptor per image pair, and go out as dense flows, keypoint matches,
evaluation reports, part clusterings, visualizations, or swapped images.
"""

from .featmap import (
    FeatureMap,
    MapMeta,
    Mask,
    bilinear_resize,
    l2_normalize,
    read_fmap,
    write_fmap,
)
from .fusion import FusionConfig, ensemble_sd, fuse, fuse_pair
from .matching import (
    Correspondence,
    FlowField,
    MatchSet,
    dense_flow,
    nn_dense,
    read_sflw,
    transfer_keypoints,
    write_sflw,
)
from .metrics import (
    EvalReport,
    PairAnnotation,
    flow_smoothness,
    outcome_distribution,
    pck,
)
from .parts import Clustering, ClusterMatch, hungarian, kmeans, match_clusters
from .pca import PcaModel, fit_pair_pca, fit_pca_exact, fit_pca_randomized, project
from .swap import swap_instance
from .viz import pca_rgb, render_flow

__version__ = "0.1.0"

__all__ = [
    "FeatureMap",
    "MapMeta",
    "Mask",
    "bilinear_resize",
    "l2_normalize",
    "read_fmap",
    "write_fmap",
    "FusionConfig",
    "ensemble_sd",
    "fuse",
    "fuse_pair",
    "Correspondence",
    "FlowField",
    "MatchSet",
    "dense_flow",
    "nn_dense",
    "read_sflw",
    "transfer_keypoints",
    "write_sflw",
    "EvalReport",
    "PairAnnotation",
    "flow_smoothness",
    "outcome_distribution",
    "pck",
    "Clustering",
    "ClusterMatch",
    "hungarian",
    "kmeans",
    "match_clusters",
    "PcaModel",
    "fit_pair_pca",
    "fit_pca_exact",
    "fit_pca_randomized",
    "project",
    "swap_instance",
    "pca_rgb",
    "render_flow",
    "__version__",
]
