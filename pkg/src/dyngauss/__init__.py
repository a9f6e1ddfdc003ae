"""Dynamic 3D Gaussians: differentiable splatting, online reconstruction and dense 6-DOF tracking."""
import os

# workqueue ships with numba itself; avoids the TBB version warning on import
os.environ.setdefault("NUMBA_THREADING_LAYER", "workqueue")

from .gaussians import (CameraModel, GaussianScene, InvalidCallError, InvalidParameterError,  # noqa: E402
                        build_covariance, influence_3d, load_checkpoint, quat_to_rotmat,
                        save_checkpoint)
from .rasterizer import RasterSettings, RenderOutput, rasterize  # noqa: E402
from .backward import ParamGradients, backward_rasterize  # noqa: E402
from .losses import image_loss  # noqa: E402
from .priors import NeighborGraph, build_neighbor_graph  # noqa: E402
from .optimize import RunConfig, train  # noqa: E402

__version__ = "0.1.0"

__all__ = [
    "CameraModel", "GaussianScene", "InvalidCallError", "InvalidParameterError", "build_covariance",
    "influence_3d", "load_checkpoint", "quat_to_rotmat", "save_checkpoint", "RasterSettings",
    "RenderOutput", "rasterize", "ParamGradients", "backward_rasterize", "image_loss",
    "NeighborGraph", "build_neighbor_graph", "RunConfig", "train",
]
