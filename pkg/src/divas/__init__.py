"""Interactive multi-view 3D segmentation.

Point prompts on a handful of planned views produce 2D confidence masks;
a depth-aware fusion kernel aggregates them into a probabilistic voxel
occupancy grid with live overlay feedback.
"""

from . import _nb  # noqa: F401  (must run before any other numba import)

from .geometry import Camera, Ray, VoxelGrid, SceneBounds  # noqa: E402
from .scene import ScenePrimitive, SceneModel, DensityGrid  # noqa: E402
from .render import RenderConfig, ViewGeometry  # noqa: E402
from .segmenter import SegmenterConfig, ConfidenceMask  # noqa: E402
from .fusion import FusionParams, OccupancyGrid  # noqa: E402

__version__ = "0.1.0"

__all__ = [
    "Camera", "Ray", "VoxelGrid", "SceneBounds",
    "ScenePrimitive", "SceneModel", "DensityGrid",
    "RenderConfig", "ViewGeometry",
    "SegmenterConfig", "ConfidenceMask",
    "FusionParams", "OccupancyGrid",
    "__version__",
]
