"""Local surface property estimation for point clouds.

Estimates unoriented/oriented normals and principal curvature values at
points of a raw point cloud, either with a trainable patch-based neural
model or with classical estimators (PCA planes, osculating jets, MST
orientation propagation). Ships the full pipeline: labeled dataset
generation from meshes and analytic surfaces, training, inference,
and benchmark reporting.
"""

__version__ = "0.1.0"

from .core import PointCloud, Patch, SpatialIndex, bbox_diagonal, build_index
from .mesh import TriMesh, load_mesh
from .network import ModelConfig, build_model, forward, predict

__all__ = [
    "PointCloud",
    "Patch",
    "SpatialIndex",
    "bbox_diagonal",
    "build_index",
    "TriMesh",
    "load_mesh",
    "ModelConfig",
    "build_model",
    "forward",
    "predict",
    "__version__",
]
