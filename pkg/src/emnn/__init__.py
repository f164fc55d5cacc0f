"""E(3)-equivariant message passing on triangle meshes.

Surface-aware graph layers with multi-channel vector features,
farthest-point-sampling hierarchy, a minimal reverse-mode tensor engine,
and a numerical verification harness for the symmetry properties.
"""

from . import autodiff, equivariance, hierarchy, kernels, layers, mesh, model
from .mesh import (GeometricFeatures, Mesh, face_geometry, geometric_features,
                   load_off, normalize_mesh, validate, vertex_geometry, write_off)
from .model import (ModelConfig, Prediction, forward_classification,
                    forward_pass, forward_segmentation, init_features,
                    init_model_params, load_checkpoint, save_checkpoint)

__version__ = "0.1.0"
