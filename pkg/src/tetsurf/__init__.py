"""Tetrahedral-grid SDF networks with exact zero-level-set extraction.

The package composes a multi-resolution tetrahedral feature encoder with a
small ReLU MLP (a continuous piecewise-affine field), trains it against
analytic signed distance functions, and recovers the exact zero-level-set
mesh by tracking linear regions inside the encoder-induced polyhedral
complex. A closed-form input preconditioner derived from the encoder
metric is available to reduce directional bias during training.
"""

from .encoder import EncoderParams, encode, init_encoder
from .meshio import Mesh, load_mesh, write_obj, write_ply
from .net import MlpParams, TrainConfig, TrainingSet, train
from .precond import Preconditioner, default_preconditioner
from .skeleton import Skeleton, build_skeleton
from .tetgrid import GridConfig, level_resolutions
from .extract import Extractor, extract_mesh

__all__ = [
    "EncoderParams", "encode", "init_encoder",
    "Mesh", "load_mesh", "write_obj", "write_ply",
    "MlpParams", "TrainConfig", "TrainingSet", "train",
    "Preconditioner", "default_preconditioner",
    "Skeleton", "build_skeleton",
    "GridConfig", "level_resolutions",
    "Extractor", "extract_mesh",
]

__version__ = "0.1.0"
