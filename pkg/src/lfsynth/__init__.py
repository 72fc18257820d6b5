"""Occlusion-aware light-field view synthesis from the four corner views."""

from .tensor import Tensor, Tape, backward, ShapeError, GraphError
from .lightfield import LightField, ViewCoord, load_lightfield, save_lightfield
from .networks import NetKind, ModelWeights, build, save_checkpoint, load_checkpoint
from .pipeline import SynthesisResult, synthesize, synthesize_wide, warp_view
from .training import TrainConfig, train
from .metrics import mae100, psnr, ssim, evaluate_grid
from .synthgen import SceneSpec, LayerSpec, render_lightfield

__version__ = "0.1.0"

__all__ = [
    "Tensor", "Tape", "backward", "ShapeError", "GraphError",
    "LightField", "ViewCoord", "load_lightfield", "save_lightfield",
    "NetKind", "ModelWeights", "build", "save_checkpoint", "load_checkpoint",
    "SynthesisResult", "synthesize", "synthesize_wide", "warp_view",
    "TrainConfig", "train",
    "mae100", "psnr", "ssim", "evaluate_grid",
    "SceneSpec", "LayerSpec", "render_lightfield",
    "__version__",
]
