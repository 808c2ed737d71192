"""tempalign: temporal feature alignment for video pose estimation.

A numpy reverse-mode autodiff core, differentiable affine and modulated
deformable warps, a contrastive mutual-information objective, and a
synthetic video harness with ground-truth motion for benchmarking.
"""
from .alignment import ModelConfig, PoseModel, load_checkpoint, save_checkpoint
from .heatmaps import PoseAnnotation, decode_heatmap, heatmap_loss, pck, pck_report, total_loss
from .mi import estimate_mi_contrastive, gaussian_mi, mi_loss
from .synth import SynthConfig, gen_clip, gen_dataset
from .tensor import Graph, Tensor, backward, no_grad
from .train import TrainConfig, ablate, evaluate, train
from .warp import affine_grid, grid_sample, modulated_deform_conv

__version__ = "0.1.0"

__all__ = [
    "ModelConfig", "PoseModel", "load_checkpoint", "save_checkpoint",
    "PoseAnnotation", "decode_heatmap", "heatmap_loss", "pck", "pck_report", "total_loss",
    "estimate_mi_contrastive", "gaussian_mi", "mi_loss",
    "SynthConfig", "gen_clip", "gen_dataset",
    "Graph", "Tensor", "backward", "no_grad",
    "TrainConfig", "ablate", "evaluate", "train",
    "affine_grid", "grid_sample", "modulated_deform_conv",
]
