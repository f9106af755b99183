"""Depth pruning and hybrid-stream conversion for a small dual-stream diffusion transformer."""

from .compress import apply_depth_prune, build_prune_plan, convert_hybrid, make_hybrid_plan, partition_layers
from .data import gen_dataset
from .diffusion import make_schedule, sample
from .model import MMDiT, ModelConfig, forward, init_model, parameter_count

__version__ = "0.1.0"

__all__ = [
    "MMDiT", "ModelConfig", "apply_depth_prune", "build_prune_plan", "convert_hybrid", "forward",
    "gen_dataset", "init_model", "make_hybrid_plan", "make_schedule", "parameter_count",
    "partition_layers", "sample",
]
