from .checkpoint import load_checkpoint, save_checkpoint
from .config import (
    LADDER_STEP_NAMES,
    LadderStep,
    ModelConfig,
    apply_ladder_step,
    list_ladder,
)
from .handle import ModelHandle, build_model, count_parameters, gradient_wrt_input

__all__ = [
    "LADDER_STEP_NAMES",
    "LadderStep",
    "ModelConfig",
    "ModelHandle",
    "apply_ladder_step",
    "build_model",
    "count_parameters",
    "gradient_wrt_input",
    "list_ladder",
    "load_checkpoint",
    "save_checkpoint",
]
