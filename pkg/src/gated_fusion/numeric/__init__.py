from .gradcheck import GradCheckResult, grad_check, relative_error
from .layers import (MLP, Dense, Module, ModuleDict, ModuleList, Parameter, dense_forward,
                     l2_normalize, l2_normalize_backward, sigmoid)
from .optim import LrSchedule, OptimizerState, adam_step, lr_at
from .rng import restore_rng, rng_state, seeded_rng

__all__ = [
    "Dense", "GradCheckResult", "LrSchedule", "MLP", "Module", "ModuleDict", "ModuleList",
    "OptimizerState", "Parameter", "adam_step", "dense_forward", "grad_check",
    "l2_normalize", "l2_normalize_backward", "lr_at", "relative_error",
    "restore_rng", "rng_state", "seeded_rng", "sigmoid",
]
