from . import ops
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .gradcheck import check_parameters, finite_difference_check, parameter_gradients, relative_errors
from .ops import PRIMITIVES, apply
from .tensor import ShapeError, Tensor, as_tensor, backward, grad_enabled, no_grad

__all__ = [
    "PRIMITIVES",
    "CheckpointError",
    "ShapeError",
    "Tensor",
    "apply",
    "as_tensor",
    "backward",
    "check_parameters",
    "finite_difference_check",
    "grad_enabled",
    "load_checkpoint",
    "no_grad",
    "parameter_gradients",
    "relative_errors",
    "ops",
    "save_checkpoint",
]
