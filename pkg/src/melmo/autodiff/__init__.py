from . import ops
from .checkpoint import load_arrays, save_arrays
from .gradcheck import check_gradients, finite_difference_check
from .tensor import Tape, Tensor, backward, is_grad_enabled, no_grad

__all__ = [
    "Tape",
    "Tensor",
    "backward",
    "check_gradients",
    "finite_difference_check",
    "is_grad_enabled",
    "load_arrays",
    "no_grad",
    "ops",
    "save_arrays",
]
