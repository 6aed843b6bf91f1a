"""Small dense-tensor core: numpy-backed ops, reverse-mode autodiff, seeded RNG."""

from .gradcheck import GradCheckError, grad_check
from .rng import Rng
from .tensor import *  # noqa: F401,F403
from .tensor import __all__ as _tensor_all

__all__ = ["GradCheckError", "grad_check", "Rng", *_tensor_all]
