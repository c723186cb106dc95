"""Numerical kernel: sampling, differentiation, finite differences, optimizers."""
from .autodiff import Var, grad
from .errors import NonFiniteError
from .fd import fd_gradient, max_relative_error
from .optim import OptimizerState, clip_by_global_norm, global_norm, optimizer_apply
from .rng import Rng, derive_seed


def gaussian_sample(rng: Rng, shape):
    """I.i.d. standard normals of ``shape`` drawn from ``rng`` (advances it)."""
    return rng.normal(shape)


__all__ = [
    "Var", "grad", "NonFiniteError", "fd_gradient", "max_relative_error",
    "OptimizerState", "clip_by_global_norm", "global_norm", "optimizer_apply",
    "Rng", "derive_seed", "gaussian_sample",
]
