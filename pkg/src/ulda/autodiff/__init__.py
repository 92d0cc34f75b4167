"""Minimal reverse-mode autodiff over numpy arrays."""
from . import functional
from .checkpoint import CheckpointError, read_tensors, write_tensors
from .optim import Parameter, adam_step, kaiming_uniform, zero_grad
from .tensor import NonFiniteError, ShapeError, Tape, Tensor, backward

_OPS = {
    "conv2d": functional.conv2d,
    "maxpool2x2": functional.maxpool2x2,
    "batchnorm2d": functional.batchnorm2d,
    "relu": functional.relu,
    "linear": functional.linear,
    "flatten": functional.flatten,
    "add": functional.add,
    "sub": functional.sub,
    "mul": functional.mul,
    "scale": functional.scale,
    "sum": functional.sum,
    "softmax_cross_entropy": functional.softmax_cross_entropy,
    "sq_distances": functional.sq_distances,
    "class_means": functional.class_means,
    "take_rows": functional.take_rows,
    "distance_ratio_nll": functional.distance_ratio_nll,
}


def forward_op(kind, *inputs, **params):
    """Dispatch an op by name, e.g. ``forward_op("relu", x)``."""
    try:
        fn = _OPS[kind]
    except KeyError:
        raise ValueError(f"unknown op kind {kind!r}; expected one of {sorted(_OPS)}") from None
    return fn(*inputs, **params)


__all__ = [
    "CheckpointError", "NonFiniteError", "Parameter", "ShapeError", "Tape", "Tensor",
    "adam_step", "backward", "forward_op", "functional", "kaiming_uniform",
    "read_tensors", "write_tensors", "zero_grad",
]
