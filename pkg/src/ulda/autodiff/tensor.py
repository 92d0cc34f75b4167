"""Dense tensors and the gradient tape."""
from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """An op received operands whose shapes it cannot combine."""


class NonFiniteError(ValueError):
    """An op received NaN or Inf input."""


class Tensor:
    """A numpy array that can take part in reverse-mode differentiation.

    ``data`` is always a contiguous float32 or float64 array. Python
    scalars and lists default to float32; float64 arrays keep their
    precision (used by the gradient checks).
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "_tape")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        if dtype is None:
            arr = np.asarray(data)
            dtype = np.float64 if arr.dtype == np.float64 else np.float32
        self.data = np.ascontiguousarray(data, dtype=dtype)
        if self.data.ndim == 0:
            self.data = self.data.reshape(1)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name
        self._tape = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self):
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label}, requires_grad={self.requires_grad})"


class _Node:
    __slots__ = ("inputs", "output", "backward")

    def __init__(self, inputs, output, backward):
        self.inputs = inputs
        self.output = output
        self.backward = backward


_active = []


class Tape:
    """Ordered record of differentiable ops.

    Ops executed inside ``with Tape() as tape:`` that touch a tensor with
    ``requires_grad`` append a node; outside any tape nothing is recorded
    and the forward pass runs without keeping intermediates alive.
    """

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        _active.append(self)
        return self

    def __exit__(self, *exc):
        _active.remove(self)
        return False

    def __len__(self):
        return len(self.nodes)

    def record(self, inputs, output, backward):
        output.requires_grad = True
        output._tape = (self, len(self.nodes))
        self.nodes.append(_Node(tuple(inputs), output, backward))

    def backward(self, loss):
        if loss.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss._tape is None or loss._tape[0] is not self:
            raise ValueError("loss was not produced on this tape")
        end = loss._tape[1]
        grads = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes[: end + 1]):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            for inp, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                if inp._tape is not None and inp._tape[0] is self:
                    key = id(inp)
                    grads[key] = gi if key not in grads else grads[key] + gi
                elif inp.grad is None:
                    inp.grad = np.array(gi, dtype=inp.dtype, copy=True)
                else:
                    inp.grad += gi


def active_tape():
    return _active[-1] if _active else None


def backward(loss):
    """Fill ``.grad`` of every leaf reachable from ``loss``.

    Leaf gradients accumulate into existing ``.grad`` arrays; callers zero
    them (the trainer does so before each episode).
    """
    if not isinstance(loss, Tensor):
        raise TypeError("backward expects a Tensor")
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._tape is None:
        raise ValueError("loss is not on a tape; run the forward pass inside `with Tape():`")
    loss._tape[0].backward(loss)
