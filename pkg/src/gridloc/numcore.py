"""Minimal reverse-mode differentiation over dense arrays.

Only the operations the encoder/classifier actually composes are provided:
affine maps, ReLU, per-cloud column max pooling, L2 normalization, masked
log-softmax, and the scalar plumbing needed to form a loss. Arrays are plain
numpy; float32 is the production dtype, while tests may run everything in
float64 for finite-difference comparisons. Reductions (sums, log-sum-exp,
norms) accumulate in float64 regardless of storage dtype.

Masking is implemented as exclusion-from-reduction: masked entries never
enter the log-sum-exp, their outputs are a quarantined -inf sentinel, and
their gradient is exactly zero. This avoids NaN from -inf arithmetic while
keeping the semantics of an ignored class.
"""

from __future__ import annotations

from typing import Callable, Iterable

import numpy as np

NORM_EPS = 1e-12


class Tensor:
    """Dense float array with an additively accumulated gradient."""

    __slots__ = ("data", "grad")

    def __init__(self, data, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"


class GradTape:
    """Execution-ordered record of operations.

    ``backward`` replays the record in exact reverse order; each op's
    backward function maps the output gradient to input gradients, which are
    accumulated additively so fan-out is handled by summation.
    """

    __slots__ = ("_ops",)

    def __init__(self):
        self._ops: list[tuple[tuple[Tensor, ...], Tensor, Callable]] = []

    def record(self, inputs: tuple[Tensor, ...], output: Tensor, backward_fn) -> None:
        self._ops.append((inputs, output, backward_fn))

    def __len__(self) -> int:
        return len(self._ops)

    def backward(self, loss: Tensor) -> None:
        if loss.grad is None:
            loss.grad = np.ones_like(loss.data)
        for inputs, output, backward_fn in reversed(self._ops):
            if output.grad is None:
                continue  # dead branch: nothing downstream consumed it
            for tensor, grad in zip(inputs, backward_fn(output.grad)):
                if grad is not None:
                    tensor.accumulate(grad)


def affine(x: Tensor, w: Tensor, b: Tensor, tape: GradTape | None = None) -> Tensor:
    """Row-wise affine map ``x @ w + b``; ``x`` may be a single row vector."""
    xd, wd, bd = x.data, w.data, b.data
    if xd.ndim not in (1, 2) or wd.ndim != 2 or bd.ndim != 1:
        raise ValueError(
            f"affine expects (rows, matrix, vector), got shapes "
            f"{xd.shape}, {wd.shape}, {bd.shape}"
        )
    if xd.shape[-1] != wd.shape[0] or wd.shape[1] != bd.shape[0]:
        raise ValueError(
            f"affine shape mismatch: input {xd.shape}, weight {wd.shape}, bias {bd.shape}"
        )
    out = Tensor(xd @ wd + bd)
    if tape is not None:

        def backward(g):
            gx = g @ wd.T
            if xd.ndim == 1:
                gw = np.outer(xd, g)
                gb = g
            else:
                gw = xd.T @ g
                gb = g.sum(axis=0, dtype=np.float64).astype(bd.dtype)
            return gx, gw, gb

        tape.record((x, w, b), out, backward)
    return out


def relu(x: Tensor, tape: GradTape | None = None) -> Tensor:
    """Elementwise max(0, x); the subgradient at exactly 0 is 0."""
    out = Tensor(np.maximum(x.data, 0))
    if tape is not None:
        active = x.data > 0

        def backward(g):
            return (g * active,)

        tape.record((x,), out, backward)
    return out


def maxpool_points(x: Tensor, tape: GradTape | None = None) -> Tensor:
    """Columnwise max over the rows of an [N, F] per-point feature matrix.

    The gradient routes to the argmax row of each column; on ties the row
    with the lowest index wins.
    """
    xd = x.data
    if xd.ndim != 2 or xd.shape[0] < 1:
        raise ValueError(f"maxpool_points expects a non-empty [N, F] matrix, got {xd.shape}")
    cols = np.arange(xd.shape[1])
    winners = np.argmax(xd, axis=0)  # first occurrence on ties
    out = Tensor(xd[winners, cols])
    if tape is not None:

        def backward(g):
            gx = np.zeros_like(xd)
            gx[winners, cols] = g
            return (gx,)

        tape.record((x,), out, backward)
    return out


def l2_normalize(v: Tensor, tape: GradTape | None = None) -> Tensor:
    """Scale a vector to unit Euclidean norm.

    Backward applies the full Jacobian (I - u u^T) / ||v|| where u = v/||v||.
    """
    vd = v.data
    if vd.ndim != 1:
        raise ValueError(f"l2_normalize expects a vector, got shape {vd.shape}")
    norm = float(np.sqrt(np.sum(vd.astype(np.float64) ** 2)))
    if norm <= NORM_EPS:
        raise ValueError(f"cannot normalize a near-zero vector (norm={norm:g})")
    unit64 = vd.astype(np.float64) / norm
    out = Tensor(unit64.astype(vd.dtype))
    if tape is not None:

        def backward(g):
            g64 = g.astype(np.float64)
            gv = (g64 - unit64 * (unit64 @ g64)) / norm
            return (gv.astype(vd.dtype),)

        tape.record((v,), out, backward)
    return out


def masked_log_softmax(
    logits: Tensor, mask: Iterable[int], tape: GradTape | None = None
) -> Tensor:
    """Log-softmax over the unmasked entries of a logit vector.

    Masked positions are excluded from the log-sum-exp and come back as a
    -inf sentinel in the output; their gradient is exactly zero, and any
    upstream gradient arriving at a sentinel is discarded. The reduction runs
    with the max-subtraction trick in float64.
    """
    zd = logits.data
    if zd.ndim != 1:
        raise ValueError(f"masked_log_softmax expects a vector, got shape {zd.shape}")
    num_classes = zd.shape[0]
    keep = np.ones(num_classes, dtype=bool)
    for i in mask:
        idx = int(i)
        if not 0 <= idx < num_classes:
            raise ValueError(f"mask index {idx} outside [0, {num_classes})")
        keep[idx] = False
    if not keep.any():
        raise ValueError("all logits are masked; nothing to normalize over")

    z64 = zd[keep].astype(np.float64)
    zmax = z64.max()
    lse = zmax + np.log(np.sum(np.exp(z64 - zmax)))
    out_data = np.full(num_classes, -np.inf, dtype=zd.dtype)
    out_data[keep] = (z64 - lse).astype(zd.dtype)
    out = Tensor(out_data)
    if tape is not None:
        probs = np.exp(z64 - lse)  # softmax over kept entries, float64

        def backward(g):
            gk = g[keep].astype(np.float64)
            gz = np.zeros_like(zd)
            gz[keep] = (gk - probs * gk.sum()).astype(zd.dtype)
            return (gz,)

        tape.record((logits,), out, backward)
    return out


def select(v: Tensor, index: int, tape: GradTape | None = None) -> Tensor:
    """Pick one entry of a vector as a scalar tensor."""
    vd = v.data
    if vd.ndim != 1:
        raise ValueError(f"select expects a vector, got shape {vd.shape}")
    if not 0 <= index < vd.shape[0]:
        raise IndexError(f"index {index} outside [0, {vd.shape[0]})")
    out = Tensor(np.asarray(vd[index]))
    if tape is not None:

        def backward(g):
            gv = np.zeros_like(vd)
            gv[index] = g
            return (gv,)

        tape.record((v,), out, backward)
    return out


def scale(x: Tensor, factor: float, tape: GradTape | None = None) -> Tensor:
    """Multiply by a constant."""
    out = Tensor(x.data * x.data.dtype.type(factor))
    if tape is not None:
        tape.record((x,), out, lambda g: (g * x.data.dtype.type(factor),))
    return out
