"""Blocked float32 kernels for linear-layer training.

All math runs in float32 end to end.  Reduction order is never chosen here:
callers that need to sum partial results must do so in a fixed ascending
block order (see taskops) so that distributed and sequential execution give
bit-identical results.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import reduce
from typing import Iterable, Optional

import numpy as np

Range = tuple[int, int]

F32 = np.float32


class KernelError(Exception):
    pass


class ShapeError(KernelError):
    pass


def _check(arr: np.ndarray, name: str, shape: tuple[int, ...]) -> np.ndarray:
    if not isinstance(arr, np.ndarray):
        raise ShapeError(f"{name}: expected ndarray, got {type(arr).__name__}")
    if arr.dtype != F32:
        raise ShapeError(f"{name}: expected float32, got {arr.dtype}")
    if arr.shape != shape:
        raise ShapeError(f"{name}: expected shape {shape}, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise KernelError(f"{name}: non-finite values")
    return arr


def span(r: Range) -> int:
    return r[1] - r[0]


@dataclass(frozen=True)
class ParamBlock:
    """One block of a layer parameter.

    ``rows`` is the output index range [o0, o1); ``cols`` the input index
    range [i0, i1), which is (0, 0) for a bias block.  ``data`` has shape
    (rows, cols) for weights and (rows,) for biases.
    """

    layer: int
    kind: str  # "W" or "b"
    rows: Range
    cols: Range
    data: np.ndarray

    def __post_init__(self) -> None:
        if self.layer < 1:
            raise ShapeError(f"bad layer {self.layer}")
        if self.kind == "W":
            if span(self.cols) <= 0 or span(self.rows) <= 0:
                raise ShapeError(f"empty range in {self.rows}/{self.cols}")
            _check(self.data, "W block", (span(self.rows), span(self.cols)))
        elif self.kind == "b":
            if self.cols != (0, 0):
                raise ShapeError("bias block must have empty col range")
            _check(self.data, "b block", (span(self.rows),))
        else:
            raise ShapeError(f"bad param kind {self.kind!r}")


def forward_partial(w: ParamBlock, x: np.ndarray, b: Optional[ParamBlock] = None) -> np.ndarray:
    """z = W_block @ x_segment, plus the bias segment when the caller owns it.

    The bias is added only by the block whose col range starts at 0, so the
    full preactivation is the plain sum of partials over in-blocks.
    """
    if w.kind != "W":
        raise ShapeError("forward_partial needs a weight block")
    _check(x, "x", (span(w.cols),))
    z = w.data @ x
    if b is not None:
        if b.kind != "b" or b.rows != w.rows:
            raise ShapeError("bias block does not match weight rows")
        z = z + b.data
    return _check(z, "z", (span(w.rows),))


def relu(z: np.ndarray) -> np.ndarray:
    _check(z, "z", z.shape)
    return np.maximum(z, F32(0))


def relu_backward(gh: np.ndarray, z: np.ndarray) -> np.ndarray:
    """Gate the incoming gradient by the preactivation sign: z > 0 passes."""
    _check(gh, "gh", z.shape)
    _check(z, "z", z.shape)
    return np.where(z > 0, gh, F32(0))


def mse_partial(y: np.ndarray, t: np.ndarray) -> tuple[np.float32, np.ndarray]:
    """Sum-of-squares loss over one output segment.

    Returns (loss, gy) with loss = sum((y-t)^2) and gy = 2(y-t).
    """
    _check(y, "y", y.shape)
    _check(t, "t", y.shape)
    d = y - t
    loss = np.sum(d * d, dtype=F32)
    return loss, d + d


def backward_block(gz: np.ndarray, x: np.ndarray, w: ParamBlock) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients for one weight block: (gW, gb, gx).

    gW = gz outer x, gb = gz, gx = W^T @ gz.  Each element of gW and gx for
    this block depends on no other block, so blocked and whole-matrix
    backward agree exactly.
    """
    if w.kind != "W":
        raise ShapeError("backward_block needs a weight block")
    _check(gz, "gz", (span(w.rows),))
    _check(x, "x", (span(w.cols),))
    gw = np.outer(gz, x)
    gx = w.data.T @ gz
    return gw, gz.copy(), _check(gx, "gx", (span(w.cols),))


def sgd_update(p: np.ndarray, g: np.ndarray, eta: float) -> np.ndarray:
    _check(p, "p", p.shape)
    _check(g, "g", p.shape)
    return p - F32(eta) * g


def reduce_f32(parts: Iterable[np.ndarray]) -> np.ndarray:
    """Left-fold sum; callers pass parts in ascending block order."""
    parts = list(parts)
    if not parts:
        raise KernelError("nothing to reduce")
    return reduce(np.add, parts)
