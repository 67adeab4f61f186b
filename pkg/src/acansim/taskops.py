"""Task execution: input gathering, kernels, and output publication.

This module is the single source of truth for what a task reads, computes,
and writes.  Handlers run it against the live tuple space; the sequential
reference trainer runs it against a plain dict.  Both therefore perform the
same float32 operations in the same order, which is what makes the
distributed result reproducible bit for bit.

Partial results that must be combined (z and gx over weight-grid leaves)
are accumulated in the grid's canonical leaf order, so every output position
sees its contributions in the same sequence on every path.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Optional, Protocol

import numpy as np

from . import taskgraph as tg
from .kernels import F32, ParamBlock, backward_block, forward_partial, mse_partial, reduce_f32, relu, relu_backward, sgd_update
from .taskgraph import CostModel, ModelSpec, Range, TaskDesc, TaskKind


class TaskOpError(Exception):
    pass


class AssemblyError(TaskOpError):
    """Grid blocks failed to tile a requested segment; indicates a bug."""


class Reader(Protocol):
    def head(self, key: str) -> Optional[Any]:
        """Value of the oldest tuple under exactly this key, or None."""


class StoreReader:
    """Reader over any tuple space exposing try_read."""

    def __init__(self, space) -> None:
        self._space = space

    def head(self, key: str) -> Optional[Any]:
        hit = self._space.try_read(key)
        return None if hit is None else hit[1]


class DictReader:
    def __init__(self, data: dict) -> None:
        self._data = data

    def head(self, key: str) -> Optional[Any]:
        return self._data.get(key)


ACTIVATIONS = ("relu", "identity")


@dataclass
class ExecContext:
    """Everything a worker needs to know to execute tasks for one model."""

    model: ModelSpec
    cost: CostModel
    eta: float
    activation: str = "relu"

    def __post_init__(self) -> None:
        if self.activation not in ACTIVATIONS:
            raise TaskOpError(f"unknown activation {self.activation!r}")
        if not (self.eta > 0):
            raise TaskOpError("eta must be positive")

    # grid shorthands, all cached at the taskgraph level
    def w_grid(self, layer: int):
        return tg.weight_grid(self.model, self.cost, layer)

    def bias_grad_blocks(self, layer: int):
        return tg.bias_grad_blocks(self.model, self.cost, layer)

    def act_grid(self, layer: int):
        return tg.act_grid(self.model, self.cost, layer)

    def bias_grid(self, layer: int):
        return tg.bias_grid(self.model, self.cost, layer)

    def loss_grid(self):
        return tg.loss_grid(self.model, self.cost)

    def input_grid(self, layer: int) -> tuple[Range, ...]:
        """Block ranges of the vector feeding layer ``layer``."""
        if layer == 1:
            return ((0, self.model.in_dim(1)),)
        return self.act_grid(layer - 1)

    def input_key(self, sample: int, layer: int, block: Range) -> str:
        if layer == 1:
            return tg.k_x(sample, block)
        return tg.k_h(sample, layer - 1, block)


# --- segment assembly -----------------------------------------------------

def _overlapping(grid, lo: int, hi: int) -> list[Range]:
    return [r for r in grid if r[0] < hi and r[1] > lo]


def assemble(lo: int, hi: int, grid, fetch) -> Optional[np.ndarray]:
    """Build the segment [lo, hi) out of grid blocks via ``fetch``.

    Every range in play descends from one binary subdivision tree, so the
    requested segment either sits inside a single block (slice) or is tiled
    exactly by whole blocks (concatenate).  ``fetch`` returning None for any
    needed block makes the whole assembly return None.
    """
    blocks = _overlapping(grid, lo, hi)
    if not blocks:
        raise AssemblyError(f"no blocks cover [{lo}, {hi})")
    if len(blocks) == 1 and blocks[0][0] <= lo and hi <= blocks[0][1]:
        a, _ = blocks[0]
        data = fetch(blocks[0])
        if data is None:
            return None
        return data[lo - a: hi - a]
    parts = []
    pos = lo
    for a, b in blocks:
        if a != pos:
            raise AssemblyError(f"blocks do not tile [{lo}, {hi}) at {pos}")
        data = fetch((a, b))
        if data is None:
            return None
        parts.append(data)
        pos = b
    if pos != hi:
        raise AssemblyError(f"blocks do not tile [{lo}, {hi}) at {pos}")
    return np.concatenate(parts)


def _keys_for(lo: int, hi: int, grid, keyfn) -> list[str]:
    blocks = _overlapping(grid, lo, hi)
    return [keyfn(b) for b in blocks]


def _layer_input(ctx: ExecContext, reader: Reader, sample: int, layer: int, rng: Range):
    grid = ctx.input_grid(layer)
    return assemble(rng[0], rng[1], grid,
                    lambda b: reader.head(ctx.input_key(sample, layer, b)))


def _layer_input_keys(ctx: ExecContext, sample: int, layer: int, rng: Range) -> list[str]:
    grid = ctx.input_grid(layer)
    return _keys_for(rng[0], rng[1], grid, lambda b: ctx.input_key(sample, layer, b))


def _accumulate(lo: int, hi: int, contributions, fetch) -> Optional[np.ndarray]:
    """Sum block contributions into the segment [lo, hi).

    ``contributions`` yields (block_range, key); blocks may repeat a position
    (the weight grid can mix granularities when dimensions split unevenly),
    and every overlapping part is added.  Iteration order is the grid's leaf
    order, which keeps per-position summation identical everywhere this runs.
    """
    buf = np.zeros(hi - lo, dtype=F32)
    for (a, b), key in contributions:
        val = fetch(key)
        if val is None:
            return None
        s, e = max(lo, a), min(hi, b)
        buf[s - lo: e - lo] += val[s - a: e - a]
    return buf


def _z_leaves(ctx: ExecContext, sample: int, layer: int, rng: Range):
    """(out_block, z key) of weight-grid leaves touching out positions [rng)."""
    return [(o, tg.k_z(sample, layer, o, i))
            for i, o in ctx.w_grid(layer) if o[0] < rng[1] and o[1] > rng[0]]


def _preactivation(ctx: ExecContext, reader: Reader, sample: int, layer: int, rng: Range):
    """Sum z partials over every weight-grid leaf covering [rng)."""
    return _accumulate(rng[0], rng[1], _z_leaves(ctx, sample, layer, rng), reader.head)


def _preactivation_keys(ctx: ExecContext, sample: int, layer: int, rng: Range) -> list[str]:
    return [key for _, key in _z_leaves(ctx, sample, layer, rng)]


def _gx_leaves(ctx: ExecContext, sample: int, layer: int, rng: Range):
    """(in_block, gx key) of layer+1 leaves touching input positions [rng)."""
    return [(i, tg.k_gx(sample, layer + 1, i, o))
            for i, o in ctx.w_grid(layer + 1) if i[0] < rng[1] and i[1] > rng[0]]


def _incoming_grad(ctx: ExecContext, reader: Reader, sample: int, layer: int, rng: Range):
    """Gradient flowing into layer ``layer`` outputs over ``rng``.

    For the last layer this is the loss gradient gy; otherwise it is the sum
    of gx partials published by layer+1's backward leaves.
    """
    if layer == ctx.model.depth:
        return assemble(rng[0], rng[1], ctx.loss_grid(),
                        lambda b: reader.head(tg.k_gy(sample, b)))
    return _accumulate(rng[0], rng[1], _gx_leaves(ctx, sample, layer, rng), reader.head)


def _incoming_grad_keys(ctx: ExecContext, sample: int, layer: int, rng: Range) -> list[str]:
    if layer == ctx.model.depth:
        return _keys_for(rng[0], rng[1], ctx.loss_grid(), lambda b: tg.k_gy(sample, b))
    return [key for _, key in _gx_leaves(ctx, sample, layer, rng)]


# --- preconditions and execution -------------------------------------------

def required_keys(task: TaskDesc, ctx: ExecContext) -> list[str]:
    """Exact keys whose presence makes the task executable.

    The enumeration mirrors run_task's reads; a task runs successfully if
    and only if every key listed here holds a tuple.
    """
    s, l = task.sample, task.layer
    kind = task.kind
    if kind is TaskKind.FORWARD:
        keys = [tg.k_param(l, "W", task.out_range, task.in_range)]
        keys += _layer_input_keys(ctx, s, l, task.in_range)
        if task.in_range[0] == 0:
            keys += _keys_for(task.out_range[0], task.out_range[1], ctx.bias_grid(l),
                              lambda b: tg.k_param(l, "b", b))
        return keys
    if kind is TaskKind.ACTIVATION:
        return _preactivation_keys(ctx, s, l, task.out_range)
    if kind is TaskKind.LOSS:
        return _preactivation_keys(ctx, s, l, task.out_range) + [tg.k_t(s)]
    if kind is TaskKind.BACKWARD:
        keys = [tg.k_param(l, "W", task.out_range, task.in_range)]
        keys += _incoming_grad_keys(ctx, s, l, task.out_range)
        if l < ctx.model.depth and ctx.activation == "relu":
            keys += _preactivation_keys(ctx, s, l, task.out_range)
        keys += _layer_input_keys(ctx, s, l, task.in_range)
        return keys
    if kind is TaskKind.UPDATE:
        if task.is_bias_update:
            keys = [tg.k_param(l, "b", task.out_range)]
            keys += _keys_for(task.out_range[0], task.out_range[1], ctx.bias_grad_blocks(l),
                              lambda b: tg.k_grad(l, "b", b))
            return keys
        return [
            tg.k_param(l, "W", task.out_range, task.in_range),
            tg.k_grad(l, "W", task.out_range, task.in_range),
        ]
    raise TaskOpError(f"unknown kind {kind}")


def run_task(task: TaskDesc, ctx: ExecContext, reader: Reader) -> Optional[list[tuple[str, Any]]]:
    """Execute one task; returns the (key, value) outputs to publish.

    Returns None when any input is missing, which callers treat as "inputs
    vanished, abandon silently".  Raises on structural violations (shape
    mismatches, unknown kinds) since those are bugs, not races.
    """
    s, l = task.sample, task.layer
    kind = task.kind

    if kind is TaskKind.FORWARD:
        w_data = reader.head(tg.k_param(l, "W", task.out_range, task.in_range))
        x_seg = _layer_input(ctx, reader, s, l, task.in_range)
        if w_data is None or x_seg is None:
            return None
        w = ParamBlock(l, "W", task.out_range, task.in_range, w_data)
        b = None
        if task.in_range[0] == 0:
            b_seg = assemble(task.out_range[0], task.out_range[1], ctx.bias_grid(l),
                             lambda blk: reader.head(tg.k_param(l, "b", blk)))
            if b_seg is None:
                return None
            b = ParamBlock(l, "b", task.out_range, (0, 0), b_seg)
        z = forward_partial(w, x_seg, b)
        return [(tg.k_z(s, l, task.out_range, task.in_range), z)]

    if kind is TaskKind.ACTIVATION:
        z = _preactivation(ctx, reader, s, l, task.out_range)
        if z is None:
            return None
        h = relu(z) if ctx.activation == "relu" else z.copy()
        return [(tg.k_h(s, l, task.out_range), h)]

    if kind is TaskKind.LOSS:
        y = _preactivation(ctx, reader, s, l, task.out_range)
        t_full = reader.head(tg.k_t(s))
        if y is None or t_full is None:
            return None
        t_seg = t_full[task.out_range[0]: task.out_range[1]]
        loss, gy = mse_partial(y, t_seg)
        return [
            (tg.k_y(s, task.out_range), y),
            (tg.k_lossval(s, task.out_range), float(loss)),
            (tg.k_gy(s, task.out_range), gy),
        ]

    if kind is TaskKind.BACKWARD:
        gh = _incoming_grad(ctx, reader, s, l, task.out_range)
        w_data = reader.head(tg.k_param(l, "W", task.out_range, task.in_range))
        x_seg = _layer_input(ctx, reader, s, l, task.in_range)
        if gh is None or w_data is None or x_seg is None:
            return None
        if l < ctx.model.depth and ctx.activation == "relu":
            z = _preactivation(ctx, reader, s, l, task.out_range)
            if z is None:
                return None
            gz = relu_backward(gh, z)
        else:
            gz = gh
        w = ParamBlock(l, "W", task.out_range, task.in_range, w_data)
        gw, gb, gx = backward_block(gz, x_seg, w)
        outs: list[tuple[str, Any]] = [(tg.k_grad(l, "W", task.out_range, task.in_range), gw)]
        if task.in_range[0] == 0:
            outs.append((tg.k_grad(l, "b", task.out_range), gb))
        outs.append((tg.k_gx(s, l, task.in_range, task.out_range), gx))
        return outs

    if kind is TaskKind.UPDATE:
        if task.is_bias_update:
            p = reader.head(tg.k_param(l, "b", task.out_range))
            g = assemble(task.out_range[0], task.out_range[1], ctx.bias_grad_blocks(l),
                         lambda blk: reader.head(tg.k_grad(l, "b", blk)))
            if p is None or g is None:
                return None
        else:
            p = reader.head(tg.k_param(l, "W", task.out_range, task.in_range))
            g = reader.head(tg.k_grad(l, "W", task.out_range, task.in_range))
            if p is None or g is None:
                return None
        return [(tg.k_updres(task), sgd_update(p, g, ctx.eta))]

    raise TaskOpError(f"unknown kind {kind}")


def param_key_for_update(task: TaskDesc) -> str:
    """Where the committed result of an Update task lives."""
    if task.is_bias_update:
        return tg.k_param(task.layer, "b", task.out_range)
    return tg.k_param(task.layer, "W", task.out_range, task.in_range)


def total_loss(reader: Reader, ctx: ExecContext, sample: int) -> Optional[np.float32]:
    """Sum loss partials in ascending loss-grid order, float32 accumulate."""
    vals = []
    for block in ctx.loss_grid():
        v = reader.head(tg.k_lossval(sample, block))
        if v is None:
            return None
        vals.append(F32(v))
    return reduce_f32(vals) if len(vals) > 1 else vals[0]


def validate_task(task: TaskDesc, ctx: ExecContext) -> bool:
    """Structural sanity of a parsed task against the model."""
    m = ctx.model
    if not (1 <= task.layer <= m.depth):
        return False
    o0, o1 = task.out_range
    if not (0 <= o0 < o1 <= m.out_dim(task.layer)):
        return False
    if task.kind in (TaskKind.FORWARD, TaskKind.BACKWARD) or (
        task.kind is TaskKind.UPDATE and not task.is_bias_update
    ):
        i0, i1 = task.in_range
        if not (0 <= i0 < i1 <= m.in_dim(task.layer)):
            return False
    if task.kind is TaskKind.LOSS and task.layer != m.depth:
        return False
    if task.kind is TaskKind.ACTIVATION and task.layer >= m.depth:
        return False
    return True
