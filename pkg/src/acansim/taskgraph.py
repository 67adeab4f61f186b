"""Task taxonomy, cost-bounded partitioning, and the tuple key schema.

A training step is decomposed per sample into stages: Forward and Activation
per hidden layer, Forward on the last layer, Loss, Backward from the last
layer down, then parameter Updates.  Each stage's prototype task is split
recursively until every leaf costs at most ``max_task_size``; the leaf order
of that depth-first split is the canonical issue order.

Key layout (all segments ``:``-separated, ranges written ``a-b`` for
[a, b)):

    task                                   pending task descriptors
    done:{id-without-attempt}              completion marker
    param:{l}:W:{o0}-{o1}:{i0}-{i1}        weight block
    param:{l}:b:{o0}-{o1}                  bias block
    x:{s}:{i0}-{i1}                        input sample block
    t:{s}                                  target vector
    z:{s}:{l}:{o0}-{o1}:{i0}-{i1}          partial preactivation
    h:{s}:{l}:{o0}-{o1}                    activation block
    y:{s}:{o0}-{o1}                        network output segment
    lossval:{s}:{o0}-{o1}                  loss partial
    gy:{s}:{o0}-{o1}                       loss gradient segment
    gx:{s}:{l}:{i0}-{i1}:{o0}-{o1}         partial input gradient
    grad:{l}:W:{o0}-{o1}:{i0}-{i1}         weight gradient block
    grad:{l}:b:{o0}-{o1}                   bias gradient block
    updres:{id-without-attempt}            updated parameter block
    ckpt                                   manager checkpoint record
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, replace
from enum import Enum
from functools import lru_cache
from typing import Iterator

Range = tuple[int, int]

TASK_KEY = "task"
CKPT_KEY = "ckpt"


class TaskGraphError(Exception):
    pass


class MalformedTaskError(TaskGraphError):
    pass


class PartitionError(TaskGraphError):
    """A task over the cost bound cannot be split any further."""


class TaskKind(str, Enum):
    FORWARD = "F"
    ACTIVATION = "A"
    LOSS = "L"
    BACKWARD = "B"
    UPDATE = "U"


@dataclass(frozen=True)
class ModelSpec:
    """Chain of linear layers given as (in_dim, out_dim) pairs."""

    layers: tuple[tuple[int, int], ...]

    def __post_init__(self) -> None:
        if not self.layers:
            raise TaskGraphError("model needs at least one layer")
        for n_in, n_out in self.layers:
            if n_in < 1 or n_out < 1:
                raise TaskGraphError(f"bad layer dims ({n_in}, {n_out})")
        for (_, out_prev), (n_in, _) in zip(self.layers, self.layers[1:]):
            if out_prev != n_in:
                raise TaskGraphError("layer dims do not chain")

    @property
    def depth(self) -> int:
        return len(self.layers)

    def in_dim(self, layer: int) -> int:
        return self.layers[layer - 1][0]

    def out_dim(self, layer: int) -> int:
        return self.layers[layer - 1][1]

    def to_json(self) -> list[list[int]]:
        return [list(pair) for pair in self.layers]

    @classmethod
    def from_json(cls, data) -> "ModelSpec":
        return cls(tuple((int(a), int(b)) for a, b in data))


@dataclass(frozen=True)
class CostModel:
    max_task_size: int = 256
    loss_weight: float = 2.0

    def __post_init__(self) -> None:
        if self.max_task_size < 1:
            raise TaskGraphError("max_task_size must be >= 1")
        if self.loss_weight <= 0:
            raise TaskGraphError("loss_weight must be positive")


@dataclass(frozen=True)
class TaskDesc:
    epoch: int
    sample: int
    kind: TaskKind
    layer: int
    in_range: Range  # (0, 0) for tasks without an input extent
    out_range: Range
    attempt: int = 0

    @property
    def base_id(self) -> str:
        i0, i1 = self.in_range
        o0, o1 = self.out_range
        return f"{self.epoch}:{self.sample}:{self.kind.value}:{self.layer}:{i0}-{i1}:{o0}-{o1}"

    @property
    def id(self) -> str:
        return f"{self.base_id}:{self.attempt}"

    def with_attempt(self, attempt: int) -> "TaskDesc":
        return replace(self, attempt=attempt)

    @property
    def is_bias_update(self) -> bool:
        return self.kind is TaskKind.UPDATE and self.in_range == (0, 0)


def serialize(task: TaskDesc) -> str:
    return task.id


_TASK_RE = re.compile(
    r"^(\d+):(\d+):([FALBU]):(\d+):(\d+)-(\d+):(\d+)-(\d+):(\d+)$"
)


def parse(text: str) -> TaskDesc:
    if not isinstance(text, str):
        raise MalformedTaskError(f"not a task string: {text!r}")
    m = _TASK_RE.match(text)
    if m is None:
        raise MalformedTaskError(f"bad task syntax: {text!r}")
    e, s, kind, layer, i0, i1, o0, o1, attempt = m.groups()
    task = TaskDesc(
        epoch=int(e),
        sample=int(s),
        kind=TaskKind(kind),
        layer=int(layer),
        in_range=(int(i0), int(i1)),
        out_range=(int(o0), int(o1)),
        attempt=int(attempt),
    )
    if task.layer < 1:
        raise MalformedTaskError(f"bad layer in {text!r}")
    if task.in_range[0] > task.in_range[1] or task.out_range[0] >= task.out_range[1]:
        raise MalformedTaskError(f"bad ranges in {text!r}")
    if task.in_range[0] == task.in_range[1] and task.in_range != (0, 0):
        raise MalformedTaskError(f"empty input range must be 0-0: {text!r}")
    if task.kind in (TaskKind.ACTIVATION, TaskKind.LOSS) and task.in_range != (0, 0):
        raise MalformedTaskError(f"{task.kind.value} task cannot have an input range: {text!r}")
    if task.kind in (TaskKind.FORWARD, TaskKind.BACKWARD) and task.in_range[0] >= task.in_range[1]:
        raise MalformedTaskError(f"empty input range in {text!r}")
    return task


def task_cost(task: TaskDesc, cost: CostModel) -> int:
    out_n = task.out_range[1] - task.out_range[0]
    if task.kind in (TaskKind.FORWARD, TaskKind.BACKWARD):
        return (task.in_range[1] - task.in_range[0]) * out_n
    if task.kind is TaskKind.UPDATE:
        if task.is_bias_update:
            return out_n
        return (task.in_range[1] - task.in_range[0]) * out_n
    if task.kind is TaskKind.ACTIVATION:
        return out_n
    if task.kind is TaskKind.LOSS:
        return math.ceil(cost.loss_weight * out_n)
    raise TaskGraphError(f"unknown kind {task.kind}")


def split_range(r: Range) -> tuple[Range, Range]:
    """Halve [a, b) with the first half taking the ceil."""
    a, b = r
    first = (b - a + 1) // 2
    return (a, a + first), (a + first, b)


def _children(task: TaskDesc) -> list[TaskDesc]:
    two_dim = task.kind in (TaskKind.FORWARD, TaskKind.BACKWARD) or (
        task.kind is TaskKind.UPDATE and not task.is_bias_update
    )
    o_splittable = task.out_range[1] - task.out_range[0] > 1
    if two_dim:
        i_splittable = task.in_range[1] - task.in_range[0] > 1
        if i_splittable and o_splittable:
            (ia, ib) = split_range(task.in_range)
            (oa, ob) = split_range(task.out_range)
            return [
                replace(task, in_range=ia, out_range=oa),
                replace(task, in_range=ia, out_range=ob),
                replace(task, in_range=ib, out_range=oa),
                replace(task, in_range=ib, out_range=ob),
            ]
        if i_splittable:
            ia, ib = split_range(task.in_range)
            return [replace(task, in_range=ia), replace(task, in_range=ib)]
    if o_splittable:
        oa, ob = split_range(task.out_range)
        return [replace(task, out_range=oa), replace(task, out_range=ob)]
    return []


def partition(task: TaskDesc, cost: CostModel) -> list[TaskDesc]:
    """Depth-first split until every leaf fits the cost bound."""
    if task_cost(task, cost) <= cost.max_task_size:
        return [task]
    children = _children(task)
    if not children:
        raise PartitionError(
            f"task {task.base_id} costs {task_cost(task, cost)} > "
            f"{cost.max_task_size} and cannot be split"
        )
    leaves: list[TaskDesc] = []
    for child in children:
        leaves.extend(partition(child, cost))
    return leaves


# --- stage enumeration ---------------------------------------------------

Stage = tuple[str, int]  # ("F", l) ("A", l) ("L", depth) ("B", l) ("U", 0)


def sample_stages(model: ModelSpec) -> list[Stage]:
    stages: list[Stage] = []
    for layer in range(1, model.depth + 1):
        stages.append(("F", layer))
        if layer < model.depth:
            stages.append(("A", layer))
    stages.append(("L", model.depth))
    for layer in range(model.depth, 0, -1):
        stages.append(("B", layer))
    stages.append(("U", 0))
    return stages


def stage_prototypes(model: ModelSpec, stage: Stage, epoch: int, sample: int) -> list[TaskDesc]:
    name, layer = stage
    if name == "F":
        return [TaskDesc(epoch, sample, TaskKind.FORWARD, layer,
                         (0, model.in_dim(layer)), (0, model.out_dim(layer)))]
    if name == "A":
        return [TaskDesc(epoch, sample, TaskKind.ACTIVATION, layer,
                         (0, 0), (0, model.out_dim(layer)))]
    if name == "L":
        return [TaskDesc(epoch, sample, TaskKind.LOSS, model.depth,
                         (0, 0), (0, model.out_dim(model.depth)))]
    if name == "B":
        return [TaskDesc(epoch, sample, TaskKind.BACKWARD, layer,
                         (0, model.in_dim(layer)), (0, model.out_dim(layer)))]
    if name == "U":
        protos = []
        for l in range(1, model.depth + 1):
            protos.append(TaskDesc(epoch, sample, TaskKind.UPDATE, l,
                                   (0, model.in_dim(l)), (0, model.out_dim(l))))
            protos.append(TaskDesc(epoch, sample, TaskKind.UPDATE, l,
                                   (0, 0), (0, model.out_dim(l))))
        return protos
    raise TaskGraphError(f"unknown stage {stage}")


@lru_cache(maxsize=None)
def _stage_leaves(model: ModelSpec, cost: CostModel, stage: Stage) -> tuple[TaskDesc, ...]:
    leaves: list[TaskDesc] = []
    for proto in stage_prototypes(model, stage, 0, 0):
        leaves.extend(partition(proto, cost))
    return tuple(leaves)


def stage_tasks(model: ModelSpec, cost: CostModel, stage: Stage, epoch: int, sample: int) -> list[TaskDesc]:
    return [replace(t, epoch=epoch, sample=sample) for t in _stage_leaves(model, cost, stage)]


def sample_tasks(model: ModelSpec, cost: CostModel, epoch: int, sample: int) -> Iterator[TaskDesc]:
    for stage in sample_stages(model):
        yield from stage_tasks(model, cost, stage, epoch, sample)


# --- block grids ----------------------------------------------------------

@lru_cache(maxsize=None)
def weight_grid(model: ModelSpec, cost: CostModel, layer: int) -> tuple[tuple[Range, Range], ...]:
    """(in_range, out_range) leaves of the layer's Forward prototype split."""
    proto = TaskDesc(0, 0, TaskKind.FORWARD, layer,
                     (0, model.in_dim(layer)), (0, model.out_dim(layer)))
    return tuple((t.in_range, t.out_range) for t in partition(proto, cost))


@lru_cache(maxsize=None)
def bias_grad_blocks(model: ModelSpec, cost: CostModel, layer: int) -> tuple[Range, ...]:
    """Out ranges of the weight-grid leaves that own input column 0, ascending.

    Exactly one such leaf covers each output row, so these tile the output
    axis; they are the blocks under which bias gradients are published.
    """
    return tuple(sorted({o for i, o in weight_grid(model, cost, layer) if i[0] == 0}))


@lru_cache(maxsize=None)
def act_grid(model: ModelSpec, cost: CostModel, layer: int) -> tuple[Range, ...]:
    proto = TaskDesc(0, 0, TaskKind.ACTIVATION, layer, (0, 0), (0, model.out_dim(layer)))
    return tuple(t.out_range for t in partition(proto, cost))


@lru_cache(maxsize=None)
def bias_grid(model: ModelSpec, cost: CostModel, layer: int) -> tuple[Range, ...]:
    proto = TaskDesc(0, 0, TaskKind.UPDATE, layer, (0, 0), (0, model.out_dim(layer)))
    return tuple(t.out_range for t in partition(proto, cost))


@lru_cache(maxsize=None)
def loss_grid(model: ModelSpec, cost: CostModel) -> tuple[Range, ...]:
    proto = TaskDesc(0, 0, TaskKind.LOSS, model.depth, (0, 0), (0, model.out_dim(model.depth)))
    return tuple(t.out_range for t in partition(proto, cost))


# --- key builders ---------------------------------------------------------

def fmt_range(r: Range) -> str:
    return f"{r[0]}-{r[1]}"


def k_done(task: TaskDesc) -> str:
    return f"done:{task.base_id}"


def k_updres(task: TaskDesc) -> str:
    return f"updres:{task.base_id}"


def k_param(layer: int, kind: str, out_range: Range, in_range: Range | None = None) -> str:
    if kind == "W":
        assert in_range is not None
        return f"param:{layer}:W:{fmt_range(out_range)}:{fmt_range(in_range)}"
    return f"param:{layer}:b:{fmt_range(out_range)}"


def k_grad(layer: int, kind: str, out_range: Range, in_range: Range | None = None) -> str:
    if kind == "W":
        assert in_range is not None
        return f"grad:{layer}:W:{fmt_range(out_range)}:{fmt_range(in_range)}"
    return f"grad:{layer}:b:{fmt_range(out_range)}"


def k_x(sample: int, in_range: Range) -> str:
    return f"x:{sample}:{fmt_range(in_range)}"


def k_t(sample: int) -> str:
    return f"t:{sample}"


def k_z(sample: int, layer: int, out_range: Range, in_range: Range) -> str:
    return f"z:{sample}:{layer}:{fmt_range(out_range)}:{fmt_range(in_range)}"


def k_h(sample: int, layer: int, out_range: Range) -> str:
    return f"h:{sample}:{layer}:{fmt_range(out_range)}"


def k_y(sample: int, out_range: Range) -> str:
    return f"y:{sample}:{fmt_range(out_range)}"


def k_lossval(sample: int, out_range: Range) -> str:
    return f"lossval:{sample}:{fmt_range(out_range)}"


def k_gy(sample: int, out_range: Range) -> str:
    return f"gy:{sample}:{fmt_range(out_range)}"


def k_gx(sample: int, layer: int, in_range: Range, out_range: Range) -> str:
    return f"gx:{sample}:{layer}:{fmt_range(in_range)}:{fmt_range(out_range)}"
