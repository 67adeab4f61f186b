"""Handler actor: take a task, check it, sleep its cost, publish results.

A handler is deliberately stateless between tasks.  Everything it publishes
happens in one atomic step after the execution sleep, with the completion
marker written last, so a crash at any await point loses at most the task it
had claimed; the Manager's timeout dispatch covers that loss.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .sim import Sleep, SimTupleSpace
from .taskgraph import CKPT_KEY, TASK_KEY, MalformedTaskError, k_done, parse, task_cost
from .taskops import ExecContext, StoreReader, required_keys, run_task, validate_task

ON_UNREADY = ("store", "discard")


@dataclass
class HandlerState:
    """Mutable per-slot state; the scenario mutates level/speed on the fly."""

    ident: int
    level: float
    speed: float  # work units per virtual second
    capacity: int


@dataclass
class HandlerStats:
    """Aggregate counters across all handler incarnations in a run."""

    executed: int = 0
    stored_unready: int = 0
    discarded_unready: int = 0
    refused_capacity: int = 0
    protocol_errors: int = 0
    stale_drops: int = 0
    vanished: int = 0
    by_kind: dict = field(default_factory=dict)

    def note_kind(self, kind: str) -> None:
        self.by_kind[kind] = self.by_kind.get(kind, 0) + 1


class Handler:
    def __init__(
        self,
        space: SimTupleSpace,
        ctx: ExecContext,
        state: HandlerState,
        stats: HandlerStats,
        *,
        overhead: float = 0.001,
        retry_delay: float = 0.01,
        on_unready: str = "store",
    ) -> None:
        if on_unready not in ON_UNREADY:
            raise ValueError(f"on_unready must be one of {ON_UNREADY}")
        self.space = space
        self.ctx = ctx
        self.state = state
        self.stats = stats
        self.overhead = overhead
        self.retry_delay = retry_delay
        self.on_unready = on_unready
        self.reader = StoreReader(space)

    async def run(self) -> None:
        while True:
            _, raw = await self.space.get(TASK_KEY)
            await Sleep(self.overhead)
            try:
                task = parse(raw)
                if not validate_task(task, self.ctx):
                    raise MalformedTaskError(f"task does not fit the model: {raw!r}")
            except MalformedTaskError:
                self.stats.protocol_errors += 1
                continue
            cost = task_cost(task, self.ctx.cost)
            if cost > self.state.capacity:
                # too big for this handler; put it back for a larger one
                self.stats.refused_capacity += 1
                self.space.put(TASK_KEY, raw)
                continue
            if not self._ready(task):
                if self.on_unready == "store":
                    self.stats.stored_unready += 1
                    await Sleep(self.retry_delay)
                    self.space.put(TASK_KEY, raw)
                else:
                    self.stats.discarded_unready += 1
                continue
            await Sleep(cost / self.state.speed)
            self._finish(task)

    def _ready(self, task) -> bool:
        return all(self.space.count(k) > 0 for k in required_keys(task, self.ctx))

    def _finish(self, task) -> None:
        # single atomic step: stale check, recompute from live inputs,
        # publish outputs, completion marker last
        hit = self.space.try_read(CKPT_KEY)
        if hit is not None:
            rec = hit[1]
            if (task.epoch, task.sample) < (rec["epoch"], rec["sample"]):
                self.stats.stale_drops += 1
                return
        outs = run_task(task, self.ctx, self.reader)
        if outs is None:
            # inputs vanished while we slept; someone moved the run forward
            self.stats.vanished += 1
            return
        for key, value in outs:
            self.space.put(key, value)
        self.space.put(k_done(task), task.attempt)
        self.stats.executed += 1
        self.stats.note_kind(task.kind.value)
