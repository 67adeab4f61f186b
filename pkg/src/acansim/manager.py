"""Manager actor: stage-gated dispatch with an adaptive reissue timeout.

The manager walks each sample through its stages, issuing every stage's
tasks in pouches of bounded size.  After each timeout window it harvests
completion markers, adapts the timeout (shrink on a fully cleared pouch,
grow otherwise), sweeps unclaimed task tuples, and reissues what is still
outstanding with a bumped attempt counter.  Duplicate completions are
harmless everywhere: repeated markers only count once, and parameter commits
consume exactly one update result per task, clearing surplus duplicates.

Commit and checkpoint happen in a single atomic step, so a crash can never
leave a sample half committed.  On (re)start the manager reads the
checkpoint cursor and re-derives stage progress from completion markers,
reissuing only the unfinished remainder.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import Optional

from . import taskgraph as tg
from .sim import Sleep, SimTupleSpace
from .taskgraph import CKPT_KEY, TASK_KEY, TaskDesc, serialize
from .taskops import ExecContext, StoreReader, param_key_for_update, total_loss


class ManagerError(Exception):
    pass


class StallError(ManagerError):
    """Dispatch made no progress for too many consecutive rounds."""


@dataclass
class DispatchConfig:
    pouch_size: int = 100
    timeout_initial: float = 1.0
    timeout_min: float = 0.05
    timeout_max: float = 60.0
    shrink: float = 0.8
    grow: float = 1.5
    max_stall_rounds: int = 1000
    max_attempts: Optional[int] = None

    def __post_init__(self) -> None:
        if self.pouch_size < 1:
            raise ManagerError("pouch_size must be >= 1")
        if not (0 < self.timeout_min <= self.timeout_initial <= self.timeout_max):
            raise ManagerError("need 0 < timeout_min <= timeout_initial <= timeout_max")
        if not (0 < self.shrink < 1 <= self.grow):
            raise ManagerError("need 0 < shrink < 1 <= grow")


def adapt_timeout(timeout: float, fraction: float, cfg: DispatchConfig) -> float:
    """Shrink when the whole pouch cleared, grow otherwise, clamped."""
    if fraction >= 1.0:
        return max(cfg.timeout_min, timeout * cfg.shrink)
    return min(cfg.timeout_max, timeout * cfg.grow)


class Manager:
    def __init__(
        self,
        space: SimTupleSpace,
        ctx: ExecContext,
        dispatch: DispatchConfig,
        dataset_size: int,
        epochs: int,
        sink,
    ) -> None:
        self.space = space
        self.ctx = ctx
        self.dispatch = dispatch
        self.dataset_size = dataset_size
        self.epochs = epochs
        self.sink = sink
        self.timeout = dispatch.timeout_initial
        self.reader = StoreReader(space)

    # --- lifecycle ---------------------------------------------------------

    async def run(self) -> dict:
        epoch, sample = self._recover()
        if self.dataset_size == 0:
            return {"epochs": 0, "samples": 0}
        while epoch < self.epochs:
            await self._run_sample(epoch, sample)
            sample += 1
            if sample >= self.dataset_size:
                epoch += 1
                sample = 0
        return {"epochs": self.epochs, "samples": self.dataset_size}

    def _recover(self) -> tuple[int, int]:
        """Resume from the checkpoint; stage progress comes from markers."""
        hit = self.space.try_read(CKPT_KEY)
        if hit is None:
            # nothing checkpointed yet: fresh start
            self.space.clear(TASK_KEY)
            return 0, 0
        rec = hit[1]
        self.timeout = float(rec["timeout"])
        swept = self.space.clear(TASK_KEY)
        self.sink.event("recover", epoch=rec["epoch"], sample=rec["sample"], swept=swept)
        return int(rec["epoch"]), int(rec["sample"])

    # --- per-sample pipeline -------------------------------------------------

    async def _run_sample(self, epoch: int, sample: int) -> None:
        for stage in tg.sample_stages(self.ctx.model):
            tasks = tg.stage_tasks(self.ctx.model, self.ctx.cost, stage, epoch, sample)
            pending = [t for t in tasks if self.space.count(tg.k_done(t)) == 0]
            self.sink.event("stage", stage=f"{stage[0]}{stage[1]}", epoch=epoch,
                            sample=sample, pending=len(pending), total=len(tasks))
            if pending:
                await self._drive(pending)
            if stage[0] == "L":
                self._record_loss(epoch, sample)
        await self._commit_and_checkpoint(epoch, sample)

    def _record_loss(self, epoch: int, sample: int) -> None:
        value = total_loss(self.reader, self.ctx, sample)
        if value is None:
            raise ManagerError(f"loss partials missing after Loss stage of {epoch}:{sample}")
        self.sink.loss(epoch, sample, float(value))

    # --- dispatch ------------------------------------------------------------

    async def _drive(self, tasks: list[TaskDesc]) -> None:
        """Issue tasks in pouches until every one has a completion marker."""
        queue = deque(tasks)
        outstanding: dict[str, TaskDesc] = {}
        stall_rounds = 0
        while queue or outstanding:
            reissued = 0
            for base in list(outstanding):
                bumped = outstanding[base].with_attempt(outstanding[base].attempt + 1)
                limit = self.dispatch.max_attempts
                if limit is not None and bumped.attempt > limit:
                    raise StallError(f"task {base} exceeded {limit} attempts")
                outstanding[base] = bumped
                self.space.put(TASK_KEY, serialize(bumped))
                reissued += 1
            while queue and len(outstanding) < self.dispatch.pouch_size:
                task = queue.popleft()
                outstanding[task.base_id] = task
                self.space.put(TASK_KEY, serialize(task))
            self.sink.pouch()
            self.sink.add_reissues(reissued)
            await Sleep(self.timeout)
            done = [b for b in outstanding if self.space.count(f"done:{b}") > 0]
            fraction = len(done) / len(outstanding)
            self.space.clear(TASK_KEY)
            for base in done:
                del outstanding[base]
            self.timeout = adapt_timeout(self.timeout, fraction, self.dispatch)
            self.sink.perf_row(self.timeout)
            self.sink.event("harvest", fraction=fraction, done=len(done),
                            left=len(outstanding), timeout=self.timeout)
            stall_rounds = 0 if done else stall_rounds + 1
            if stall_rounds > self.dispatch.max_stall_rounds:
                raise StallError(
                    f"no completions for {stall_rounds} rounds; "
                    f"{len(outstanding)} tasks outstanding, timeout {self.timeout}"
                )

    # --- commit ---------------------------------------------------------------

    async def _commit_and_checkpoint(self, epoch: int, sample: int) -> None:
        updates = tg.stage_tasks(self.ctx.model, self.ctx.cost, ("U", 0), epoch, sample)
        while True:
            missing = [u for u in updates if self.space.count(tg.k_updres(u)) == 0]
            if not missing:
                break
            # a marker with no result is treated as not done at all
            for u in missing:
                self.space.clear(tg.k_done(u))
            self.sink.event("commit-retry", epoch=epoch, sample=sample, missing=len(missing))
            await self._drive(missing)

        # atomic from here on: no awaits until the checkpoint is written
        for u in updates:
            hit = self.space.try_get(tg.k_updres(u))
            assert hit is not None
            self.space.clear(tg.k_updres(u))  # surplus duplicates
            pkey = param_key_for_update(u)
            self.space.clear(pkey)
            self.space.put(pkey, hit[1])

        for prefix in (f"z:{sample}:", f"h:{sample}:", f"y:{sample}:", f"gy:{sample}:",
                       f"gx:{sample}:", f"lossval:{sample}:", "grad:",
                       f"done:{epoch}:{sample}:"):
            self.space.clear(prefix + "*")

        nxt_epoch, nxt_sample = epoch, sample + 1
        if nxt_sample >= self.dataset_size:
            nxt_epoch, nxt_sample = epoch + 1, 0
        self.space.clear(CKPT_KEY)
        self.space.put(CKPT_KEY, {"epoch": nxt_epoch, "sample": nxt_sample,
                                  "stage": "F1", "timeout": self.timeout})
        self.sink.event("commit", epoch=epoch, sample=sample)
