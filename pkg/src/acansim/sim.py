"""Deterministic discrete-event engine with coroutine actors.

Actors are ``async def`` coroutines driven by the engine.  Between awaits an
actor runs atomically in virtual time; awaiting :class:`Sleep` or a tuple
space operation parks it until the engine resumes it.  All ordering comes
from the event heap, which breaks time ties by insertion sequence, so a run
is a pure function of its inputs and seeds.

Crashes are modelled by :meth:`Engine.kill`: the actor's pending resume is
cancelled, its tuple space waiter (if any) is discarded, and the coroutine
is closed at its current suspend point.  A task already taken from the space
by a killed actor is simply lost, which is exactly the semantics a crashed
processor should have.
"""

from __future__ import annotations

import heapq
import itertools
from typing import Any, Callable, Coroutine, Optional

from .tuplespace import Pattern, TupleStore


class SimError(Exception):
    pass


class DeadlockError(SimError):
    """The event heap drained while the run future was still unresolved."""


class Future:
    __slots__ = ("done", "value", "error")

    def __init__(self) -> None:
        self.done = False
        self.value: Any = None
        self.error: Optional[BaseException] = None

    def set_result(self, value: Any) -> None:
        if not self.done:
            self.done = True
            self.value = value

    def set_error(self, error: BaseException) -> None:
        if not self.done:
            self.done = True
            self.error = error

    def result(self) -> Any:
        if not self.done:
            raise SimError("future is not resolved")
        if self.error is not None:
            raise self.error
        return self.value


class _Handle:
    __slots__ = ("fn", "cancelled")

    def __init__(self, fn: Callable[[], None]) -> None:
        self.fn = fn
        self.cancelled = False

    def cancel(self) -> None:
        self.cancelled = True


class Task:
    """Handle for a spawned actor."""

    def __init__(self, engine: "Engine", coro: Coroutine, name: str) -> None:
        self.engine = engine
        self.coro = coro
        self.name = name
        self.alive = True
        self.done = Future()
        self._resume: Optional[_Handle] = None
        self._waiter: Optional["_Waiter"] = None

    def kill(self) -> None:
        self.engine.kill(self)


class Sleep:
    """Awaitable delay in virtual seconds."""

    __slots__ = ("delay",)

    def __init__(self, delay: float) -> None:
        if delay < 0:
            raise ValueError("negative sleep")
        self.delay = delay

    def __await__(self):
        yield self
        return None

    def _park(self, engine: "Engine", task: Task) -> None:
        task._resume = engine.schedule(self.delay, lambda: engine._step(task, None))


class Engine:
    def __init__(self) -> None:
        self.now = 0.0
        self._heap: list[tuple[float, int, _Handle]] = []
        self._seq = itertools.count()
        self._tasks: list[Task] = []
        self._current: Optional[Task] = None
        self.events_processed = 0

    def schedule(self, delay: float, fn: Callable[[], None]) -> _Handle:
        if delay < 0:
            raise ValueError("negative delay")
        handle = _Handle(fn)
        heapq.heappush(self._heap, (self.now + delay, next(self._seq), handle))
        return handle

    def spawn(self, coro: Coroutine, name: str = "actor") -> Task:
        task = Task(self, coro, name)
        self._tasks.append(task)
        task._resume = self.schedule(0.0, lambda: self._step(task, None))
        return task

    def kill(self, task: Task) -> None:
        if not task.alive:
            return
        if task is self._current:
            raise SimError("cannot kill the currently running task")
        task.alive = False
        if task._resume is not None:
            task._resume.cancel()
            task._resume = None
        if task._waiter is not None:
            task._waiter.abandoned = True
            task._waiter = None
        task.coro.close()
        task.done.set_result(None)

    def _step(self, task: Task, value: Any) -> None:
        if not task.alive:
            return
        task._resume = None
        task._waiter = None
        self._current = task
        try:
            request = task.coro.send(value)
        except StopIteration as stop:
            task.alive = False
            task.done.set_result(stop.value)
            return
        except BaseException as err:
            task.alive = False
            task.done.set_error(err)
            raise
        finally:
            self._current = None
        request._park(self, task)

    def run(self, until: Future, max_events: Optional[int] = None) -> Any:
        """Process events until ``until`` resolves; returns its result."""
        while not until.done:
            if not self._heap:
                parked = ", ".join(t.name for t in self._tasks if t.alive)
                raise DeadlockError(f"no runnable events; parked actors: {parked or 'none'}")
            when, _, handle = heapq.heappop(self._heap)
            if handle.cancelled:
                continue
            assert when >= self.now
            self.now = when
            self.events_processed += 1
            if max_events is not None and self.events_processed > max_events:
                raise SimError("event budget exceeded")
            handle.fn()
        return until.result()


class _Waiter:
    __slots__ = ("task", "pattern", "consume", "abandoned")

    def __init__(self, task: Task, pattern: Pattern, consume: bool) -> None:
        self.task = task
        self.pattern = pattern
        self.consume = consume
        self.abandoned = False


class _SpaceWait:
    __slots__ = ("space", "pattern", "consume")

    def __init__(self, space: "SimTupleSpace", pattern: str, consume: bool) -> None:
        self.space = space
        self.pattern = Pattern.parse(pattern)
        self.consume = consume

    def __await__(self):
        store = self.space._store
        hit = store.try_get_pat(self.pattern) if self.consume else store.try_read_pat(self.pattern)
        if hit is not None:
            return hit
        got = yield self
        return got

    def _park(self, engine: "Engine", task: Task) -> None:
        waiter = _Waiter(task, self.pattern, self.consume)
        task._waiter = waiter
        self.space._waiters.append(waiter)


class SimTupleSpace:
    """Tuple space whose blocking semantics run on the virtual clock.

    ``get``/``read`` return awaitables; when no match exists the actor parks
    and a later ``put`` wakes it through a zero-delay resume event.  Every
    matching blocked reader wakes; blocked getters are served in FIFO order,
    readers before getters when one put satisfies both.
    """

    def __init__(self, engine: Engine) -> None:
        self._engine = engine
        self._store = TupleStore()
        self._waiters: list[_Waiter] = []

    @property
    def store(self) -> TupleStore:
        return self._store

    def __len__(self) -> int:
        return len(self._store)

    def put(self, key: str, value: Any) -> None:
        self._store.put(key, value)
        self._pump()

    def _pump(self) -> None:
        changed = False
        for waiter in self._waiters:
            if waiter.abandoned or waiter.consume:
                continue
            hit = self._store.try_read_pat(waiter.pattern)
            if hit is not None:
                self._deliver(waiter, hit)
                changed = True
        for waiter in self._waiters:
            if waiter.abandoned or not waiter.consume:
                continue
            hit = self._store.try_get_pat(waiter.pattern)
            if hit is not None:
                self._deliver(waiter, hit)
                changed = True
        if changed:
            self._waiters = [w for w in self._waiters if not w.abandoned]

    def _deliver(self, waiter: _Waiter, hit: tuple[str, Any]) -> None:
        waiter.abandoned = True
        task = waiter.task
        task._waiter = None
        task._resume = self._engine.schedule(0.0, lambda: self._engine._step(task, hit))

    def get(self, pattern: str) -> _SpaceWait:
        return _SpaceWait(self, pattern, consume=True)

    def read(self, pattern: str) -> _SpaceWait:
        return _SpaceWait(self, pattern, consume=False)

    def try_get(self, pattern: str) -> Optional[tuple[str, Any]]:
        return self._store.try_get(pattern)

    def try_read(self, pattern: str) -> Optional[tuple[str, Any]]:
        return self._store.try_read(pattern)

    def count(self, pattern: str) -> int:
        return self._store.count(pattern)

    def clear(self, pattern: str) -> int:
        return self._store.clear(pattern)
