"""Scenario assembly: seeds, dataset, fault schedules, metrics, supervisor.

A run is a pure function of its :class:`RunConfig`.  The seed feeds three
independent RNG streams (dataset, parameter init, fault schedule), so the
training problem stays fixed while fault behaviour can be varied, and two
runs with the same config produce identical metrics row for row.

The supervisor owns everything that must survive crashes: it seeds the tuple
space, spawns handler and manager actors, drives the fault schedule on the
virtual clock, and collects metrics into a sink that no crash can touch.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Any, Optional

import numpy as np

from . import taskgraph as tg
from .handler import Handler, HandlerState, HandlerStats
from .kernels import F32
from .manager import DispatchConfig, Manager, StallError
from .sim import Engine, Future, SimTupleSpace, Task
from .taskgraph import CKPT_KEY, CostModel, ModelSpec
from .taskops import ExecContext


class ScenarioError(Exception):
    pass


def default_model() -> ModelSpec:
    return ModelSpec(((256, 256), (256, 1)))


@dataclass
class RunConfig:
    seed: int = 42
    model: ModelSpec = field(default_factory=default_model)
    cost: CostModel = field(default_factory=CostModel)
    dispatch: DispatchConfig = field(default_factory=DispatchConfig)
    eta: float = 5e-3
    activation: str = "relu"
    dataset_size: int = 100
    epochs: int = 2
    handler_count: int = 4
    speed_levels: tuple[float, ...] = (1.0, 5.0, 10.0)
    initial_levels: Optional[tuple[float, ...]] = None  # None: draw per handler
    speed_scale: Optional[float] = None  # None: 16 * max_task_size per level unit
    speed_change_period: float = 5.0
    speed_change_prob: float = 0.0
    handler_crash_period: float = 5.0
    handler_crash_prob: float = 0.0
    manager_crash_period: float = 5.0
    manager_crash_prob: float = 0.0
    manager_revival_delay: float = 0.1
    handler_capacity: Optional[int] = None  # None: max_task_size
    task_overhead: float = 0.001
    retry_delay: float = 0.01
    on_unready: str = "store"
    max_events: Optional[int] = None

    def __post_init__(self) -> None:
        if self.dataset_size < 0 or self.epochs < 0:
            raise ScenarioError("dataset_size and epochs must be >= 0")
        if self.handler_count < 1:
            raise ScenarioError("need at least one handler")
        if not self.speed_levels or any(v <= 0 for v in self.speed_levels):
            raise ScenarioError("speed levels must be positive")
        if self.initial_levels is not None and len(self.initial_levels) != self.handler_count:
            raise ScenarioError("initial_levels must match handler_count")
        for prob in (self.speed_change_prob, self.handler_crash_prob, self.manager_crash_prob):
            if not (0.0 <= prob <= 1.0):
                raise ScenarioError("probabilities must be in [0, 1]")

    def resolved_speed_scale(self) -> float:
        # Calibrated so a full pouch drains well inside one speed-shuffle
        # period even at the lowest level; keeps the adaptive timeout
        # tracking power instead of lagging a whole shuffle behind it.
        if self.speed_scale is not None:
            return float(self.speed_scale)
        return float(16 * self.cost.max_task_size)

    def resolved_capacity(self) -> int:
        return self.cost.max_task_size if self.handler_capacity is None else self.handler_capacity

    def to_json(self) -> dict:
        out = {
            "seed": self.seed,
            "model": self.model.to_json(),
            "max_task_size": self.cost.max_task_size,
            "loss_weight": self.cost.loss_weight,
            "pouch_size": self.dispatch.pouch_size,
            "timeout_initial": self.dispatch.timeout_initial,
            "timeout_min": self.dispatch.timeout_min,
            "timeout_max": self.dispatch.timeout_max,
            "max_stall_rounds": self.dispatch.max_stall_rounds,
            "eta": self.eta,
            "activation": self.activation,
            "dataset_size": self.dataset_size,
            "epochs": self.epochs,
            "handler_count": self.handler_count,
            "speed_levels": list(self.speed_levels),
            "initial_levels": list(self.initial_levels) if self.initial_levels else None,
            "speed_scale": self.speed_scale,
            "speed_change_period": self.speed_change_period,
            "speed_change_prob": self.speed_change_prob,
            "handler_crash_period": self.handler_crash_period,
            "handler_crash_prob": self.handler_crash_prob,
            "manager_crash_period": self.manager_crash_period,
            "manager_crash_prob": self.manager_crash_prob,
            "manager_revival_delay": self.manager_revival_delay,
            "handler_capacity": self.handler_capacity,
            "task_overhead": self.task_overhead,
            "retry_delay": self.retry_delay,
            "on_unready": self.on_unready,
        }
        return out

    _JSON_KEYS = frozenset((
        "seed", "model", "max_task_size", "loss_weight", "pouch_size",
        "timeout_initial", "timeout_min", "timeout_max", "max_stall_rounds",
        "eta", "activation", "dataset_size", "epochs", "handler_count",
        "speed_levels", "initial_levels", "speed_scale", "speed_change_period",
        "speed_change_prob", "handler_crash_period", "handler_crash_prob",
        "manager_crash_period", "manager_crash_prob", "manager_revival_delay",
        "handler_capacity", "task_overhead", "retry_delay", "on_unready",
    ))

    @classmethod
    def from_json(cls, data: dict) -> "RunConfig":
        known = set(data)
        unknown = known - cls._JSON_KEYS
        if unknown:
            raise ScenarioError(f"unknown config keys: {sorted(unknown)}")
        cost = CostModel(
            max_task_size=int(data.get("max_task_size", 256)),
            loss_weight=float(data.get("loss_weight", 2.0)),
        )
        dispatch = DispatchConfig(
            pouch_size=int(data.get("pouch_size", 100)),
            timeout_initial=float(data.get("timeout_initial", 1.0)),
            timeout_min=float(data.get("timeout_min", 0.05)),
            timeout_max=float(data.get("timeout_max", 60.0)),
            max_stall_rounds=int(data.get("max_stall_rounds", 1000)),
        )
        kwargs: dict[str, Any] = {}
        model = data.get("model")
        if model is not None:
            kwargs["model"] = ModelSpec.from_json(model)
        simple = (
            "seed", "eta", "activation", "dataset_size", "epochs", "handler_count",
            "speed_scale", "speed_change_period", "speed_change_prob",
            "handler_crash_period", "handler_crash_prob", "manager_crash_period",
            "manager_crash_prob", "manager_revival_delay", "handler_capacity",
            "task_overhead", "retry_delay", "on_unready",
        )
        for name in simple:
            if name in known and data[name] is not None:
                kwargs[name] = data[name]
        if "speed_levels" in known:
            kwargs["speed_levels"] = tuple(float(v) for v in data["speed_levels"])
        if data.get("initial_levels") is not None:
            kwargs["initial_levels"] = tuple(float(v) for v in data["initial_levels"])
        if "seed" in kwargs:
            kwargs["seed"] = int(kwargs["seed"])
        return cls(cost=cost, dispatch=dispatch, **kwargs)


EXPERIMENTS = ("exp1", "exp2", "exp3")


def experiment_config(name: str, seed: int = 42) -> RunConfig:
    """The three canonical runs: steady, shifting speeds, full faults."""
    if name == "exp1":
        return RunConfig(
            seed=seed,
            dataset_size=100,
            epochs=2,
            speed_levels=(10.0,),
            initial_levels=(10.0, 10.0, 10.0, 10.0),
        )
    if name == "exp2":
        return RunConfig(
            seed=seed,
            dataset_size=20,
            epochs=3,
            speed_change_prob=1.0,
        )
    if name == "exp3":
        base = experiment_config("exp2", seed)
        return replace(base, handler_crash_prob=1.0, manager_crash_prob=1.0)
    raise ScenarioError(f"unknown experiment {name!r}; pick from {EXPERIMENTS}")


# --- data and parameters ----------------------------------------------------

def gen_dataset(model: ModelSpec, count: int, rng: np.random.Generator):
    """Linear teacher data: t = W* x + b*, x ~ N(0,1), W* scaled by 1/sqrt(N).

    Returns (samples, (w_star, b_star)) with float32 arrays throughout.
    """
    n_in = model.in_dim(1)
    n_out = model.out_dim(model.depth)
    w_star = (rng.standard_normal((n_out, n_in)) / np.sqrt(n_in)).astype(F32)
    b_star = rng.standard_normal(n_out).astype(F32)
    samples = []
    for _ in range(count):
        x = rng.standard_normal(n_in).astype(F32)
        t = (w_star @ x + b_star).astype(F32)
        samples.append((x, t))
    return samples, (w_star, b_star)


def init_params(model: ModelSpec, cost: CostModel, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Initial parameter blocks keyed by their tuple keys.

    Weights are uniform in (-1/sqrt(in_dim), +1/sqrt(in_dim)), biases zero.
    Full matrices are drawn first and then sliced along the block grids, so
    the blocking never changes the initialization.
    """
    blocks: dict[str, np.ndarray] = {}
    for layer in range(1, model.depth + 1):
        n_in, n_out = model.in_dim(layer), model.out_dim(layer)
        bound = 1.0 / np.sqrt(n_in)
        w = rng.uniform(-bound, bound, (n_out, n_in)).astype(F32)
        b = np.zeros(n_out, dtype=F32)
        for in_range, out_range in tg.weight_grid(model, cost, layer):
            blocks[tg.k_param(layer, "W", out_range, in_range)] = \
                w[out_range[0]:out_range[1], in_range[0]:in_range[1]].copy()
        for out_range in tg.bias_grid(model, cost, layer):
            blocks[tg.k_param(layer, "b", out_range)] = b[out_range[0]:out_range[1]].copy()
    return blocks


def param_keys(model: ModelSpec, cost: CostModel) -> list[str]:
    keys = []
    for layer in range(1, model.depth + 1):
        for in_range, out_range in tg.weight_grid(model, cost, layer):
            keys.append(tg.k_param(layer, "W", out_range, in_range))
        for out_range in tg.bias_grid(model, cost, layer):
            keys.append(tg.k_param(layer, "b", out_range))
    return keys


# --- metrics -----------------------------------------------------------------

class MetricsSink:
    """Crash-proof run telemetry owned by the supervisor.

    Loss rows are deduplicated on (epoch, sample) because a revived manager
    may observe the same Loss completion again.
    """

    def __init__(self, engine: Engine, power_fn) -> None:
        self.engine = engine
        self.power_fn = power_fn
        self.loss_rows: list[tuple[int, int, float, float]] = []
        self.perf_rows: list[tuple[float, float, float, int, int, int]] = []
        self.events: list[tuple[float, str, dict]] = []
        self.pouches = 0
        self.reissues = 0
        self.crashes = 0
        self._loss_seen: set[tuple[int, int]] = set()

    def loss(self, epoch: int, sample: int, value: float) -> None:
        if (epoch, sample) in self._loss_seen:
            return
        self._loss_seen.add((epoch, sample))
        self.loss_rows.append((epoch, sample, self.engine.now, value))

    def pouch(self) -> None:
        self.pouches += 1

    def add_reissues(self, count: int) -> None:
        self.reissues += count

    def crash(self, who: str) -> None:
        self.crashes += 1
        self.event("crash", who=who)

    def perf_row(self, timeout: float) -> None:
        self.perf_rows.append((self.engine.now, timeout, float(self.power_fn()),
                               self.pouches, self.reissues, self.crashes))

    def event(self, tag: str, **fields) -> None:
        self.events.append((self.engine.now, tag, fields))


# --- supervisor ----------------------------------------------------------------

@dataclass
class RunResult:
    ok: bool
    stall: Optional[str]
    loss_rows: list
    perf_rows: list
    events: list
    params: dict[str, np.ndarray]
    handler_stats: HandlerStats
    pouches: int
    reissues: int
    crashes: int
    sim_time: float
    events_processed: int
    truth: tuple[np.ndarray, np.ndarray]


class _Slot:
    __slots__ = ("state", "task")

    def __init__(self, state: HandlerState, task: Optional[Task] = None) -> None:
        self.state = state
        self.task = task


def run_scenario(cfg: RunConfig) -> RunResult:
    engine = Engine()
    space = SimTupleSpace(engine)
    seed_seq = np.random.SeedSequence(cfg.seed)
    data_rng, init_rng, fault_rng = (np.random.default_rng(c) for c in seed_seq.spawn(3))

    samples, truth = gen_dataset(cfg.model, cfg.dataset_size, data_rng)
    for key, value in init_params(cfg.model, cfg.cost, init_rng).items():
        space.put(key, value)
    n_in = cfg.model.in_dim(1)
    for s, (x, t) in enumerate(samples):
        space.put(tg.k_x(s, (0, n_in)), x)
        space.put(tg.k_t(s), t)
    space.put(CKPT_KEY, {"epoch": 0, "sample": 0, "stage": "F1",
                         "timeout": cfg.dispatch.timeout_initial})

    ctx = ExecContext(cfg.model, cfg.cost, cfg.eta, cfg.activation)
    stats = HandlerStats()
    scale = cfg.resolved_speed_scale()
    capacity = cfg.resolved_capacity()

    slots: list[_Slot] = []
    sink = MetricsSink(engine, lambda: sum(slot.state.level for slot in slots))

    def spawn_handler(slot: _Slot) -> None:
        handler = Handler(
            space, ctx, slot.state, stats,
            overhead=cfg.task_overhead,
            retry_delay=cfg.retry_delay,
            on_unready=cfg.on_unready,
        )
        slot.task = engine.spawn(handler.run(), name=f"handler-{slot.state.ident}")

    for i in range(cfg.handler_count):
        if cfg.initial_levels is not None:
            level = float(cfg.initial_levels[i])
        else:
            level = float(fault_rng.choice(cfg.speed_levels))
        slots.append(_Slot(HandlerState(i, level, level * scale, capacity)))
    for slot in slots:
        spawn_handler(slot)

    run_done = Future()
    manager_slot = _Slot(HandlerState(-1, 0.0, 0.0, 0))  # only .task is used

    def spawn_manager() -> None:
        manager = Manager(space, ctx, cfg.dispatch, cfg.dataset_size, cfg.epochs, sink)

        async def managed():
            try:
                summary = await manager.run()
            except StallError as err:
                run_done.set_result((False, str(err)))
                return
            run_done.set_result((True, summary))

        manager_slot.task = engine.spawn(managed(), name="manager")

    spawn_manager()

    def shuffle_cycle() -> None:
        if run_done.done:
            return
        for slot in slots:
            if fault_rng.random() < cfg.speed_change_prob:
                slot.state.level = float(fault_rng.choice(cfg.speed_levels))
                slot.state.speed = slot.state.level * scale
        engine.schedule(cfg.speed_change_period, shuffle_cycle)

    def handler_crash_cycle() -> None:
        if run_done.done:
            return
        for slot in slots:
            if fault_rng.random() < cfg.handler_crash_prob:
                assert slot.task is not None
                slot.task.kill()
                sink.crash(f"handler-{slot.state.ident}")
                slot.state.level = float(fault_rng.choice(cfg.speed_levels))
                slot.state.speed = slot.state.level * scale
                spawn_handler(slot)
        engine.schedule(cfg.handler_crash_period, handler_crash_cycle)

    def manager_crash_cycle() -> None:
        if run_done.done:
            return
        if fault_rng.random() < cfg.manager_crash_prob and manager_slot.task is not None:
            if manager_slot.task.alive:
                manager_slot.task.kill()
                sink.crash("manager")
                manager_slot.task = None
                engine.schedule(cfg.manager_revival_delay, spawn_manager)
        engine.schedule(cfg.manager_crash_period, manager_crash_cycle)

    if cfg.speed_change_prob > 0:
        engine.schedule(cfg.speed_change_period, shuffle_cycle)
    if cfg.handler_crash_prob > 0:
        engine.schedule(cfg.handler_crash_period, handler_crash_cycle)
    if cfg.manager_crash_prob > 0:
        engine.schedule(cfg.manager_crash_period, manager_crash_cycle)

    ok, detail = engine.run(run_done, max_events=cfg.max_events)

    params: dict[str, np.ndarray] = {}
    for key in param_keys(cfg.model, cfg.cost):
        hit = space.try_read(key)
        if hit is None:
            raise ScenarioError(f"parameter block missing at end of run: {key}")
        params[key] = hit[1]

    return RunResult(
        ok=ok,
        stall=None if ok else detail,
        loss_rows=list(sink.loss_rows),
        perf_rows=list(sink.perf_rows),
        events=list(sink.events),
        params=params,
        handler_stats=stats,
        pouches=sink.pouches,
        reissues=sink.reissues,
        crashes=sink.crashes,
        sim_time=engine.now,
        events_processed=engine.events_processed,
        truth=truth,
    )
