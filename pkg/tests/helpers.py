"""Shared test utilities: dense reference math and a scriptable sim harness.

The dense reference here is deliberately independent of the package kernels:
plain float64 numpy, no blocking, no shared code paths.  Gradient checks and
pipeline comparisons lean on it as the outside oracle.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from acansim import taskgraph as tg
from acansim.kernels import F32
from acansim.manager import DispatchConfig, Manager, StallError
from acansim.scenario import MetricsSink, gen_dataset, init_params
from acansim.sim import Engine, Future, SimTupleSpace, Task
from acansim.handler import Handler, HandlerState, HandlerStats
from acansim.taskgraph import CKPT_KEY, CostModel, ModelSpec
from acansim.taskops import ExecContext


# --- dense float64 reference --------------------------------------------------

def gather_full_params(blocks: dict[str, np.ndarray], model: ModelSpec,
                       cost: CostModel) -> dict:
    """Reassemble per-layer full (W, b) float64 matrices from block tuples."""
    out = {}
    for layer in range(1, model.depth + 1):
        w = np.zeros((model.out_dim(layer), model.in_dim(layer)), dtype=np.float64)
        for in_range, out_range in tg.weight_grid(model, cost, layer):
            w[out_range[0]:out_range[1], in_range[0]:in_range[1]] = \
                blocks[tg.k_param(layer, "W", out_range, in_range)]
        b = np.zeros(model.out_dim(layer), dtype=np.float64)
        for out_range in tg.bias_grid(model, cost, layer):
            b[out_range[0]:out_range[1]] = blocks[tg.k_param(layer, "b", out_range)]
        out[layer] = (w, b)
    return out


def dense_loss(full_params: dict, model: ModelSpec, x, t, activation: str = "relu") -> float:
    """Sum-of-squares loss of the whole network in float64."""
    a = np.asarray(x, dtype=np.float64)
    for layer in range(1, model.depth + 1):
        w, b = full_params[layer]
        z = w @ a + b
        if layer < model.depth and activation == "relu":
            a = np.maximum(z, 0.0)
        else:
            a = z
    d = a - np.asarray(t, dtype=np.float64)
    return float(np.sum(d * d))


def fd_gradients(full_params: dict, model: ModelSpec, x, t,
                 activation: str = "relu", eps: float = 1e-3) -> dict:
    """Central finite differences of dense_loss over every parameter entry."""
    grads = {}
    for layer, (w, b) in full_params.items():
        gw = np.zeros_like(w)
        for o in range(w.shape[0]):
            for i in range(w.shape[1]):
                probe = {k: (wv.copy(), bv.copy()) for k, (wv, bv) in full_params.items()}
                probe[layer][0][o, i] = w[o, i] + eps
                hi = dense_loss(probe, model, x, t, activation)
                probe[layer][0][o, i] = w[o, i] - eps
                lo = dense_loss(probe, model, x, t, activation)
                gw[o, i] = (hi - lo) / (2 * eps)
        gb = np.zeros_like(b)
        for o in range(b.shape[0]):
            probe = {k: (wv.copy(), bv.copy()) for k, (wv, bv) in full_params.items()}
            probe[layer][1][o] = b[o] + eps
            hi = dense_loss(probe, model, x, t, activation)
            probe[layer][1][o] = b[o] - eps
            lo = dense_loss(probe, model, x, t, activation)
            gb[o] = (hi - lo) / (2 * eps)
        grads[layer] = (gw, gb)
    return grads


def random_model(rng: np.random.Generator, max_dim: int = 8) -> ModelSpec:
    depth = int(rng.integers(1, 4))
    dims = [int(rng.integers(1, max_dim + 1)) for _ in range(depth + 1)]
    return ModelSpec(tuple((dims[i], dims[i + 1]) for i in range(depth)))


# --- sim harness ---------------------------------------------------------------

@dataclass
class TrainingSim:
    engine: Engine
    space: SimTupleSpace
    ctx: ExecContext
    sink: MetricsSink
    stats: HandlerStats
    manager: Manager
    manager_task: Task
    run_done: Future
    dataset: list
    handler_tasks: list

    def run(self, max_events=None):
        return self.engine.run(self.run_done, max_events=max_events)

    def final_params(self) -> dict[str, np.ndarray]:
        out = {}
        for layer in range(1, self.ctx.model.depth + 1):
            for in_range, out_range in tg.weight_grid(self.ctx.model, self.ctx.cost, layer):
                key = tg.k_param(layer, "W", out_range, in_range)
                out[key] = self.space.try_read(key)[1]
            for out_range in tg.bias_grid(self.ctx.model, self.ctx.cost, layer):
                key = tg.k_param(layer, "b", out_range)
                out[key] = self.space.try_read(key)[1]
        return out


def build_training_sim(
    model: ModelSpec,
    *,
    seed: int = 0,
    max_task: int = 8,
    eta: float = 0.05,
    samples: int = 2,
    epochs: int = 1,
    pouch_size: int = 100,
    timeout_initial: float = 0.5,
    handler_count: int = 2,
    level: float = 10.0,
    speed_scale: float = 128.0,
    capacity: int | None = None,
    max_stall_rounds: int = 200,
    max_attempts: int | None = None,
    on_unready: str = "store",
    spawn_handlers: bool = True,
) -> TrainingSim:
    """A run_scenario clone with no fault schedule and hookable actors.

    Seeding matches run_scenario (same SeedSequence split) so the oracle on a
    RunConfig with the same seed sees identical data and initial parameters.
    """
    engine = Engine()
    space = SimTupleSpace(engine)
    cost = CostModel(max_task_size=max_task)
    seed_seq = np.random.SeedSequence(seed)
    data_rng, init_rng, _ = (np.random.default_rng(c) for c in seed_seq.spawn(3))

    dataset, _truth = gen_dataset(model, samples, data_rng)
    for key, value in init_params(model, cost, init_rng).items():
        space.put(key, value)
    n_in = model.in_dim(1)
    for s, (x, t) in enumerate(dataset):
        space.put(tg.k_x(s, (0, n_in)), x)
        space.put(tg.k_t(s), t)

    dispatch = DispatchConfig(
        pouch_size=pouch_size,
        timeout_initial=timeout_initial,
        max_stall_rounds=max_stall_rounds,
        max_attempts=max_attempts,
    )
    space.put(CKPT_KEY, {"epoch": 0, "sample": 0, "stage": "F1",
                         "timeout": dispatch.timeout_initial})

    ctx = ExecContext(model, cost, eta, "relu")
    stats = HandlerStats()
    sink = MetricsSink(engine, lambda: level * handler_count)
    if capacity is None:
        capacity = max_task

    handler_tasks = []
    if spawn_handlers:
        for i in range(handler_count):
            state = HandlerState(i, level, level * speed_scale, capacity)
            handler = Handler(space, ctx, state, stats, on_unready=on_unready)
            handler_tasks.append(engine.spawn(handler.run(), name=f"handler-{i}"))

    manager = Manager(space, ctx, dispatch, samples, epochs, sink)
    run_done = Future()

    async def managed():
        try:
            summary = await manager.run()
        except StallError as err:
            run_done.set_result((False, str(err)))
        else:
            run_done.set_result((True, summary))

    manager_task = engine.spawn(managed(), name="manager")
    return TrainingSim(engine, space, ctx, sink, stats, manager, manager_task,
                       run_done, dataset, handler_tasks)


# --- sequential pipeline driver -------------------------------------------------

def run_sample_sequential(store: dict, ctx: ExecContext, epoch: int, sample: int) -> float:
    """Drive one sample's stages over a dict store; returns the loss.

    Updates are committed into the param keys; transients are left in place
    so tests can inspect intermediate values afterwards.
    """
    from acansim.taskops import DictReader, param_key_for_update, run_task, total_loss

    reader = DictReader(store)
    loss = None
    for stage in tg.sample_stages(ctx.model):
        for task in tg.stage_tasks(ctx.model, ctx.cost, stage, epoch, sample):
            outs = run_task(task, ctx, reader)
            assert outs is not None, f"missing input for {task.id}"
            for key, value in outs:
                store[key] = value
        if stage[0] == "L":
            loss = total_loss(reader, ctx, sample)
        if stage[0] == "U":
            for task in tg.stage_tasks(ctx.model, ctx.cost, stage, epoch, sample):
                store[param_key_for_update(task)] = store.pop(tg.k_updres(task))
    assert loss is not None
    return float(loss)


def gather_grad_blocks(store: dict, model: ModelSpec, cost: CostModel) -> dict:
    """Reassemble per-layer full (gW, gb) float64 from grad block tuples."""
    out = {}
    for layer in range(1, model.depth + 1):
        gw = np.zeros((model.out_dim(layer), model.in_dim(layer)), dtype=np.float64)
        for in_range, out_range in tg.weight_grid(model, cost, layer):
            gw[out_range[0]:out_range[1], in_range[0]:in_range[1]] = \
                store[tg.k_grad(layer, "W", out_range, in_range)]
        gb = np.zeros(model.out_dim(layer), dtype=np.float64)
        for out_range in tg.bias_grad_blocks(model, cost, layer):
            gb[out_range[0]:out_range[1]] = store[tg.k_grad(layer, "b", out_range)]
        out[layer] = (gw, gb)
    return out


def hidden_margin(full_params: dict, model: ModelSpec, x, activation: str = "relu") -> float:
    """Smallest |preactivation| across hidden layers; inf when there are none.

    Finite-difference probes of a relu network are only trustworthy when no
    hidden unit sits near its kink, so callers resample until this is large.
    """
    if activation != "relu" or model.depth == 1:
        return float("inf")
    margin = float("inf")
    a = np.asarray(x, dtype=np.float64)
    for layer in range(1, model.depth):
        w, b = full_params[layer]
        z = w @ a + b
        margin = min(margin, float(np.min(np.abs(z))))
        a = np.maximum(z, 0.0)
    return margin
