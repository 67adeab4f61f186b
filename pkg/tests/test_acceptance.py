"""Acceptance suite: one test per headline claim, at full experiment scale.

Each test here is a pass/fail gate for one promised behaviour: feasibility
(training converges on the distributed path), oracle equivalence (bitwise),
adaptability (timeout tracks aggregate speed inversely), robustness (crashes
change the schedule, never the math), tuple space invariants under stress on
both transports, partition exactness, gradient correctness against finite
differences, update dedup under duplicate completions, and byte determinism.

The three experiment fixtures run at module scope; the whole file takes a
couple of minutes.
"""

import random
import threading
import time

import numpy as np
import pytest

from acansim.cli import main as cli_main, write_loss_csv, write_perf_csv
from acansim.handler import Handler, HandlerState
from acansim.oracle import compare_params, run_reference
from acansim.scenario import (
    RunConfig,
    experiment_config,
    init_params,
    run_scenario,
)
from acansim.service import TupleSpaceClient, TupleSpaceServer
from acansim.taskgraph import (
    CostModel,
    ModelSpec,
    TaskDesc,
    TaskKind,
    partition,
    sample_tasks,
    task_cost,
)
from acansim.tuplespace import ThreadedTupleSpace

from helpers import (
    build_training_sim,
    fd_gradients,
    gather_full_params,
    gather_grad_blocks,
    hidden_margin,
    random_model,
    run_sample_sequential,
)

SEED = 42


# --- experiment fixtures -------------------------------------------------------------

@pytest.fixture(scope="module")
def exp1_pair():
    cfg = experiment_config("exp1", seed=SEED)
    start = time.monotonic()
    first = run_scenario(cfg)
    wall = time.monotonic() - start
    return cfg, first, run_scenario(cfg), wall


@pytest.fixture(scope="module")
def exp2_pair():
    cfg = experiment_config("exp2", seed=SEED)
    return cfg, run_scenario(cfg), run_scenario(cfg)


@pytest.fixture(scope="module")
def exp3_pair():
    cfg = experiment_config("exp3", seed=SEED)
    return cfg, run_scenario(cfg), run_scenario(cfg)


def loss_ratio(loss_rows, window=20):
    losses = [row[3] for row in loss_rows]
    assert len(losses) >= 2 * window
    return float(np.mean(losses[-window:]) / np.mean(losses[:window]))


# --- feasibility ---------------------------------------------------------------------

def test_feasibility_loss_drops_below_quarter(exp1_pair):
    _, result, _, wall = exp1_pair
    assert result.ok, result.stall
    assert len(result.loss_rows) == 100 * 2
    ratio = loss_ratio(result.loss_rows)
    print(f"feasibility: final/initial loss ratio {ratio:.4f} (< 0.25), "
          f"{result.pouches} pouches, {wall:.1f}s wall")
    assert ratio < 0.25
    assert wall < 120.0


def test_oracle_equivalence_exact(exp1_pair, tmp_path, capsys):
    cfg, result, _, _ = exp1_pair
    ref = run_reference(cfg)
    max_abs, max_rel = compare_params(result.params, ref.params)
    print(f"oracle equivalence: max_abs={max_abs} max_rel={max_rel}")
    assert (max_abs, max_rel) == (0.0, 0.0)
    assert [(e, s, v) for e, s, _, v in result.loss_rows] == ref.loss_rows

    np.savez(tmp_path / "sim.npz", **result.params)
    np.savez(tmp_path / "ref.npz", **ref.params)
    capsys.readouterr()
    assert cli_main(["verify", str(tmp_path / "sim.npz"), str(tmp_path / "ref.npz")]) == 0
    assert capsys.readouterr().out.startswith("EXACT")


# --- adaptability --------------------------------------------------------------------

def test_adaptability_timeout_power_anticorrelation(exp2_pair):
    _, result, _ = exp2_pair
    assert result.ok, result.stall
    timeouts = np.array([row[1] for row in result.perf_rows])
    powers = np.array([row[2] for row in result.perf_rows])
    assert len(set(powers)) > 1, "speed shuffling never changed total power"
    pearson = float(np.corrcoef(timeouts, powers)[0, 1])
    print(f"adaptability: Pearson(timeout, power) = {pearson:.4f} (<= -0.4), "
          f"{result.reissues} reissues over {len(result.perf_rows)} rounds")
    assert pearson <= -0.4
    assert result.reissues > 0


# --- robustness ----------------------------------------------------------------------

def test_robustness_crash_recovery(exp2_pair, exp3_pair):
    _, faulty, _ = exp3_pair
    _, fault_free, _ = exp2_pair
    assert faulty.ok, faulty.stall
    assert faulty.crashes > 0

    ratio = loss_ratio(faulty.loss_rows)
    max_abs, max_rel = compare_params(faulty.params, fault_free.params)
    print(f"robustness: loss ratio {ratio:.4f} (< 0.25), {faulty.crashes} crashes, "
          f"params vs fault-free max_abs={max_abs}, pouches {faulty.pouches} "
          f"vs {fault_free.pouches}")
    assert ratio < 0.25
    assert (max_abs, max_rel) == (0.0, 0.0)
    assert faulty.pouches > fault_free.pouches


# --- determinism ---------------------------------------------------------------------

def test_determinism_byte_identical_csvs(exp1_pair, exp2_pair, exp3_pair, tmp_path):
    for name, (_, first, second, *_) in (
            ("exp1", exp1_pair), ("exp2", exp2_pair), ("exp3", exp3_pair)):
        for tag, result in (("a", first), ("b", second)):
            write_loss_csv(tmp_path / f"{name}-{tag}-loss.csv", result.loss_rows)
            write_perf_csv(tmp_path / f"{name}-{tag}-perf.csv", result.perf_rows)
        for kind in ("loss", "perf"):
            a = (tmp_path / f"{name}-a-{kind}.csv").read_bytes()
            b = (tmp_path / f"{name}-b-{kind}.csv").read_bytes()
            assert a == b, f"{name} {kind}.csv differs between identical runs"
        assert set(first.params) == set(second.params)
        assert all(np.array_equal(first.params[k], second.params[k])
                   for k in first.params)
    print("determinism: exp1/exp2/exp3 reruns byte-identical")


# --- tuple space stress ---------------------------------------------------------------

KEYS = ("a:0", "a:1", "b:0", "b:1:2", "c")
PATTERNS = ("a:*", "b:*", "b:1:*", "a:0", "c", "*")


def make_script(n, seed):
    rng = random.Random(seed)
    ops = []
    for _ in range(n):
        roll = rng.random()
        if roll < 0.45:
            ops.append(("put", rng.choice(KEYS), rng.randrange(1000)))
        elif roll < 0.65:
            ops.append(("try_get", rng.choice(PATTERNS), None))
        elif roll < 0.80:
            ops.append(("try_read", rng.choice(PATTERNS), None))
        elif roll < 0.92:
            ops.append(("count", rng.choice(PATTERNS), None))
        else:
            ops.append(("clear", rng.choice(PATTERNS), None))
    return ops


class ReferenceStore:
    """Executable model of the store: one arrival-ordered list."""

    def __init__(self):
        self.items = []
        self.puts = self.takes = self.cleared = 0

    @staticmethod
    def _matches(pattern, key):
        if pattern.endswith("*"):
            return key.startswith(pattern[:-1])
        return key == pattern

    def put(self, key, value):
        self.items.append((key, value))
        self.puts += 1

    def try_get(self, pattern):
        for n, (key, value) in enumerate(self.items):
            if self._matches(pattern, key):
                del self.items[n]
                self.takes += 1
                return (key, value)
        return None

    def try_read(self, pattern):
        for key, value in self.items:
            if self._matches(pattern, key):
                return (key, value)
        return None

    def count(self, pattern):
        return sum(1 for key, _ in self.items if self._matches(pattern, key))

    def clear(self, pattern):
        kept = [(k, v) for k, v in self.items if not self._matches(pattern, k)]
        removed = len(self.items) - len(kept)
        self.items = kept
        self.cleared += removed
        return removed


def apply_script(ops, space):
    trace = []
    for op, arg, extra in ops:
        if op == "put":
            space.put(arg, extra)
            trace.append(None)
        elif op in ("try_get", "try_read"):
            hit = getattr(space, op)(arg)
            trace.append(hit if hit is None else (hit[0], hit[1]))
        else:
            trace.append(getattr(space, op)(arg))
    return trace


def drain(space):
    out = []
    while True:
        hit = space.try_get("*")
        if hit is None:
            return out
        out.append((hit[0], hit[1]))


def run_blocking_segment(make_space_for_thread, per_key=250):
    """Blocked consumers first, then producers; each key must arrive in order."""
    keys = [f"stress:{i}" for i in range(4)]
    consumed = {k: [] for k in keys}

    def consume(key):
        space = make_space_for_thread()
        for _ in range(per_key):
            consumed[key].append(space.get(key, timeout=60.0)[1])

    def produce(key):
        space = make_space_for_thread()
        for n in range(per_key):
            space.put(key, n)

    consumers = [threading.Thread(target=consume, args=(k,)) for k in keys]
    for t in consumers:
        t.start()
    producers = [threading.Thread(target=produce, args=(k,)) for k in keys]
    for t in producers:
        t.start()
    for t in producers + consumers:
        t.join(timeout=120.0)
        assert not t.is_alive()
    for key in keys:
        assert consumed[key] == list(range(per_key)), f"{key} out of order or dropped"


def test_tuple_space_stress_local():
    ops = make_script(10_000, seed=99)
    model = ReferenceStore()
    space = ThreadedTupleSpace()
    assert apply_script(ops, space) == apply_script(ops, model)

    puts, takes, cleared = space.stats
    assert puts == model.puts and takes == model.takes and cleared == model.cleared
    assert puts - takes - cleared == len(space)  # conservation
    assert drain(space) == model.items           # global FIFO of the remainder

    run_blocking_segment(lambda: space)
    print("tuple space local: 10000-op script matches the model, "
          f"{puts} puts conserved, blocking segment in order")


def test_tuple_space_stress_tcp_loopback():
    ops = make_script(10_000, seed=99)
    model = ReferenceStore()
    server = TupleSpaceServer(port=0)
    server.serve_background()
    try:
        with TupleSpaceClient(*server.address) as client:
            assert apply_script(ops, client) == apply_script(ops, model)
            assert drain(client) == model.items
        run_blocking_segment(lambda: TupleSpaceClient(*server.address), per_key=100)
    finally:
        server.stop()
    print("tuple space TCP: same script and blocking segment pass over loopback")


# --- partitioning ---------------------------------------------------------------------

def test_partition_exactness_1000_triples():
    rng = np.random.default_rng(1234)
    total_leaves = 0
    for _ in range(1000):
        m = int(rng.integers(1, 65))
        n = int(rng.integers(1, 65))
        cost = CostModel(max_task_size=int(rng.integers(1, 65)))
        proto = TaskDesc(0, 0, TaskKind("F"), 1, (0, m), (0, n))
        leaves = partition(proto, cost)
        total_leaves += len(leaves)
        cover = np.zeros((m, n), dtype=np.int16)
        for leaf in leaves:
            assert task_cost(leaf, cost) <= cost.max_task_size
            (i0, i1), (o0, o1) = leaf.in_range, leaf.out_range
            cover[i0:i1, o0:o1] += 1
        assert cover.min() == 1 and cover.max() == 1, (m, n, cost.max_task_size)

    full_scale = partition(TaskDesc(0, 0, TaskKind("F"), 1, (0, 256), (0, 256)),
                            CostModel(max_task_size=256))
    assert len(full_scale) == 256
    print(f"partition: 1000 random triples tile exactly ({total_leaves} leaves), "
          "256x256 at max 256 gives 256 sub-tasks")


# --- gradients -----------------------------------------------------------------------

def test_gradient_check_50_random_models():
    from acansim.taskops import ExecContext

    rng = np.random.default_rng(11)
    checked = 0
    while checked < 50:
        model = random_model(rng)
        cost = CostModel(max_task_size=int(rng.integers(2, 9)))
        ctx = ExecContext(model, cost, eta=0.01, activation="relu")
        params = init_params(model, cost, rng)
        x = rng.standard_normal(model.in_dim(1)).astype(np.float32)
        t = rng.standard_normal(model.out_dim(model.depth)).astype(np.float32)
        full = gather_full_params(dict(params), model, cost)
        if hidden_margin(full, model, x) < 0.05:
            continue  # too close to a relu kink for finite differences
        store = dict(params)
        store[f"x:0:0-{model.in_dim(1)}"] = x
        store["t:0"] = t
        run_sample_sequential(store, ctx, 0, 0)
        grads = gather_grad_blocks(store, model, cost)
        fd = fd_gradients(full, model, x, t, "relu")
        for layer in grads:
            np.testing.assert_allclose(grads[layer][0], fd[layer][0],
                                       rtol=1e-3, atol=1e-3)
            np.testing.assert_allclose(grads[layer][1], fd[layer][1],
                                       rtol=1e-3, atol=1e-3)
        checked += 1
    print("gradients: 50 random models match central finite differences at 1e-3")


# --- update dedup ---------------------------------------------------------------------

def test_update_dedup_duplicate_completion_injection():
    """Every update result arrives twice; each block must commit exactly once."""
    model = ModelSpec(((4, 4), (4, 2)))
    cost = CostModel(max_task_size=4)
    sim = build_training_sim(model, seed=5, max_task=4, eta=0.05, samples=3,
                             epochs=2, handler_count=2, spawn_handlers=False)

    dup_count = [0]
    inner = sim.space

    class DuplicatingSpace:
        """Pass-through space that doubles every update result put."""

        def __getattr__(self, name):
            return getattr(inner, name)

        def put(self, key, value):
            inner.put(key, value)
            if key.startswith("updres:"):
                dup_count[0] += 1
                inner.put(key, value)

    wrapped = DuplicatingSpace()
    for i in range(2):
        state = HandlerState(i, 10.0, 10.0 * 128.0, 4)
        sim.engine.spawn(Handler(wrapped, sim.ctx, state, sim.stats).run(),
                         name=f"handler-{i}")

    ok, summary = sim.run()
    assert ok, summary

    update_tasks = sum(1 for e in range(2) for s in range(3)
                       for t in sample_tasks(model, cost, e, s)
                       if t.kind is TaskKind("U"))
    assert dup_count[0] >= update_tasks  # every U completion was doubled

    assert sim.space.count("updres:*") == 0
    final = sim.final_params()
    for key in final:
        assert sim.space.count(key) == 1

    ref = run_reference(RunConfig(seed=5, model=model, cost=cost, eta=0.05,
                                  dataset_size=3, epochs=2))
    assert compare_params(final, ref.params) == (0.0, 0.0)
    assert [(e, s, v) for e, s, _, v in sim.sink.loss_rows] == ref.loss_rows
    print(f"update dedup: {dup_count[0]} duplicated results for {update_tasks} "
          "update tasks, parameters still match the oracle bitwise")
