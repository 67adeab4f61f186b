"""Sequential reference trainer.

Runs the exact same task decomposition and kernels as the distributed
simulator, but in plain depth-first order over a dict instead of a tuple
space.  Because both paths share run_task and the fixed reduction orders,
a fault-free (or faulty but converging) simulated run must produce
parameters that are equal bit for bit to this reference.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import taskgraph as tg
from .scenario import RunConfig, gen_dataset, init_params, param_keys
from .taskops import DictReader, ExecContext, param_key_for_update, run_task, total_loss


class OracleError(Exception):
    pass


@dataclass
class OracleResult:
    params: dict[str, np.ndarray]
    loss_rows: list[tuple[int, int, float]]  # epoch, sample, loss


_TRANSIENT = ("z:{s}:", "h:{s}:", "y:{s}:", "gy:{s}:", "gx:{s}:", "lossval:{s}:", "grad:")


def run_reference(cfg: RunConfig) -> OracleResult:
    seed_seq = np.random.SeedSequence(cfg.seed)
    data_rng, init_rng, _ = (np.random.default_rng(c) for c in seed_seq.spawn(3))

    samples, _ = gen_dataset(cfg.model, cfg.dataset_size, data_rng)
    store: dict = dict(init_params(cfg.model, cfg.cost, init_rng))
    n_in = cfg.model.in_dim(1)
    for s, (x, t) in enumerate(samples):
        store[tg.k_x(s, (0, n_in))] = x
        store[tg.k_t(s)] = t

    ctx = ExecContext(cfg.model, cfg.cost, cfg.eta, cfg.activation)
    reader = DictReader(store)
    loss_rows: list[tuple[int, int, float]] = []

    for epoch in range(cfg.epochs):
        for s in range(cfg.dataset_size):
            for stage in tg.sample_stages(cfg.model):
                if stage[0] == "U":
                    continue  # updates are applied at commit below
                for task in tg.stage_tasks(cfg.model, cfg.cost, stage, epoch, s):
                    outs = run_task(task, ctx, reader)
                    if outs is None:
                        raise OracleError(f"missing input for {task.id}")
                    for key, value in outs:
                        store[key] = value
                if stage[0] == "L":
                    value = total_loss(reader, ctx, s)
                    assert value is not None
                    loss_rows.append((epoch, s, float(value)))
            for task in tg.stage_tasks(cfg.model, cfg.cost, ("U", 0), epoch, s):
                outs = run_task(task, ctx, reader)
                if outs is None:
                    raise OracleError(f"missing input for {task.id}")
                for key, value in outs:
                    store[key] = value
                store[param_key_for_update(task)] = store.pop(tg.k_updres(task))
            for prefix in _TRANSIENT:
                pat = prefix.format(s=s)
                for key in [k for k in store if k.startswith(pat)]:
                    del store[key]

    params = {k: store[k] for k in param_keys(cfg.model, cfg.cost)}
    return OracleResult(params=params, loss_rows=loss_rows)


def compare_params(a: dict[str, np.ndarray], b: dict[str, np.ndarray]) -> tuple[float, float]:
    """(max absolute diff, max relative diff) over matching keys.

    Raises OracleError when the key sets differ.
    """
    if set(a) != set(b):
        missing = set(a) ^ set(b)
        raise OracleError(f"parameter key sets differ: {sorted(missing)[:4]}...")
    max_abs = 0.0
    max_rel = 0.0
    for key in a:
        va, vb = a[key], b[key]
        if va.shape != vb.shape:
            raise OracleError(f"shape mismatch at {key}")
        diff = np.abs(va.astype(np.float64) - vb.astype(np.float64))
        if diff.size == 0:
            continue
        max_abs = max(max_abs, float(diff.max()))
        denom = np.maximum(np.abs(va.astype(np.float64)), 1e-12)
        max_rel = max(max_rel, float((diff / denom).max()))
    return max_abs, max_rel
