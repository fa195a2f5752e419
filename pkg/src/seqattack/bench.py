"""Benchmark harness: batches of attacks with per-method aggregates.

Rows are one attack each, keyed (sample id, method).  Targets are drawn
deterministically from (seed, sample id), so results are identical however
many worker processes run the attacks; rows are emitted in sample-id order.
Distance and iteration aggregates cover successful attacks only.
"""

from __future__ import annotations

import multiprocessing
import os
import time
from dataclasses import dataclass

import numpy as np

from . import attacks, models

_limiter = None


def limit_blas_threads() -> None:
    """Pin BLAS to one thread; the GEMMs here are small enough that thread
    fan-out costs more than it saves, and parallelism comes from workers."""
    global _limiter
    os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
    os.environ.setdefault("OMP_NUM_THREADS", "1")
    try:
        from threadpoolctl import threadpool_limits
        _limiter = threadpool_limits(limits=1, user_api="blas")
    except Exception:
        pass


@dataclass(frozen=True)
class BenchTask:
    sample_id: int
    method: str
    edit: str
    x: np.ndarray
    label: object        # int (classifier) or digit tuple (seqnet)
    target: object


@dataclass
class BenchRow:
    sample_id: int
    method: str
    edit: str
    target: str
    success: bool
    l2: float | None
    iterations: int
    wall_ms: float


@dataclass
class BenchReport:
    method: str
    success_rate: float
    mean_l2: float | None
    mean_iterations: float | None
    count: int


def parse_method(spec: str):
    """"fixed:LAM", "binary:STEPS", or "adaptive"."""
    if spec == "adaptive":
        return ("adaptive", None)
    if spec.startswith("fixed:"):
        lam = float(spec.split(":", 1)[1])
        if lam <= 0:
            raise ValueError(f"bad method {spec!r}: lam must be positive")
        return ("fixed", lam)
    if spec.startswith("binary:"):
        steps = int(spec.split(":", 1)[1])
        if steps < 1:
            raise ValueError(f"bad method {spec!r}: steps must be >= 1")
        return ("binary", steps)
    raise ValueError(f"unknown method {spec!r}")


def _sample_rng(seed: int, sample_id: int) -> np.random.Generator:
    return np.random.default_rng([seed, sample_id])


def make_target(model_kind: str, label, edit: str, rng: np.random.Generator):
    if model_kind == models.KIND_CLASSIFIER:
        choices = [c for c in range(10) if c != int(label)]
        return int(choices[rng.integers(0, len(choices))])
    label = tuple(label)
    if edit == "insert":
        pos = int(rng.integers(0, len(label) + 1))
        return attacks.edit_target(label, "insert", pos, rng=rng)
    if edit == "insert_repeat":
        pos = int(rng.integers(0, len(label)))
        return attacks.edit_target(label, "insert_repeat", pos)
    if edit == "substitute":
        pos = int(rng.integers(0, len(label)))
        return attacks.edit_target(label, "substitute", pos, rng=rng)
    if edit == "delete":
        pos = int(rng.integers(0, len(label)))
        return attacks.edit_target(label, "delete", pos)
    if edit == "random":
        return attacks.sample_target(label, range(10), rng)
    raise ValueError(f"unknown edit {edit!r}")


def select_samples(model: models.Model, samples, count: int):
    """First `count` samples the model already gets right (attack precondition)."""
    picked = []
    for s in samples:
        if model.kind == models.KIND_CLASSIFIER:
            ok = models.predict_class(model, s.pixels) == s.label
            label = int(s.label)
        else:
            ok = models.decode_seq(model, s.pixels) == tuple(s.label)
            label = tuple(s.label)
        if ok:
            picked.append((s.pixels, label))
            if len(picked) == count:
                return picked
    raise ValueError(
        f"only {len(picked)} of the requested {count} samples are correctly "
        "recognized by the model")


def build_tasks(model: models.Model, samples, count: int, methods: list[str],
                edits: list[str], seed: int) -> list[BenchTask]:
    for m in methods:
        parse_method(m)
    picked = select_samples(model, samples, count)
    tasks = []
    for i, (x, label) in enumerate(picked):
        edit = "random" if model.kind == models.KIND_CLASSIFIER else edits[i % len(edits)]
        target = make_target(model.kind, label, edit, _sample_rng(seed, i))
        for method in methods:
            tasks.append(BenchTask(i, method, edit, x, label, target))
    return tasks


_WORKER_STATE: dict = {}


def _init_worker(model: models.Model, cfg: attacks.AttackConfig):
    limit_blas_threads()
    _WORKER_STATE["model"] = model
    _WORKER_STATE["cfg"] = cfg


def _run_task(task: BenchTask) -> BenchRow:
    model = _WORKER_STATE["model"]
    cfg = _WORKER_STATE["cfg"]
    kind, arg = parse_method(task.method)
    t0 = time.perf_counter()
    if kind == "adaptive":
        res = attacks.attack_adaptive(model, task.x, task.label, task.target, cfg)
    elif kind == "fixed":
        res = attacks.attack_fixed(model, task.x, task.label, task.target, arg, cfg)
    else:
        res = attacks.attack_binary(model, task.x, task.label, task.target, arg, cfg)
    wall_ms = (time.perf_counter() - t0) * 1e3
    return BenchRow(task.sample_id, task.method, task.edit,
                    attacks._target_str(task.target), res.success,
                    res.l2 if res.success else None, res.iterations, wall_ms)


def run_bench(model: models.Model, samples, count: int, methods: list[str],
              edits: list[str], seed: int, jobs: int = 1,
              cfg: attacks.AttackConfig = attacks.AttackConfig(),
              ) -> tuple[list[BenchRow], list[BenchReport]]:
    tasks = build_tasks(model, samples, count, methods, edits, seed)
    if jobs <= 1:
        _init_worker(model, cfg)
        rows = [_run_task(t) for t in tasks]
    else:
        ctx = multiprocessing.get_context("fork")
        with ctx.Pool(jobs, initializer=_init_worker, initargs=(model, cfg)) as pool:
            rows = pool.map(_run_task, tasks, chunksize=1)
    method_order = {m: i for i, m in enumerate(methods)}
    rows.sort(key=lambda r: (r.sample_id, method_order[r.method]))
    return rows, summarize(rows, methods)


def summarize(rows: list[BenchRow], methods: list[str]) -> list[BenchReport]:
    reports = []
    for method in methods:
        mine = [r for r in rows if r.method == method]
        wins = [r for r in mine if r.success]
        reports.append(BenchReport(
            method=method,
            success_rate=len(wins) / len(mine) if mine else 0.0,
            mean_l2=float(np.mean([r.l2 for r in wins])) if wins else None,
            mean_iterations=float(np.mean([r.iterations for r in wins])) if wins else None,
            count=len(mine)))
    return reports


CSV_HEADER = "id,method,edit,target,success,l2,iterations,wall_ms"


def rows_to_csv(rows: list[BenchRow]) -> str:
    lines = [CSV_HEADER]
    for r in rows:
        l2 = repr(r.l2) if r.l2 is not None else ""
        lines.append(f"{r.sample_id},{r.method},{r.edit},{r.target},"
                     f"{1 if r.success else 0},{l2},{r.iterations},{r.wall_ms:.3f}")
    return "\n".join(lines) + "\n"
