"""Per-batch cost measurement and lower-bound projections of total training time.

Two measurement modes:

``train``
    One training iteration with a K-step attack: K input-gradient passes
    followed by one full forward/backward and an SGD update.  K = 0 is a
    standard training step.
``attack``
    One standalone PGD instance: K input-gradient passes plus the closing
    forward pass.  K = 0 is a single forward pass.
"""
from __future__ import annotations

import csv
import math
import statistics
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .attacks import PerturbationSpec, pgd
from .models import Model, loss_and_grads
from .training import OptimizerState, sgd_step

MODES = ("train", "attack")
TIMING_HEADER = ["steps", "batch", "workers", "mean_s", "std_s"]
ESTIMATE_HEADER = ["config", "total_s", "train_s", "val_s"]


class CoverageError(ValueError):
    """The timing table lacks a point needed by an estimate."""


@dataclass(frozen=True)
class BatchTiming:
    steps: int
    batch: int
    mean_s: float
    std_s: float
    reps: int
    mode: str = "train"
    workers: int = 1

    def __post_init__(self):
        if self.reps < 3:
            raise ValueError(f"need at least 3 repetitions, got {self.reps}")
        if self.mean_s < 0:
            raise ValueError("mean time must be nonnegative")

    @property
    def per_sample_s(self) -> float:
        return self.mean_s / self.batch


@contextmanager
def _single_thread(enabled: bool):
    """Pin BLAS to one thread while measuring."""
    if not enabled:
        yield
        return
    with threadpool_limits(1):
        yield


def _iteration(model: Model, x, y, steps: int, mode: str, eps: float, norm: str, state):
    if mode == "attack":
        pgd(model, x, y, PerturbationSpec(norm, eps, None, steps, True))
        return
    xa = x
    if steps > 0:
        xa = x + pgd(model, x, y, PerturbationSpec(norm, eps, None, steps, True), evaluate=False).delta
    _, _, grads, _ = loss_and_grads(model, xa, y)
    sgd_step(model, grads, state, 1e-4, 0.9, 0.0)


def measure_batch_time(model: Model, batch_size: int, steps: int, reps: int = 5, mode: str = "train",
                       eps: float = 1.0, norm: str = "l2", inner: int = 2, seed: int = 0,
                       single_thread: bool = True) -> BatchTiming:
    """Median over ``reps`` of the mean of ``inner`` timed iterations, after one warmup.

    Runs on a private copy, so ``model`` is never modified.
    """
    if reps < 3:
        raise ValueError(f"need at least 3 repetitions, got {reps}")
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    if steps < 0 or batch_size < 1 or inner < 1:
        raise ValueError("steps must be >= 0; batch size and inner count must be positive")
    rng = np.random.default_rng(seed)
    work = model.copy()
    x = rng.uniform(0, 1, size=(batch_size, *model.config.input_shape)).astype(model.dtype)
    y = rng.integers(0, model.config.num_classes, size=batch_size)
    state = OptimizerState.zeros_like(work)
    means = []
    with _single_thread(single_thread):
        _iteration(work, x, y, steps, mode, eps, norm, state)
        for _ in range(reps):
            t0 = time.perf_counter()
            for _ in range(inner):
                _iteration(work, x, y, steps, mode, eps, norm, state)
            means.append((time.perf_counter() - t0) / inner)
    return BatchTiming(steps, batch_size, statistics.median(means), statistics.pstdev(means), reps, mode)


def _interpolate(timings: list[BatchTiming], steps: int, batch: float, mode: str) -> float:
    pts = sorted((t.batch, t.mean_s) for t in timings if t.steps == steps and t.mode == mode)
    if not pts:
        raise CoverageError(f"no {mode} timings measured for {steps} attack steps")
    xs = [p[0] for p in pts]
    if not xs[0] <= batch <= xs[-1]:
        raise CoverageError(f"per-worker batch {batch:g} for {steps}-step {mode} timings lies outside "
                            f"the measured range [{xs[0]}, {xs[-1]}]")
    return float(np.interp(batch, xs, [p[1] for p in pts]))


@dataclass
class TimeEstimate:
    total_s: float
    train_s: float
    val_s: float
    val_epochs: int
    assumptions: dict = field(default_factory=dict)

    def row(self, name: str) -> list:
        return [name, repr(self.total_s), repr(self.train_s), repr(self.val_s)]


def estimate_total_time(timings: list[BatchTiming], epochs: int, cadence: int, n_train: int, n_val: int,
                        batch: int, workers: int = 1, train_steps: int = 1, eval_steps: int = 20,
                        eval_restarts: int = 1) -> TimeEstimate:
    """Compute-only lower bound on wall-clock training time.

    Training uses ``train``-mode timings and validation ``attack``-mode
    timings, both at the per-worker batch ``ceil(batch / workers)`` with
    linear interpolation between measured batch sizes.  Communication is
    ignored.
    """
    if min(epochs, cadence, batch, workers) < 1 or n_train < 1 or n_val < 0:
        raise ValueError("epochs, cadence, batch size, workers and training set size must be positive")
    per_worker = math.ceil(batch / workers)
    val_epochs = epochs // cadence
    t_train = _interpolate(timings, train_steps, per_worker, "train")
    train_s = epochs * math.ceil(n_train / batch) * t_train
    val_s = 0.0
    if val_epochs and n_val:
        t_val = _interpolate(timings, eval_steps, per_worker, "attack")
        val_s = val_epochs * math.ceil(n_val / batch) * t_val * eval_restarts
    return TimeEstimate(train_s + val_s, train_s, val_s, val_epochs, {
        "epochs": epochs, "cadence": cadence, "n_train": n_train, "n_val": n_val, "batch": batch,
        "workers": workers, "per_worker_batch": per_worker, "train_steps": train_steps,
        "eval_steps": eval_steps, "eval_restarts": eval_restarts})


def write_timings_csv(timings: list[BatchTiming], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(TIMING_HEADER)
        for t in timings:
            w.writerow([t.steps, t.batch, t.workers, repr(t.mean_s), repr(t.std_s)])


def write_estimates_csv(estimates: dict[str, TimeEstimate], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(ESTIMATE_HEADER)
        for name, est in estimates.items():
            w.writerow(est.row(name))
