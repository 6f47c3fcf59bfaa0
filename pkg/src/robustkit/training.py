"""Momentum SGD, standard/adversarial training loops and free adversarial training."""
from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .attacks import AttackError, PerturbationSpec, _project, _step, clamp_to_domain, pgd
from .data import Dataset
from .models import Model, forward_both, loss_and_grads
from .tensor import cross_entropy_per_sample

METRICS_HEADER = ["epoch", "split", "clean_acc", "adv_acc", "loss", "eps", "wall_time_s"]


class DivergenceError(RuntimeError):
    """The training loss became non-finite."""


def check_finite(loss: float, epoch: int, step: int) -> None:
    if not math.isfinite(loss):
        raise DivergenceError(f"training diverged: non-finite loss at epoch {epoch} step {step}; "
                              "lower the learning rate")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lr_decay: float = 0.1
    lr_interval: int = 50
    val_every: int = 5
    attack: PerturbationSpec | None = None
    seed: int = 0

    def validate(self) -> None:
        if self.epochs < 1 or self.batch_size < 1 or self.val_every < 1 or self.lr_interval < 1:
            raise ValueError("epochs, batch size, validation cadence and lr interval must be positive")
        if not self.lr > 0:
            raise ValueError(f"learning rate must be positive, got {self.lr}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ValueError("weight decay must be nonnegative")
        if self.attack is not None:
            self.attack.validate()


@dataclass
class OptimizerState:
    velocity: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, model: Model) -> "OptimizerState":
        return cls({k: np.zeros_like(v) for k, v in model.params.items()})


@dataclass
class EpochMetrics:
    epoch: int
    split: str
    loss: float
    clean_acc: float | None
    adv_acc: float | None = None
    eps: float | None = None
    wall_time_s: float = 0.0

    def row(self) -> list:
        def fmt(v):
            return "" if v is None else repr(float(v))
        return [self.epoch, self.split, fmt(self.clean_acc), fmt(self.adv_acc), fmt(self.loss),
                fmt(self.eps), f"{self.wall_time_s:.6f}"]


@dataclass
class TrainResult:
    model: Model
    history: list[EpochMetrics] = field(default_factory=list)
    best_epoch: int | None = None
    best_params: dict[str, np.ndarray] | None = None
    updates: int = 0

    @property
    def best_model(self) -> Model:
        if self.best_params is None:
            return self.model
        return Model(self.model.config, self.best_params, self.model.residual_params)


def sgd_step(model: Model, grads: dict[str, np.ndarray], state: OptimizerState, lr: float,
             momentum: float, weight_decay: float) -> None:
    """v <- momentum * v + (g + wd * theta); theta <- theta - lr * v.  Updates in place."""
    if set(grads) != set(model.params):
        raise ValueError(f"gradient names {sorted(grads)} do not match parameters {sorted(model.params)}")
    for name, theta in model.params.items():
        g = grads[name]
        if g.shape != theta.shape:
            raise ValueError(f"gradient for {name!r} has shape {g.shape}, expected {theta.shape}")
        v = momentum * state.velocity[name] + (g + weight_decay * theta)
        state.velocity[name] = v.astype(theta.dtype, copy=False)
        model.params[name] = (theta - lr * state.velocity[name]).astype(theta.dtype, copy=False)
    state.step += 1


def lr_at_epoch(config: TrainConfig, epoch: int) -> float:
    return config.lr * config.lr_decay ** (epoch // config.lr_interval)


def epoch_permutation(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([int(seed), int(epoch)]).permutation(n)


def batches(seed: int, epoch: int, n: int, batch_size: int) -> list[np.ndarray]:
    perm = epoch_permutation(seed, epoch, n)
    return [perm[i:i + batch_size] for i in range(0, n, batch_size)]


def perturb(model: Model, x: np.ndarray, y: np.ndarray, spec: PerturbationSpec | None, keys) -> np.ndarray:
    """Adversarial inputs ``x + delta`` for training, or ``x`` itself without an attack."""
    if spec is None:
        return x
    return x + pgd(model, x, y, spec, keys, evaluate=False).delta


def adversarial_batch_grads(model: Model, data: Dataset, idx: np.ndarray, spec, seed: int, epoch: int):
    """Mean loss, accuracy count and parameter gradients on the perturbed batch ``idx``."""
    x = data.inputs[idx].astype(model.dtype, copy=False)
    y = data.labels[idx]
    keys = [(seed, epoch, int(i)) for i in idx]
    xa = perturb(model, x, y, spec, keys)
    loss, out, grads, _ = loss_and_grads(model, xa, y)
    correct = int((out.argmax(axis=1) == y).sum())
    return loss, correct, grads


def validate(model: Model, data: Dataset, spec: PerturbationSpec | None = None, epoch: int = -1,
             batch_size: int = 256) -> EpochMetrics:
    """Clean accuracy and, with ``spec``, accuracy under a single run of that attack.

    The reported loss is the clean loss without ``spec`` and the loss on the
    perturbed inputs with it.
    """
    start = time.perf_counter()
    n = len(data)
    clean = adv = 0
    loss_sum = 0.0
    for lo in range(0, n, batch_size):
        idx = np.arange(lo, min(n, lo + batch_size))
        x = data.inputs[idx].astype(model.dtype, copy=False)
        y = data.labels[idx]
        _, out = forward_both(model, x)
        clean += int((out.argmax(axis=1) == y).sum())
        if spec is not None:
            x = x + pgd(model, x, y, spec, [(int(i),) for i in idx]).delta
            _, out = forward_both(model, x)
            adv += int((out.argmax(axis=1) == y).sum())
        loss_sum += float(cross_entropy_per_sample(out, y).sum())
    return EpochMetrics(epoch, "val", loss_sum / n, clean / n, adv / n if spec is not None else None,
                        spec.eps if spec is not None else None, time.perf_counter() - start)


class _Recorder:
    """Validation bookkeeping shared by the single-process and distributed loops."""

    def __init__(self, model: Model, val: Dataset | None, config: TrainConfig, out_dir):
        self.model = model
        self.val = val
        self.config = config
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.history: list[EpochMetrics] = []
        self.best_score = -math.inf
        self.best_epoch = None
        self.best_params = None
        if self.out_dir is not None:
            (self.out_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
            with open(self.out_dir / "metrics.csv", "w", newline="") as f:
                csv.writer(f).writerow(METRICS_HEADER)

    def _append(self, m: EpochMetrics) -> None:
        self.history.append(m)
        if self.out_dir is not None:
            with open(self.out_dir / "metrics.csv", "a", newline="") as f:
                csv.writer(f).writerow(m.row())

    def end_epoch(self, epoch: int, train_metrics: EpochMetrics) -> None:
        self._append(train_metrics)
        if self.val is None or (epoch + 1) % self.config.val_every:
            return
        m = validate(self.model, self.val, self.config.attack, epoch, self.config.batch_size)
        self._append(m)
        score = m.adv_acc if m.adv_acc is not None else m.clean_acc
        if score > self.best_score:
            self.best_score = score
            self.best_epoch = epoch
            self.best_params = {k: v.copy() for k, v in self.model.params.items()}
            if self.out_dir is not None:
                from .persistence import save_checkpoint
                save_checkpoint(self.model, self.out_dir / "checkpoints" / "best.rckpt")

    def finish(self, updates: int) -> TrainResult:
        if self.out_dir is not None:
            from .persistence import save_checkpoint
            save_checkpoint(self.model, self.out_dir / "checkpoints" / "last.rckpt")
        return TrainResult(self.model, self.history, self.best_epoch, self.best_params, updates)


def train_adversarial(model: Model, train: Dataset, val: Dataset | None, config: TrainConfig,
                      out_dir=None, on_step: Callable | None = None) -> TrainResult:
    """Adversarial training; without ``config.attack`` this is standard training.

    Updates ``model`` in place and returns it with the metrics history and the
    parameters of the validated epoch with the highest adversarial accuracy
    (clean accuracy when no attack is configured; ties keep the earlier epoch).
    """
    config.validate()
    if len(train) == 0:
        raise ValueError("training set is empty")
    train.check_domain()
    state = OptimizerState.zeros_like(model)
    rec = _Recorder(model, val, config, out_dir)
    for epoch in range(config.epochs):
        start = time.perf_counter()
        lr = lr_at_epoch(config, epoch)
        loss_sum = 0.0
        correct = 0
        for step, idx in enumerate(batches(config.seed, epoch, len(train), config.batch_size)):
            loss, c, grads = adversarial_batch_grads(model, train, idx, config.attack, config.seed, epoch)
            check_finite(loss, epoch, step)
            sgd_step(model, grads, state, lr, config.momentum, config.weight_decay)
            loss_sum += loss * len(idx)
            correct += c
            if on_step is not None:
                on_step(epoch, step, model)
        acc = correct / len(train)
        eps = config.attack.eps if config.attack is not None else None
        m = EpochMetrics(epoch, "train", loss_sum / len(train),
                         acc if config.attack is None else None,
                         acc if config.attack is not None else None, eps, time.perf_counter() - start)
        rec.end_epoch(epoch, m)
    return rec.finish(state.step)


def free_epochs(epochs: int, replay: int) -> int:
    return math.ceil(epochs / replay)


def train_free(model: Model, train: Dataset, val: Dataset | None, config: TrainConfig, replay: int,
               out_dir=None, on_pass: Callable | None = None) -> TrainResult:
    """Free adversarial training: each mini-batch is replayed ``replay`` times.

    Every pass takes one gradient of the loss at ``x + delta`` and uses it
    both for a weight step and for one ascent step on ``delta`` (sign step for
    l-infinity, normalised step for l2).  ``delta`` carries over to the next
    mini-batch.  The number of epochs is ``ceil(epochs / replay)``.
    """
    if replay < 1:
        raise ValueError(f"replay count must be >= 1, got {replay}")
    if config.attack is None:
        raise AttackError("free training requires an attack spec")
    config.validate()
    train.check_domain()
    spec = config.attack
    state = OptimizerState.zeros_like(model)
    rec = _Recorder(model, val, config, out_dir)
    delta = np.zeros((config.batch_size, *train.inputs.shape[1:]), dtype=model.dtype)
    for epoch in range(free_epochs(config.epochs, replay)):
        start = time.perf_counter()
        lr = lr_at_epoch(config, epoch)
        loss_sum = 0.0
        correct = 0
        for step, idx in enumerate(batches(config.seed, epoch, len(train), config.batch_size)):
            x = train.inputs[idx].astype(model.dtype, copy=False)
            y = train.labels[idx]
            for t in range(replay):
                entering = delta[:len(idx)].copy()
                d = clamp_to_domain(entering, x)
                loss, out, grads, gx = loss_and_grads(model, x + d, y, wrt_input=True)
                check_finite(loss, epoch, step)
                sgd_step(model, grads, state, lr, config.momentum, config.weight_decay)
                d = clamp_to_domain(_project(_step(d, gx, spec, spec.alpha), spec), x)
                delta[:len(idx)] = d
                if on_pass is not None:
                    on_pass(epoch, step, t, entering, d)
                if t == replay - 1:
                    loss_sum += loss * len(idx)
                    correct += int((out.argmax(axis=1) == y).sum())
        acc = correct / len(train)
        rec.end_epoch(epoch, EpochMetrics(epoch, "train", loss_sum / len(train), None, acc, spec.eps,
                                          time.perf_counter() - start))
    return rec.finish(state.step)

