"""Adversarial perturbations under l2 and l-infinity budgets.

All attacks work on batches.  Every sample draws its randomness from its own
generator seeded by ``(rng_seed, restart, *sample_key)``, so batching never
changes which perturbation a sample receives and restart sets nest as the
restart count grows.

Conventions:
    * ``sign(0) == 0`` for FGSM and l-infinity steps.
    * An l2 step whose input gradient is exactly zero is skipped.
    * The random initialisation is used as drawn for the first step; every
      iterate after a step is projected onto the ball and then clamped so
      that ``x + delta`` stays in [0, 1].  With ``steps == 0`` the projected,
      clamped initialisation is returned.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from . import tensor as T
from .models import Model, as_batch, model_graph
from .tensor import backward, forward_eval

NORMS = ("l2", "linf")


class AttackError(ValueError):
    pass


@dataclass(frozen=True)
class PerturbationSpec:
    norm: str = "l2"
    eps: float = 1.0
    step_size: float | None = None
    steps: int = 1
    rand_init: bool = True
    restarts: int = 1
    target: int | None = None
    rng_seed: int = 0

    @property
    def alpha(self) -> float:
        """Step size, defaulting to 1.5*eps for one step and 2.5*eps/K otherwise."""
        if self.step_size is not None:
            return float(self.step_size)
        if self.steps <= 1:
            return 1.5 * self.eps
        return 2.5 * self.eps / self.steps

    @property
    def targeted(self) -> bool:
        return self.target is not None

    def validate(self) -> None:
        if self.norm not in NORMS:
            raise AttackError(f"norm must be one of {NORMS}, got {self.norm!r}")
        if not self.eps >= 0:
            raise AttackError(f"eps must be nonnegative, got {self.eps}")
        if self.steps < 0:
            raise AttackError(f"steps must be nonnegative, got {self.steps}")
        if self.step_size is not None and not self.step_size > 0:
            raise AttackError(f"step size must be positive, got {self.step_size}")
        if self.restarts < 1:
            raise AttackError(f"restarts must be >= 1, got {self.restarts}")
        if self.restarts > 1 and not self.rand_init:
            raise AttackError("restarts > 1 requires rand_init (restarts would be identical)")

    def with_eps(self, eps: float) -> "PerturbationSpec":
        return replace(self, eps=eps)


@dataclass
class AttackResult:
    """Perturbation, loss at ``x + delta`` and success flag, per sample."""

    delta: np.ndarray
    final_loss: np.ndarray
    success: np.ndarray


def fast_l2_spec(eps: float, step_size: float | None = None, rng_seed: int = 0) -> PerturbationSpec:
    return PerturbationSpec("l2", eps, step_size, steps=1, rand_init=True, rng_seed=rng_seed)


# ---------------------------------------------------------------------------
# sampling

def sample_rng(rng_seed: int, restart: int, key) -> np.random.Generator:
    key = tuple(key) if isinstance(key, (tuple, list)) else (key,)
    return np.random.default_rng([int(rng_seed), int(restart), *map(int, key)])


def sample_uniform_linf(shape, eps: float, rng: np.random.Generator) -> np.ndarray:
    return rng.uniform(-eps, eps, size=shape) if eps > 0 else np.zeros(shape)


def sample_uniform_l2_ball(shape, eps: float, rng: np.random.Generator) -> np.ndarray:
    """Uniform draw from the solid l2 ball: Gaussian direction, radius eps * U**(1/d)."""
    d = int(np.prod(shape))
    direction = rng.standard_normal(d)
    radius = eps * rng.random() ** (1.0 / d)
    norm = np.linalg.norm(direction)
    if norm == 0 or eps == 0:
        return np.zeros(shape)
    return (direction * (radius / norm)).reshape(shape)


def _initial(x: np.ndarray, spec: PerturbationSpec, keys, restart: int) -> np.ndarray:
    if not spec.rand_init or spec.eps == 0:
        return np.zeros_like(x)
    sampler = sample_uniform_l2_ball if spec.norm == "l2" else sample_uniform_linf
    out = np.empty_like(x)
    for i, key in enumerate(keys):
        out[i] = sampler(x.shape[1:], spec.eps, sample_rng(spec.rng_seed, restart, key))
    return out


# ---------------------------------------------------------------------------
# projections

def _flat_norms(delta: np.ndarray) -> np.ndarray:
    return np.sqrt((delta.reshape(delta.shape[0], -1) ** 2).sum(axis=1))


def project_linf(delta, eps: float) -> np.ndarray:
    delta = np.asarray(delta)
    return np.clip(delta, -eps, eps).astype(delta.dtype, copy=False)


def project_l2(delta, eps: float, batched: bool = False) -> np.ndarray:
    """Rescale onto the l2 ball of radius ``eps`` when outside it.

    With ``batched`` the leading axis indexes independent samples.
    """
    delta = np.asarray(delta)
    d = delta if batched else delta[None]
    norms = _flat_norms(d)
    factor = np.ones_like(norms)
    outside = norms > eps
    factor[outside] = eps / norms[outside]
    out = d * factor.reshape((-1,) + (1,) * (d.ndim - 1)).astype(d.dtype)
    return out if batched else out[0]


def clamp_to_domain(delta, x) -> np.ndarray:
    x = np.asarray(x)
    if x.size and (x.min() < 0 or x.max() > 1):
        raise AttackError("inputs must lie in [0, 1]")
    delta = np.asarray(delta)
    return np.clip(delta, -x, 1 - x).astype(delta.dtype, copy=False)


def _project(delta: np.ndarray, spec: PerturbationSpec) -> np.ndarray:
    if spec.norm == "linf":
        return project_linf(delta, spec.eps)
    return project_l2(delta, spec.eps, batched=True)


# ---------------------------------------------------------------------------
# gradient oracle

def _loss_and_input_grad(model: Model, x: np.ndarray, labels: np.ndarray):
    """Per-sample cross-entropy, logits and per-sample input gradient."""
    graph = model_graph(model, "loss", labels, "sum")
    forward_eval(graph, {"x": x, **model.params})
    g = backward(graph, ["x"])["x"]
    out = graph.output.parents[0].data
    return T.cross_entropy_per_sample(out, labels), out, g


def _evaluate(model: Model, x: np.ndarray, y: np.ndarray, target):
    graph = model_graph(model, "logits")
    out = forward_eval(graph, {"x": x, **model.params}).data
    labels = y if target is None else target
    loss = T.cross_entropy_per_sample(out, labels)
    pred = out.argmax(axis=1)
    success = pred != y if target is None else pred == target
    return loss, success


def _prepare(model: Model, x, y, keys):
    xb, single = as_batch(model, x)
    if xb.size and (xb.min() < 0 or xb.max() > 1):
        raise AttackError("inputs must lie in [0, 1]")
    yb = np.asarray(y, dtype=np.int64).reshape(-1)
    if yb.shape[0] != xb.shape[0]:
        raise AttackError(f"{yb.shape[0]} labels for {xb.shape[0]} inputs")
    if yb.size and (yb.min() < 0 or yb.max() >= model.config.num_classes):
        raise AttackError(f"label out of range [0, {model.config.num_classes})")
    if keys is None:
        keys = list(range(xb.shape[0]))
    elif len(keys) != xb.shape[0]:
        raise AttackError(f"{len(keys)} sample keys for {xb.shape[0]} inputs")
    return xb, yb, list(keys), single


def _result(delta, loss, success, single) -> AttackResult:
    if single:
        return AttackResult(delta[0], float(loss[0]), bool(success[0]))
    return AttackResult(delta, loss, success)


def _targets(spec: PerturbationSpec, model: Model, n: int):
    if spec.target is None:
        return None
    if not 0 <= spec.target < model.config.num_classes:
        raise AttackError(f"target class {spec.target} out of range")
    return np.full(n, spec.target, dtype=np.int64)


# ---------------------------------------------------------------------------
# attacks

def fgsm(model: Model, x, y, eps: float) -> AttackResult:
    xb, yb, _, single = _prepare(model, x, y, None)
    _, _, g = _loss_and_input_grad(model, xb, yb)
    delta = (eps * np.sign(g)).astype(xb.dtype)
    delta = clamp_to_domain(project_linf(delta, eps), xb)
    loss, success = _evaluate(model, xb + delta, yb, None)
    return _result(delta, loss, success, single)


def _step(delta: np.ndarray, g: np.ndarray, spec: PerturbationSpec, alpha: float) -> np.ndarray:
    if spec.norm == "linf":
        return delta + (alpha * np.sign(g)).astype(delta.dtype)
    norms = _flat_norms(g)
    live = norms > 0
    scale = np.zeros_like(norms)
    scale[live] = alpha / norms[live]
    return delta + g * scale.reshape((-1,) + (1,) * (g.ndim - 1)).astype(delta.dtype)


def pgd(model: Model, x, y, spec: PerturbationSpec, sample_keys: Sequence | None = None,
        restart: int = 0, trace: list | None = None, evaluate: bool = True) -> AttackResult:
    """K-step projected gradient ascent on the loss (descent on the target loss).

    ``trace``, when given, receives the per-sample objective before each step
    and after the last one.  With ``evaluate=False`` the closing forward pass
    is skipped and ``final_loss``/``success`` are None (training only needs
    the perturbation).
    """
    spec.validate()
    xb, yb, keys, single = _prepare(model, x, y, sample_keys)
    target = _targets(spec, model, xb.shape[0])
    labels = yb if target is None else target
    alpha = spec.alpha
    delta = _initial(xb, spec, keys, restart).astype(xb.dtype)
    if spec.steps == 0:
        delta = clamp_to_domain(_project(delta, spec), xb)
    for _ in range(spec.steps):
        loss, _, g = _loss_and_input_grad(model, xb + delta, labels)
        if trace is not None:
            trace.append(loss)
        if target is not None:
            g = -g
        delta = clamp_to_domain(_project(_step(delta, g, spec, alpha), spec), xb)
    if not evaluate:
        return AttackResult(delta[0] if single else delta, None, None)
    loss, success = _evaluate(model, xb + delta, yb, target)
    if trace is not None:
        trace.append(loss)
    return _result(delta, loss, success, single)


def fast_l2(model: Model, x, y, eps: float, alpha: float | None = None, rng_seed: int = 0,
            sample_keys: Sequence | None = None) -> AttackResult:
    """One normalised gradient step from a uniform draw in the l2 ball, then renorm and clamp."""
    if alpha is None:
        alpha = 1.5 * eps
    xb, yb, keys, single = _prepare(model, x, y, sample_keys)
    delta = np.empty_like(xb)
    for i, key in enumerate(keys):
        delta[i] = sample_uniform_l2_ball(xb.shape[1:], eps, sample_rng(rng_seed, 0, key))
    _, _, g = _loss_and_input_grad(model, xb + delta, yb)
    norms = _flat_norms(g)
    live = norms > 0
    scale = np.zeros_like(norms)
    scale[live] = alpha / norms[live]
    delta = delta + g * scale.reshape((-1,) + (1,) * (g.ndim - 1)).astype(delta.dtype)
    delta = project_l2(delta, eps, batched=True)
    delta = clamp_to_domain(delta, xb)
    loss, success = _evaluate(model, xb + delta, yb, None)
    return _result(delta, loss, success, single)


def attack_with_restarts(model: Model, x, y, spec: PerturbationSpec,
                         sample_keys: Sequence | None = None) -> AttackResult:
    """Best of ``spec.restarts`` independent runs: highest loss, or lowest target loss."""
    spec.validate()
    best = None
    for r in range(spec.restarts):
        res = pgd(model, x, y, spec, sample_keys, restart=r)
        if best is None:
            best = res
            continue
        loss = np.atleast_1d(res.final_loss)
        cur = np.atleast_1d(best.final_loss)
        better = loss < cur if spec.targeted else loss > cur
        if np.ndim(res.final_loss) == 0:
            if better[0]:
                best = res
            continue
        best.delta[better] = res.delta[better]
        best.final_loss[better] = res.final_loss[better]
        best.success[better] = res.success[better]
    return best
