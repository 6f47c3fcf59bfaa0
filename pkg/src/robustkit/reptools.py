"""Representation inspection: feature visualisation, representation-space
interpolation, large targeted perturbations and a smoothness diagnostic."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .attacks import PerturbationSpec, clamp_to_domain, pgd, project_l2
from .data import Dataset
from .models import Model, _forward, as_batch, features, predict
from .tensor import Tensor

NOISE_LOW, NOISE_HIGH = 0.4, 0.6
INTERP_FORMS = ("convex", "difference")


class RequestError(ValueError):
    pass


def _feature_objective(model: Model, x: np.ndarray, objective):
    """Value and input gradient of ``objective(features)`` for one sample."""
    xt = Tensor(x[None].astype(model.dtype))
    params = {k: Tensor(v) for k, v in model.params.items()}
    feats, _ = _forward(model, xt, params)
    out = objective(feats)
    (g,) = T.grad(out, [xt])
    return float(out.data), g[0]


def _normalised(g: np.ndarray, size: float) -> np.ndarray | None:
    norm = float(np.sqrt((g.astype(np.float64) ** 2).sum()))
    if norm == 0:
        return None
    return (g * (size / norm)).astype(g.dtype)


def noise_seed(shape, seed: int = 0) -> np.ndarray:
    return np.random.default_rng(seed).uniform(NOISE_LOW, NOISE_HIGH, size=shape)


@dataclass(frozen=True)
class VizRequest:
    node: int
    seed_image: np.ndarray | None = None
    steps: int = 200
    eps: float = math.inf
    step_size: float = 0.05
    noise_seed: int = 0

    def validate(self, model: Model) -> None:
        if not 0 <= self.node < model.config.rep_dim:
            raise RequestError(f"node {self.node} out of range [0, {model.config.rep_dim})")
        if self.steps < 0 or not self.step_size > 0 or not self.eps > 0:
            raise RequestError("steps must be >= 0; step size and eps must be positive")
        if self.seed_image is not None:
            img = np.asarray(self.seed_image)
            if img.shape != model.config.input_shape:
                raise RequestError(f"seed image shape {img.shape} != model input {model.config.input_shape}")
            if img.min() < 0 or img.max() > 1:
                raise RequestError("seed image must lie in [0, 1]")


@dataclass
class VizResult:
    image: np.ndarray
    trace: list[float]
    best_step: int

    @property
    def activation(self) -> float:
        return self.trace[self.best_step]


def feature_viz(model: Model, request: VizRequest) -> VizResult:
    """Normalised gradient ascent on one representation coordinate.

    Iterates are kept inside the l2 ball of radius ``eps`` around the seed
    (when finite) and inside [0, 1].  ``trace[k]`` is the activation of
    iterate ``k`` (``trace[0]`` is the seed); the best iterate is returned.
    A zero gradient ends the ascent early.
    """
    request.validate(model)
    shape = model.config.input_shape
    seed = (np.asarray(request.seed_image, dtype=model.dtype) if request.seed_image is not None
            else noise_seed(shape, request.noise_seed).astype(model.dtype))
    onehot = np.zeros(model.config.rep_dim, dtype=model.dtype)
    onehot[request.node] = 1

    def objective(feats):
        return T.sum_all(T.matmul(feats, Tensor(onehot)))

    x = seed.copy()
    best, best_k, trace = seed.copy(), 0, []
    for k in range(request.steps + 1):
        value, g = _feature_objective(model, x, objective)
        trace.append(value)
        if value > trace[best_k]:
            best, best_k = x.copy(), k
        if k == request.steps:
            break
        step = _normalised(g, request.step_size)
        if step is None:
            break
        delta = x + step - seed
        if math.isfinite(request.eps):
            delta = project_l2(delta, request.eps)
        x = seed + clamp_to_domain(delta, seed)
    return VizResult(best, trace, best_k)


@dataclass(frozen=True)
class InterpolationRequest:
    x1: np.ndarray
    x2: np.ndarray
    lam: float
    steps: int = 200
    step_size: float = 0.02
    form: str = "convex"

    def validate(self, model: Model) -> None:
        a, b = np.asarray(self.x1), np.asarray(self.x2)
        if a.shape != b.shape or a.shape != model.config.input_shape:
            raise RequestError(f"anchors must both have shape {model.config.input_shape}, got {a.shape} "
                               f"and {b.shape}")
        if min(a.min(), b.min()) < 0 or max(a.max(), b.max()) > 1:
            raise RequestError("anchors must lie in [0, 1]")
        if not 0 <= self.lam <= 1:
            raise RequestError(f"lambda must lie in [0, 1], got {self.lam}")
        if self.form not in INTERP_FORMS:
            raise RequestError(f"form must be one of {INTERP_FORMS}, got {self.form!r}")
        if self.steps < 0 or not self.step_size > 0:
            raise RequestError("steps must be >= 0 and step size positive")


@dataclass
class InterpolationResult:
    image: np.ndarray
    trace: list[float]
    best_step: int
    target: np.ndarray

    @property
    def objective(self) -> float:
        return self.trace[self.best_step]


def interpolation_target(model: Model, request: InterpolationRequest) -> np.ndarray:
    f1 = features(model, request.x1).astype(np.float64)
    f2 = features(model, request.x2).astype(np.float64)
    lam = request.lam
    if request.form == "convex":
        return lam * f1 + (1 - lam) * f2
    return lam * f1 - (1 - lam) * f2


def interpolate(model: Model, request: InterpolationRequest) -> InterpolationResult:
    """Match a blended representation by descending ||target - f(x)||_2 from the pixel blend.

    ``form="convex"`` blends as ``lam*f(x1) + (1-lam)*f(x2)``;
    ``form="difference"`` uses ``lam*f(x1) - (1-lam)*f(x2)``.  Steps are
    normalised gradient steps on the squared distance, clamped to [0, 1];
    ``trace`` holds the (unsquared) distance of each iterate.
    """
    request.validate(model)
    target = interpolation_target(model, request)
    target_t = Tensor(target.astype(model.dtype)[None])
    lam = request.lam
    x = (lam * np.asarray(request.x1, dtype=np.float64)
         + (1 - lam) * np.asarray(request.x2, dtype=np.float64)).astype(model.dtype)
    x = np.clip(x, 0, 1)

    def objective(feats):
        d = feats - target_t
        return T.sum_all(d * d)

    best, best_k, trace = x.copy(), 0, []
    for k in range(request.steps + 1):
        sq, g = _feature_objective(model, x, objective)
        trace.append(math.sqrt(max(sq, 0.0)))
        if trace[-1] < trace[best_k]:
            best, best_k = x.copy(), k
        if k == request.steps or trace[-1] == 0:
            break
        step = _normalised(g, request.step_size)
        if step is None:
            break
        x = x + clamp_to_domain(-step, x)
    return InterpolationResult(best, trace, best_k, target)


@dataclass
class TargetedResult:
    image: np.ndarray
    trace: list[float]
    prediction: int
    delta: np.ndarray


def targeted_perturbation(model: Model, x, target: int, steps: int = 1000, eps: float = 500.0,
                          step_size: float | None = None, rand_init: bool = False,
                          rng_seed: int = 0) -> TargetedResult:
    """Targeted l2 PGD with a very large budget; ``trace`` is the target loss per iterate."""
    xb, single = as_batch(model, x)
    if not single:
        raise RequestError("targeted_perturbation works on one sample at a time")
    spec = PerturbationSpec("l2", eps, step_size, steps, rand_init, 1, int(target), rng_seed)
    trace: list[np.ndarray] = []
    label = int(predict(model, xb)[0])
    res = pgd(model, xb[0], label, spec, trace=trace)
    image = xb[0] + res.delta
    return TargetedResult(image, [float(t[0]) for t in trace], int(predict(model, image)), res.delta)


@dataclass
class SmoothnessStats:
    ratios: np.ndarray
    probe_eps: float

    @property
    def median(self) -> float:
        return float(np.median(self.ratios))

    @property
    def mean(self) -> float:
        return float(self.ratios.mean())

    @property
    def max(self) -> float:
        return float(self.ratios.max())

    def quantile(self, q: float) -> float:
        return float(np.quantile(self.ratios, q))

    def summary(self) -> dict[str, float]:
        return {"median": self.median, "mean": self.mean, "q10": self.quantile(0.1),
                "q90": self.quantile(0.9), "max": self.max}


def representation_smoothness(model: Model, data: Dataset, probe_eps: float, samples: int = 200,
                              seed: int = 0, batch_size: int = 256) -> SmoothnessStats:
    """Distribution of ||f(x) - f(x + d)||_2 / probe_eps for random d with ||d||_2 = probe_eps.

    Sample ``k`` picks a random data point and a uniformly random direction
    from its own stream ``(seed, k)``.  ``x + d`` is not clamped, so the
    probe length is exact.
    """
    if not probe_eps > 0:
        raise ValueError(f"probe eps must be positive, got {probe_eps}")
    if samples < 1 or len(data) == 0:
        raise ValueError("need at least one sample and a nonempty dataset")
    shape = data.inputs.shape[1:]
    d = int(np.prod(shape))
    idx = np.empty(samples, dtype=np.int64)
    deltas = np.empty((samples, *shape))
    for k in range(samples):
        rng = np.random.default_rng([int(seed), k])
        idx[k] = rng.integers(len(data))
        v = rng.standard_normal(d)
        deltas[k] = (v * (probe_eps / np.linalg.norm(v))).reshape(shape)
    ratios = np.empty(samples)
    for lo in range(0, samples, batch_size):
        sl = slice(lo, lo + batch_size)
        x = data.inputs[idx[sl]].astype(np.float64)
        fa = features(model, x.astype(model.dtype)).astype(np.float64)
        fb = features(model, (x + deltas[sl]).astype(model.dtype)).astype(np.float64)
        ratios[sl] = np.sqrt(((fa - fb) ** 2).sum(axis=1)) / probe_eps
    return SmoothnessStats(ratios, float(probe_eps))
