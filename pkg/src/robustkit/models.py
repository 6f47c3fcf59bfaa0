"""Networks under study: MLPs, small residual CNNs and linear probes.

Every model exposes ``features`` (the penultimate representation) and
``logits`` (a final affine layer applied to the features), computed by the
same graph so the decomposition holds exactly.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from math import prod, sqrt

import numpy as np

from . import tensor as T
from .tensor import ComputeGraph, GraphError, Tensor, backward, forward_eval

KINDS = ("mlp", "rescnn", "linear")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    """Architecture description.

    ``widths`` holds the hidden widths for ``mlp``, the per-stage channel
    counts for ``rescnn`` and a single representation width for ``linear``.
    """

    kind: str
    input_shape: tuple[int, ...]
    widths: tuple[int, ...]
    num_classes: int
    blocks_per_stage: int = 1
    representation_dim: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))

    @property
    def rep_dim(self) -> int:
        return self.widths[-1]

    @property
    def input_dim(self) -> int:
        return prod(self.input_shape)

    def validate(self) -> None:
        problems = []
        if self.kind not in KINDS:
            problems.append(f"kind must be one of {KINDS}, got {self.kind!r}")
        if self.num_classes < 2:
            problems.append(f"class count must be >= 2, got {self.num_classes}")
        if not self.input_shape or any(d < 1 for d in self.input_shape):
            problems.append(f"input shape must have positive dims, got {self.input_shape}")
        if not self.widths:
            problems.append(f"{self.kind} requires at least one width")
        elif any(w < 1 for w in self.widths):
            problems.append(f"widths must be positive, got {self.widths}")
        if self.blocks_per_stage < 0:
            problems.append("residual blocks per stage must be nonnegative")
        if self.kind == "rescnn" and len(self.input_shape) == 3 and self.input_shape[1] != self.input_shape[2]:
            problems.append(f"rescnn requires square spatial input, got {self.input_shape[1:]}")
        if self.kind == "rescnn" and len(self.input_shape) != 3:
            problems.append(f"rescnn requires a (channels, height, width) input, got {self.input_shape}")
        if self.kind == "linear" and len(self.widths) != 1:
            problems.append("linear takes exactly one width (the representation dim)")
        if self.widths and self.representation_dim is not None and self.representation_dim != self.rep_dim:
            problems.append(f"representation dim {self.representation_dim} != last width {self.rep_dim}")
        if problems:
            raise ConfigError("invalid model config: " + "; ".join(problems))


def preset(name: str, input_shape, num_classes: int = 10) -> ModelConfig:
    """Desk-scale default architectures."""
    if name == "mlp-tiny":
        return ModelConfig("mlp", input_shape, (64, 64), num_classes)
    if name == "rescnn-tiny":
        return ModelConfig("rescnn", input_shape, (8, 16, 32), num_classes, blocks_per_stage=1)
    raise ConfigError(f"unknown preset {name!r}; expected mlp-tiny or rescnn-tiny")


@dataclass
class Model:
    config: ModelConfig
    params: dict[str, np.ndarray]
    residual_params: tuple[str, ...] = field(default=())

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    @property
    def parameter_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def copy(self) -> "Model":
        return Model(self.config, {k: v.copy() for k, v in self.params.items()}, self.residual_params)

    def astype(self, dtype) -> "Model":
        return Model(self.config, {k: v.astype(dtype) for k, v in self.params.items()}, self.residual_params)

    def head(self) -> tuple[np.ndarray, np.ndarray]:
        return self.params["fc.weight"], self.params["fc.bias"]


def _layout(config: ModelConfig) -> tuple[list[tuple[str, tuple[int, ...], int]], list[str]]:
    """Parameter (name, shape, fan_in) list in architecture order, plus residual-branch names."""
    specs = []
    residual = []
    if config.kind == "mlp":
        fan = config.input_dim
        for i, w in enumerate(config.widths):
            specs += [(f"fc{i}.weight", (w, fan), fan), (f"fc{i}.bias", (w,), fan)]
            fan = w
    elif config.kind == "linear":
        fan = config.input_dim
        specs += [("rep.weight", (config.rep_dim, fan), fan), ("rep.bias", (config.rep_dim,), fan)]
    else:
        cin = config.input_shape[0]
        w0 = config.widths[0]
        specs += [("stem.weight", (w0, cin, 3, 3), cin * 9), ("stem.bias", (w0,), cin * 9)]
        prev = w0
        for s, w in enumerate(config.widths):
            if s > 0:
                specs += [(f"down{s}.weight", (w, prev, 3, 3), prev * 9), (f"down{s}.bias", (w,), prev * 9)]
            for b in range(config.blocks_per_stage):
                for c in ("a", "b"):
                    name = f"stage{s}.block{b}.conv{c}"
                    specs += [(f"{name}.weight", (w, w, 3, 3), w * 9), (f"{name}.bias", (w,), w * 9)]
                    residual += [f"{name}.weight", f"{name}.bias"]
            if config.blocks_per_stage:
                specs.append((f"stage{s}.scale", (1,), 1))
                residual.append(f"stage{s}.scale")
            prev = w
    specs += [("fc.weight", (config.num_classes, config.rep_dim), config.rep_dim),
              ("fc.bias", (config.num_classes,), config.rep_dim)]
    return specs, residual


def build_model(config: ModelConfig, seed: int = 0, dtype="float32", residual_scale: float = 0.1) -> Model:
    """Deterministic He-uniform fan-in init; biases start at zero.

    Stage scales start at ``residual_scale``.  Starting the residual branches
    small keeps training without normalisation layers stable; at 1.0,
    multi-step adversarial training tends to collapse to a constant
    predictor.
    """
    config.validate()
    dt = T.DTYPES.get(dtype, dtype) if isinstance(dtype, str) else dtype
    rng = np.random.default_rng(seed)
    specs, residual = _layout(config)
    params = {}
    for name, shape, fan_in in specs:
        if name.endswith(".scale"):
            value = np.full(shape, float(residual_scale))
        elif name.endswith(".bias"):
            value = np.zeros(shape)
        else:
            gain = sqrt(6.0) if name != "fc.weight" else 1.0
            bound = gain / sqrt(fan_in)
            value = rng.uniform(-bound, bound, size=shape)
        params[name] = np.asarray(value, dtype=dt)
    return Model(config, params, tuple(residual))


# ---------------------------------------------------------------------------
# graph construction

def _forward(model: Model, x: Tensor, p: dict[str, Tensor]) -> tuple[Tensor, Tensor]:
    cfg = model.config
    n = x.shape[0]
    if cfg.kind in ("mlp", "linear"):
        h = T.reshape(x, (n, cfg.input_dim)) if x.data.ndim != 2 else x
        if cfg.kind == "linear":
            h = T.linear(h, p["rep.weight"], p["rep.bias"])
        else:
            for i in range(len(cfg.widths)):
                h = T.relu(T.linear(h, p[f"fc{i}.weight"], p[f"fc{i}.bias"]))
        feats = h
    else:
        h = T.relu(T.conv2d(T.to_channels_last(x), p["stem.weight"], p["stem.bias"], stride=1, padding=1))
        for s in range(len(cfg.widths)):
            if s > 0:
                h = T.relu(T.conv2d(h, p[f"down{s}.weight"], p[f"down{s}.bias"], stride=2, padding=1))
            for b in range(cfg.blocks_per_stage):
                name = f"stage{s}.block{b}"
                r = T.relu(T.conv2d(h, p[f"{name}.conva.weight"], p[f"{name}.conva.bias"], padding=1))
                r = T.conv2d(r, p[f"{name}.convb.weight"], p[f"{name}.convb.bias"], padding=1)
                h = h + T.mul(r, T.reshape(p[f"stage{s}.scale"], (1, 1, 1, 1)))
        feats = T.global_avg_pool(T.relu(h))
    out = T.linear(feats, p["fc.weight"], p["fc.bias"])
    return feats, out


def as_batch(model: Model, x) -> tuple[np.ndarray, bool]:
    """Return ``x`` as a batch in the model dtype, and whether it was a single sample."""
    x = np.asarray(x, dtype=model.dtype)
    shape = model.config.input_shape
    if x.shape == shape:
        return x[None], True
    if x.shape[1:] == shape:
        return x, False
    raise GraphError(f"input: expected shape {shape} or (N, *{shape}), got {x.shape}")


def model_graph(model: Model, head: str = "logits", labels=None, reduction: str = "mean") -> ComputeGraph:
    """Graph over leaves ``x`` and every parameter name.

    ``head`` selects the output: ``"logits"``, ``"features"`` or ``"loss"``.
    """
    shapes = {"x": (None, *model.config.input_shape)}
    shapes.update({k: v.shape for k, v in model.params.items()})

    def build(x, **p):
        feats, out = _forward(model, x, p)
        if head == "features":
            return feats
        if head == "logits":
            return out
        return T.softmax_cross_entropy(out, labels, reduction)

    return ComputeGraph(build, shapes)


def _run(model: Model, x, head: str, labels=None, reduction="mean"):
    xb, single = as_batch(model, x)
    graph = model_graph(model, head, labels, reduction)
    out = forward_eval(graph, {"x": xb, **model.params})
    return graph, out, single


def logits(model: Model, x) -> np.ndarray:
    _, out, single = _run(model, x, "logits")
    return out.data[0] if single else out.data


def features(model: Model, x) -> np.ndarray:
    _, out, single = _run(model, x, "features")
    return out.data[0] if single else out.data


def forward_both(model: Model, x) -> tuple[np.ndarray, np.ndarray]:
    xb, _ = as_batch(model, x)
    p = {k: Tensor(v) for k, v in model.params.items()}
    feats, out = _forward(model, Tensor(xb), p)
    return feats.data, out.data


def predict(model: Model, x) -> np.ndarray:
    return np.argmax(logits(model, x), axis=-1)


def _check_labels(model: Model, y, n: int) -> np.ndarray:
    y = np.asarray(y, dtype=np.int64).reshape(-1)
    if y.shape[0] != n:
        raise GraphError(f"labels: expected {n}, got {y.shape[0]}")
    if y.size and (y.min() < 0 or y.max() >= model.config.num_classes):
        raise ValueError(f"label out of range [0, {model.config.num_classes})")
    return y


def input_gradient(model: Model, x, y) -> np.ndarray:
    """Gradient of the cross-entropy loss with respect to the input.

    For a batch the loss is summed, so each row is that sample's own gradient.
    """
    xb, single = as_batch(model, x)
    yb = _check_labels(model, y, xb.shape[0])
    graph = model_graph(model, "loss", yb, "sum")
    forward_eval(graph, {"x": xb, **model.params})
    g = backward(graph, ["x"])["x"]
    return g[0] if single else g


def loss_and_grads(model: Model, x, y, wrt_input: bool = False):
    """Mean batch loss, logits, parameter gradients and optionally the input gradient."""
    xb, _ = as_batch(model, x)
    yb = _check_labels(model, y, xb.shape[0])
    leaves = {"x": Tensor(xb)}
    leaves.update({k: Tensor(v) for k, v in model.params.items()})
    params = {k: leaves[k] for k in model.params}
    _, out = _forward(model, leaves["x"], params)
    loss = T.softmax_cross_entropy(out, yb, "mean")
    names = list(model.params)
    wrt = [leaves[k] for k in names] + ([leaves["x"]] if wrt_input else [])
    gs = T.grad(loss, wrt)
    grads = dict(zip(names, gs[:len(names)]))
    gx = gs[-1] if wrt_input else None
    return float(loss.data), out.data, grads, gx


def zero_residual_branches(model: Model) -> Model:
    out = model.copy()
    for name in model.residual_params:
        out.params[name] = np.zeros_like(out.params[name])
    return out


def linear_model(weight, bias, dtype="float64", rep_weight=None) -> Model:
    """Softmax-linear classifier ``x -> W (R x) + b``.

    The representation map ``R`` defaults to the identity, giving
    ``x -> W x + b`` with ``features(x) == x``.
    """
    weight = np.asarray(weight)
    k, r = weight.shape
    dt = T.DTYPES.get(dtype, dtype) if isinstance(dtype, str) else dtype
    rep = np.eye(r) if rep_weight is None else np.asarray(rep_weight)
    if rep.shape[0] != r:
        raise ConfigError(f"representation map has {rep.shape[0]} outputs, classifier expects {r}")
    cfg = ModelConfig("linear", (rep.shape[1],), (r,), k)
    cfg.validate()
    params = {
        "rep.weight": rep.astype(dt),
        "rep.bias": np.zeros(r, dtype=dt),
        "fc.weight": weight.astype(dt),
        "fc.bias": np.asarray(bias, dtype=dt),
    }
    return Model(cfg, params)
