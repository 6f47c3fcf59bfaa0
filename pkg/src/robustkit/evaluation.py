"""Adversarial accuracy under strong restarted attacks and accuracy-vs-eps curves."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .attacks import AttackError, PerturbationSpec, pgd
from .data import Dataset
from .models import Model, predict

CURVE_HEADER = ["eps", "adv_acc", "clean_acc", "steps", "restarts", "seed"]


def evaluation_spec(eps: float = 1.0, norm: str = "l2", steps: int = 20, restarts: int = 10,
                    rng_seed: int = 0) -> PerturbationSpec:
    """Strong evaluation attack: K-step PGD with random init and R restarts, alpha = 2.5*eps/K."""
    return PerturbationSpec(norm, eps, None, steps, True, restarts, None, rng_seed)


def _clean_correct(model: Model, data: Dataset, batch_size: int) -> np.ndarray:
    out = np.empty(len(data), dtype=bool)
    for lo in range(0, len(data), batch_size):
        sl = slice(lo, lo + batch_size)
        out[sl] = predict(model, data.inputs[sl]) == data.labels[sl]
    return out


def robust_mask(model: Model, data: Dataset, spec: PerturbationSpec, batch_size: int = 256,
                key_prefix: tuple = ()) -> np.ndarray:
    """Per-sample flag: correct on the clean input and not fooled by any restart.

    Clean mistakes are never attacked.  Restart ``r`` of sample ``i`` draws
    from the stream keyed by ``(rng_seed, r, *key_prefix, i)``; a sample that
    one restart fools is dropped from later restarts, which leaves the
    outcome equal to running every restart, so more restarts can only lower
    the count.
    """
    spec.validate()
    if spec.targeted:
        raise AttackError("adversarial accuracy is defined for untargeted attacks")
    alive = _clean_correct(model, data, batch_size)
    if spec.eps == 0:
        return alive
    for r in range(spec.restarts):
        idx = np.flatnonzero(alive)
        if idx.size == 0:
            break
        for lo in range(0, idx.size, batch_size):
            chunk = idx[lo:lo + batch_size]
            keys = [(*key_prefix, int(i)) for i in chunk]
            res = pgd(model, data.inputs[chunk], data.labels[chunk], spec, keys, restart=r)
            alive[chunk[res.success]] = False
    return alive


def adversarial_accuracy(model: Model, data: Dataset, spec: PerturbationSpec, batch_size: int = 256,
                         key_prefix: tuple = ()) -> float:
    if len(data) == 0:
        raise ValueError("dataset is empty")
    return float(robust_mask(model, data, spec, batch_size, key_prefix).mean())


def clean_accuracy(model: Model, data: Dataset, batch_size: int = 256) -> float:
    if len(data) == 0:
        raise ValueError("dataset is empty")
    return float(_clean_correct(model, data, batch_size).mean())


@dataclass
class RobustnessCurve:
    eps: list[float]
    adv_acc: list[float]
    clean_acc: float
    steps: int
    restarts: int
    seed: int
    norm: str = "l2"
    model_id: str = "model"
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.eps) != len(self.adv_acc):
            raise ValueError(f"{len(self.eps)} eps values but {len(self.adv_acc)} accuracies")
        if any(b <= a for a, b in zip(self.eps, self.eps[1:])):
            raise ValueError(f"eps values must be strictly ascending, got {self.eps}")

    def rows(self) -> list[list]:
        return [[repr(float(e)), repr(float(a)), repr(float(self.clean_acc)), self.steps, self.restarts, self.seed]
                for e, a in zip(self.eps, self.adv_acc)]

    def write_csv(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(CURVE_HEADER)
            w.writerows(self.rows())

    @classmethod
    def read_csv(cls, path, model_id: str = "model", norm: str = "l2") -> "RobustnessCurve":
        with open(path, newline="") as f:
            rows = list(csv.DictReader(f))
        if not rows:
            raise ValueError(f"{path}: no curve points")
        first = rows[0]
        return cls([float(r["eps"]) for r in rows], [float(r["adv_acc"]) for r in rows],
                   float(first["clean_acc"]), int(first["steps"]), int(first["restarts"]),
                   int(first["seed"]), norm, model_id)

    def write_gnuplot(self, path) -> None:
        """Whitespace-separated ``eps adv_acc`` columns with a comment header."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        lines = [f"# {self.model_id}: {self.norm} PGD, {self.steps} steps, {self.restarts} restarts, "
                 f"seed {self.seed}, clean accuracy {self.clean_acc:.6g}", "# eps adv_acc"]
        lines += [f"{e:.8g} {a:.8g}" for e, a in zip(self.eps, self.adv_acc)]
        path.write_text("\n".join(lines) + "\n")


def eps_sweep(model: Model, data: Dataset, eps_list, base: PerturbationSpec | None = None,
              model_id: str = "model", batch_size: int = 256, out_csv=None) -> RobustnessCurve:
    """Adversarial accuracy at each eps; the step size follows 2.5*eps/K unless ``base`` fixes it.

    Each eps gets its own key prefix, so restarts never share random draws
    across eps values.
    """
    base = base or evaluation_spec()
    eps_list = [float(e) for e in eps_list]
    if any(e < 0 for e in eps_list):
        raise AttackError("eps values must be nonnegative")
    clean = clean_accuracy(model, data, batch_size)
    accs = []
    for k, eps in enumerate(eps_list):
        spec = replace(base, eps=eps)
        accs.append(adversarial_accuracy(model, data, spec, batch_size, key_prefix=(k,)) if eps > 0 else clean)
    curve = RobustnessCurve(eps_list, accs, clean, base.steps, base.restarts, base.rng_seed, base.norm, model_id)
    if out_csv is not None:
        curve.write_csv(out_csv)
    return curve
