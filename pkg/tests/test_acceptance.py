"""Acceptance suite: one test per criterion, each reporting a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v -s``; the summary lines
also appear at the end of any pytest run that includes this module.
"""
import time
from dataclasses import replace

import numpy as np
import pytest
from numpy.lib.stride_tricks import sliding_window_view

from conftest import record
from robustkit.attacks import (PerturbationSpec, attack_with_restarts, fast_l2, fast_l2_spec, fgsm, pgd,
                               sample_rng, sample_uniform_l2_ball)
from robustkit.data import generate_shapes_dataset, two_pixel_dataset
from robustkit.distributed import decode_frame, distributed_train, encode_frame, worker_step
from robustkit.evaluation import eps_sweep, evaluation_spec
from robustkit.models import ModelConfig, build_model, linear_model, logits, loss_and_grads, predict, preset
from robustkit.reptools import (InterpolationRequest, VizRequest, feature_viz, interpolate, noise_seed,
                                representation_smoothness, targeted_perturbation)
from robustkit.timing import estimate_total_time, measure_batch_time
from robustkit.training import TrainConfig, batches, train_adversarial


def report(criterion, ok, detail):
    record(criterion, ok, detail)
    print(f"criterion {criterion}: {'PASS' if ok else 'FAIL'}  {detail}")


# ---------------------------------------------------------------------------
# 1. gradients against an independent numpy forward pass
#
# Every array below carries a leading "variant" axis (size 1 or P), so one
# call evaluates the loss for P perturbed copies of a single tensor.

def _conv(h, w, b, stride):
    hp = np.pad(h, ((0, 0), (0, 0), (1, 1), (1, 1), (0, 0)))
    win = sliding_window_view(hp, (3, 3), axis=(2, 3))[:, :, ::stride, ::stride]
    p, n, ho, wo = win.shape[:4]
    cols = win.reshape(p, n * ho * wo, -1)
    out = cols @ w.reshape(w.shape[0], w.shape[1], -1).transpose(0, 2, 1) + b[:, None, :]
    return out.reshape(out.shape[0], n, ho, wo, -1)


def reference_loss(cfg, p, x, y):
    relu = lambda a: np.maximum(a, 0)
    if cfg.kind == "mlp":
        h = x.reshape(x.shape[0], x.shape[1], -1)
        for i in range(len(cfg.widths)):
            h = relu(h @ p[f"fc{i}.weight"].transpose(0, 2, 1) + p[f"fc{i}.bias"][:, None])
        feats = h
    else:
        h = relu(_conv(x.transpose(0, 1, 3, 4, 2), p["stem.weight"], p["stem.bias"], 1))
        for s in range(len(cfg.widths)):
            if s:
                h = relu(_conv(h, p[f"down{s}.weight"], p[f"down{s}.bias"], 2))
            for b in range(cfg.blocks_per_stage):
                k = f"stage{s}.block{b}"
                r = relu(_conv(h, p[f"{k}.conva.weight"], p[f"{k}.conva.bias"], 1))
                r = _conv(r, p[f"{k}.convb.weight"], p[f"{k}.convb.bias"], 1)
                h = h + r * p[f"stage{s}.scale"].reshape(-1, 1, 1, 1, 1)
        feats = relu(h).mean(axis=(2, 3))
    z = feats @ p["fc.weight"].transpose(0, 2, 1) + p["fc.bias"][:, None]
    zmax = z.max(axis=2, keepdims=True)
    lse = np.log(np.exp(z - zmax).sum(axis=2)) + zmax[..., 0]
    picked = np.take_along_axis(z, y[None, :, None], axis=2)[..., 0]
    return (lse - picked).mean(axis=1)


def reference_gradient(cfg, params, x, y, name, h=1e-6, chunk=128):
    """Central differences of ``reference_loss`` for every entry of one tensor."""
    base = {k: v[None] for k, v in params.items()}
    base["x"] = x[None]
    target = base[name][0]
    flat = target.ravel()
    out = np.empty(flat.size)
    for lo in range(0, flat.size, chunk):
        idx = np.arange(lo, min(lo + chunk, flat.size))
        rows = np.arange(idx.size)
        var = np.repeat(flat[None], 2 * idx.size, axis=0)
        var[2 * rows, idx] += h
        var[2 * rows + 1, idx] -= h
        args = dict(base)
        args[name] = var.reshape(-1, *target.shape)
        xs = args.pop("x")
        f = reference_loss(cfg, args, xs, y)
        out[idx] = (f[0::2] - f[1::2]) / (2 * h)
    return out.reshape(target.shape)


def _random_models():
    rng = np.random.default_rng(2024)
    out = []
    for i in range(10):
        shape = (int(rng.integers(2, 9)),) if i % 2 else (1, 2, int(rng.integers(2, 4)))
        widths = tuple(int(w) for w in rng.integers(2, 9, size=rng.integers(1, 4)))
        out.append(ModelConfig("mlp", shape, widths, int(rng.integers(2, 6))))
    for i in range(10):
        c, s = (int(v) for v in rng.integers((1, 4), (3, 6)))
        out.append(preset("rescnn-tiny", (c, s, s), int(rng.integers(2, 6))))
    models = []
    for i, cfg in enumerate(out):
        m = build_model(cfg, seed=i, dtype="float64")
        for k, v in m.params.items():
            if k.endswith(".bias"):
                m.params[k] = rng.normal(0, 0.1, v.shape)
            elif k.endswith(".scale"):
                m.params[k] = rng.uniform(0.3, 1.2, v.shape)
        n = int(rng.integers(1, 4))
        x = rng.uniform(0, 1, (n, *cfg.input_shape))
        y = rng.integers(0, cfg.num_classes, n)
        models.append((m, x, y))
    return models


def test_criterion_01_gradients_match_finite_differences():
    start = time.perf_counter()
    worst, worst_at, loss_gap = 0.0, "", 0.0
    for i, (m, x, y) in enumerate(_random_models()):
        loss, _, grads, gx = loss_and_grads(m, x, y, wrt_input=True)
        ref = reference_loss(m.config, {k: v[None] for k, v in m.params.items()}, x[None], y)[0]
        loss_gap = max(loss_gap, abs(ref - loss))
        for name in [*m.params, "x"]:
            engine = gx if name == "x" else grads[name]
            numeric = reference_gradient(m.config, m.params, x, y, name)
            scale = max(np.abs(engine).max(), np.abs(numeric).max(), 1e-12)
            err = float(np.abs(engine - numeric).max() / scale)
            if err > worst:
                worst, worst_at = err, f"model {i} {name}"
    elapsed = time.perf_counter() - start
    ok = worst < 1e-5 and loss_gap < 1e-12 and elapsed < 120
    report(1, ok, f"20 models, worst rel err {worst:.2e} ({worst_at}), loss gap {loss_gap:.1e}, {elapsed:.0f}s")
    assert loss_gap < 1e-12
    assert worst < 1e-5, worst_at
    assert elapsed < 120


# ---------------------------------------------------------------------------
# 2. feasibility of every attack output

def _attack_pool():
    pool = []
    for seed, dtype in enumerate(("float32", "float64") * 3):
        if seed < 4:
            cfg = ModelConfig("mlp", (1, 4, 4), (8,), 3)
        else:
            cfg = ModelConfig("rescnn", (1, 4, 4), (2, 3), 3)
        pool.append(build_model(cfg, seed=seed, dtype=dtype, residual_scale=0.5))
    return pool


def test_criterion_02_attack_outputs_are_feasible():
    start = time.perf_counter()
    rng = np.random.default_rng(7)
    pool = _attack_pool()
    calls, violations, worst = 0, 0, 0.0
    while calls < 10_000:
        model = pool[rng.integers(len(pool))]
        n = int(rng.integers(1, 4))
        x = rng.uniform(0, 1, (n, *model.config.input_shape))
        # Push some pixels onto the domain boundary.
        x[rng.random(x.shape) < 0.2] = 0.0
        x[rng.random(x.shape) < 0.2] = 1.0
        x = x.astype(model.dtype)
        y = rng.integers(0, model.config.num_classes, n)
        eps = float(rng.choice([0.0, rng.uniform(0, 0.3), rng.uniform(0.3, 4.0)]))
        norm = "l2" if rng.random() < 0.5 else "linf"
        kind = rng.random()
        if kind < 0.08:
            norm, res = "linf", fgsm(model, x, y, eps)
        elif kind < 0.16:
            norm, res = "l2", fast_l2(model, x, y, eps, rng_seed=int(rng.integers(1000)))
        else:
            steps = int(rng.choice([0, 1, 7, 20]))
            step_size = None if rng.random() < 0.5 else float(rng.uniform(0.01, 2.0))
            restarts = int(rng.integers(1, 3))
            spec = PerturbationSpec(norm, eps, step_size, steps, True, restarts,
                                    None if rng.random() < 0.8 else int(rng.integers(3)), int(rng.integers(1000)))
            res = attack_with_restarts(model, x, y, spec) if restarts > 1 else pgd(model, x, y, spec)
        calls += 1
        d = res.delta.reshape(n, -1).astype(np.float64)
        size = np.sqrt((d ** 2).sum(axis=1)) if norm == "l2" else np.abs(d).max(axis=1)
        over = size - eps * (1 + 1e-5)
        worst = max(worst, float((size / eps).max()) if eps > 0 else float(size.max()))
        xa = x + res.delta
        if (over > 0).any() or xa.min() < 0 or xa.max() > 1 or res.delta.dtype != x.dtype:
            violations += 1
    elapsed = time.perf_counter() - start
    ok = violations == 0 and elapsed < 120
    report(2, ok, f"{calls} calls, {violations} violations, max |delta|/eps {worst:.7f}, {elapsed:.0f}s")
    assert violations == 0
    assert elapsed < 120


# ---------------------------------------------------------------------------
# 3. closed-form optimum on linear models; one-step linf PGD is FGSM

def test_criterion_03_oracle_equivalence():
    start = time.perf_counter()
    rng = np.random.default_rng(3)
    worst = 0.0
    for trial in range(60):
        d = int(rng.integers(2, 30))
        model = linear_model(rng.normal(size=(2, d)), rng.normal(size=2))
        n = int(rng.integers(1, 5))
        eps = float(rng.uniform(0.01, 0.2))
        # Interior points: the optimum eps * g / |g| never touches the box.
        x = rng.uniform(eps, 1 - eps, (n, d))
        y = rng.integers(0, 2, n)
        w = model.params["fc.weight"]
        g = w[1 - y] - w[y]
        best = x + eps * g / np.linalg.norm(g, axis=1, keepdims=True)
        z = logits(model, best)
        optimum = np.log(np.exp(z).sum(axis=1)) - z[np.arange(n), y]
        spec = PerturbationSpec("l2", eps, float(rng.uniform(0.3, 1.0)) * eps, 60, True, 1, None, trial)
        got = pgd(model, x, y, spec).final_loss
        worst = max(worst, float(np.max(np.abs(got - optimum) / np.abs(optimum))))
    bitwise = True
    for seed, dtype in enumerate(("float32", "float64") * 5):
        cfg = preset("rescnn-tiny", (1, 8, 8)) if seed % 2 else ModelConfig("mlp", (1, 8, 8), (16, 16), 10)
        model = build_model(cfg, seed=seed, dtype=dtype, residual_scale=0.5)
        x = rng.uniform(0, 1, (4, 1, 8, 8)).astype(model.dtype)
        y = rng.integers(0, 10, 4)
        eps = float(rng.uniform(0.01, 0.3))
        a = pgd(model, x, y, PerturbationSpec("linf", eps, eps, 1, False))
        b = fgsm(model, x, y, eps)
        bitwise &= a.delta.tobytes() == b.delta.tobytes() and a.final_loss.tobytes() == b.final_loss.tobytes()
    elapsed = time.perf_counter() - start
    ok = worst < 1e-4 and bitwise and elapsed < 60
    report(3, ok, f"l2 worst rel loss gap {worst:.2e}, linf 1-step == fgsm bitwise: {bitwise}, {elapsed:.1f}s")
    assert worst < 1e-4
    assert bitwise
    assert elapsed < 60


# ---------------------------------------------------------------------------
# 4. radius statistics of the ball sampler

def test_criterion_04_ball_sampling_statistics():
    start = time.perf_counter()
    means = {}
    for d in (16, 1):
        radii = np.array([np.linalg.norm(sample_uniform_l2_ball((d,), 2.0, sample_rng(d, 0, k)))
                          for k in range(100_000)]) / 2.0
        means[d] = float(radii.mean())
    elapsed = time.perf_counter() - start
    dev16 = abs(means[16] - 16 / 17) / (16 / 17)
    dev1 = abs(means[1] - 0.5) / 0.5
    ok = dev16 < 0.01 and dev1 < 0.01 and elapsed < 30
    report(4, ok, f"d=16 mean {means[16]:.4f} (target 0.9412), d=1 mean {means[1]:.4f} (target 0.5), "
                  f"{elapsed:.1f}s")
    assert dev16 < 0.01 and dev1 < 0.01
    assert elapsed < 30


# ---------------------------------------------------------------------------
# 5. exhaustive search on a two-pixel model

def _mlp_numpy(model, x):
    h = x
    for i in range(len(model.config.widths)):
        h = np.maximum(h @ model.params[f"fc{i}.weight"].T + model.params[f"fc{i}.bias"], 0)
    return h @ model.params["fc.weight"].T + model.params["fc.bias"]


def grid_oracle(model, data, eps_list, points=401):
    """Robust accuracy from a dense lattice over the largest disk.

    The lattice is shared by every eps, so the searched sets are nested.
    Returns the accuracy per eps.
    """
    r = max(eps_list)
    axis = np.linspace(-r, r, points)
    off = np.stack(np.meshgrid(axis, axis), axis=-1).reshape(-1, 2)
    off = off[np.linalg.norm(off, axis=1) <= r]
    radius = np.linalg.norm(off, axis=1)
    x = data.inputs.astype(np.float64)
    first_break = np.full(len(data), np.inf)
    for i in range(len(data)):
        pts = np.clip(x[i] + off, 0, 1)
        wrong = _mlp_numpy(model, pts).argmax(axis=1) != data.labels[i]
        if wrong.any():
            first_break[i] = radius[wrong].min()
    clean = _mlp_numpy(model, x).argmax(axis=1) == data.labels
    return [float(np.mean(clean & (first_break > e))) for e in eps_list]


def test_criterion_05_pgd_matches_grid_oracle():
    start = time.perf_counter()
    model = build_model(ModelConfig("mlp", (2,), (32, 32), 2), seed=0, dtype="float64")
    train_adversarial(model, two_pixel_dataset(2000, seed=0), None,
                      TrainConfig(epochs=60, batch_size=32, lr=0.05, val_every=1000, seed=0))
    test = two_pixel_dataset(500, seed=1, split="test")
    eps_list = [0.0, 0.01, 0.02, 0.05, 0.1, 0.15, 0.2, 0.3]
    curve = eps_sweep(model, test, eps_list, evaluation_spec(steps=20, restarts=10))
    oracle = grid_oracle(model, test, eps_list)
    gaps = [abs(a - b) for a, b in zip(curve.adv_acc, oracle)]
    monotone = all(b <= a for a, b in zip(oracle, oracle[1:]))
    elapsed = time.perf_counter() - start
    ok = max(gaps) <= 0.02 and monotone and elapsed < 300
    pairs = " ".join(f"{e:g}:{a:.3f}/{o:.3f}" for e, a, o in zip(eps_list, curve.adv_acc, oracle))
    report(5, ok, f"max gap {max(gaps):.3f}, oracle nonincreasing {monotone}, pgd/oracle {pairs}, {elapsed:.0f}s")
    assert max(gaps) <= 0.02
    assert monotone
    assert elapsed < 300


# ---------------------------------------------------------------------------
# 6 and 10. desk-scale robustness ordering and representation smoothness

SEEDS = (0, 1, 2)
RECIPES = {
    "standard": None,
    "fast_l2": fast_l2_spec(1.0, 1.5),
    "pgd7": PerturbationSpec("l2", 1.0, 2.5 / 7, 7, True),
}


@pytest.fixture(scope="module")
def desk_models():
    start = time.perf_counter()
    out = {}
    for seed in SEEDS:
        train = generate_shapes_dataset(2000, classes=10, image_size=10, seed=seed)
        test = generate_shapes_dataset(500, classes=10, image_size=10, seed=10_000 + seed, split="test")
        for name, attack in RECIPES.items():
            model = build_model(preset("rescnn-tiny", (1, 10, 10)), seed=seed, residual_scale=0.1)
            if attack is not None:
                attack = replace(attack, rng_seed=seed)
            train_adversarial(model, train, None,
                              TrainConfig(epochs=30, batch_size=64, lr=0.005, attack=attack, seed=seed))
            out[seed, name] = model
        out[seed, "test"] = test
    out["train_s"] = time.perf_counter() - start
    return out


def test_criterion_06_robust_training_ordering(desk_models):
    start = time.perf_counter()
    acc = {}
    for seed in SEEDS:
        for name in RECIPES:
            curve = eps_sweep(desk_models[seed, name], desk_models[seed, "test"], [1.0, 2.0],
                              evaluation_spec(steps=20, restarts=10, rng_seed=seed))
            acc[seed, name] = curve.adv_acc
    mean = {name: np.mean([acc[s, name] for s in SEEDS], axis=0) for name in RECIPES}
    elapsed = desk_models["train_s"] + time.perf_counter() - start
    gain_fast = mean["fast_l2"][0] - mean["standard"][0]
    gain_pgd = mean["pgd7"][0] - mean["standard"][0]
    at2 = mean["pgd7"][1] - (mean["fast_l2"][1] - 0.05)
    ok = gain_fast >= 0.2 and gain_pgd >= 0.2 and at2 >= 0 and elapsed < 900
    table = ", ".join(f"{n} {mean[n][0]:.3f}/{mean[n][1]:.3f}" for n in RECIPES)
    report(6, ok, f"adv acc at eps 1/2 over 3 seeds: {table}; {elapsed:.0f}s")
    assert gain_fast >= 0.2 and gain_pgd >= 0.2
    assert at2 >= 0
    assert elapsed < 900


def test_criterion_10_smoothness_ordering(desk_models):
    start = time.perf_counter()
    medians = {}
    for seed in SEEDS:
        for name in ("standard", "fast_l2"):
            stats = representation_smoothness(desk_models[seed, name], desk_models[seed, "test"], 1.0,
                                              samples=200, seed=seed)
            medians[seed, name] = stats.median
    finite = all(np.isfinite(v) for v in medians.values())
    wins = sum(medians[s, "fast_l2"] < medians[s, "standard"] for s in SEEDS)
    elapsed = time.perf_counter() - start
    ok = finite and wins >= 2 and elapsed < 60
    detail = ", ".join(f"seed {s} {medians[s, 'fast_l2']:.3f} vs {medians[s, 'standard']:.3f}" for s in SEEDS)
    report(10, ok, f"fast_l2 below standard in {wins}/3 seeds ({detail}), {elapsed:.1f}s")
    assert finite
    assert wins >= 2
    assert elapsed < 60


# ---------------------------------------------------------------------------
# 7. sharded training equals single-worker training

def test_criterion_07_distributed_equivalence():
    start = time.perf_counter()
    train = generate_shapes_dataset(2000, classes=10, image_size=10, seed=0)
    config = TrainConfig(epochs=3, batch_size=64, lr=0.005, attack=fast_l2_spec(1.0), seed=0)
    init = build_model(preset("rescnn-tiny", (1, 10, 10)), seed=0)
    runs = {}
    for label, workers, transport in (("w1", 1, "inprocess"), ("w4", 4, "inprocess"), ("w4sock", 4, "socket")):
        model = init.copy()
        distributed_train(model, train, None, config, workers, transport)
        runs[label] = model
    diff = max(float(np.abs(runs["w4"].params[k] - runs["w1"].params[k]).max()) for k in init.params)
    bitwise = all(runs["w4"].params[k].tobytes() == runs["w4sock"].params[k].tobytes() for k in init.params)
    round_trip = True
    idx = batches(0, 0, len(train), 64)[0]
    for w, shard in enumerate(np.array_split(idx, 4)):
        frame, _, _ = worker_step(runs["w4"], train, shard, config.attack, 0, 0, 0, w)
        raw = encode_frame(frame)
        back = decode_frame(raw)
        round_trip &= back == frame and encode_frame(back) == raw
    elapsed = time.perf_counter() - start
    ok = diff < 1e-4 and bitwise and round_trip and elapsed < 180
    report(7, ok, f"max |W4 - W1| {diff:.2e}, socket == inprocess bitwise {bitwise}, "
                  f"frames round-trip {round_trip}, {elapsed:.0f}s")
    assert diff < 1e-4
    assert bitwise and round_trip
    assert elapsed < 180


# ---------------------------------------------------------------------------
# 8. relative cost of attack steps and the time estimate

def test_criterion_08_cost_ratios_and_estimate():
    start = time.perf_counter()
    model = build_model(preset("rescnn-tiny", (1, 10, 10)), seed=0)
    timings = [measure_batch_time(model, 64, k, reps=5, mode="train") for k in (0, 1, 7)]
    timings.append(measure_batch_time(model, 64, 1, reps=5, mode="attack"))
    t0, t1, t7 = (t.mean_s for t in timings[:3])
    r7, r1 = t7 / t0, t1 / t0
    long_run = estimate_total_time(timings, epochs=150, cadence=5, n_train=2000, n_val=500, batch=64,
                                   train_steps=1, eval_steps=1)
    # A short run whose every batch is full, validated each epoch with the training attack.
    train = generate_shapes_dataset(1024, classes=10, image_size=10, seed=0)
    val = generate_shapes_dataset(256, classes=10, image_size=10, seed=1, split="val")
    est = estimate_total_time(timings, epochs=3, cadence=1, n_train=1024, n_val=256, batch=64,
                              train_steps=1, eval_steps=1)
    t = time.perf_counter()
    train_adversarial(model.copy(), train, val, TrainConfig(epochs=3, batch_size=64, lr=0.005, val_every=1,
                                                            attack=fast_l2_spec(1.0)))
    measured = time.perf_counter() - t
    elapsed = time.perf_counter() - start
    ok = (5 <= r7 <= 9 and 1.5 <= r1 <= 3.5 and long_run.val_epochs == 30 and est.total_s <= measured
          and elapsed < 300)
    report(8, ok, f"7-step/0-step {r7:.2f}, 1-step/0-step {r1:.2f}, val epochs {long_run.val_epochs}, "
                  f"3-epoch estimate {est.total_s:.2f}s <= measured {measured:.2f}s, {elapsed:.0f}s")
    assert 5 <= r7 <= 9 and 1.5 <= r1 <= 3.5
    assert long_run.val_epochs == 30
    assert est.total_s <= measured
    assert elapsed < 300


# ---------------------------------------------------------------------------
# 9. representation tools

def _reachable_target(model, x, corners, margin):
    """A class other than the prediction that owns some box corner by ``margin``, or None."""
    z = logits(model, corners)
    top = np.sort(z, axis=1)
    lead = top[:, -1] - top[:, -2]
    owners = set(z.argmax(axis=1)[lead >= margin].tolist()) - {int(predict(model, x))}
    return min(owners) if owners else None


def test_criterion_09_representation_tools():
    start = time.perf_counter()
    rng = np.random.default_rng(9)
    viz_ok = 0
    for trial in range(50):
        model = build_model(preset("rescnn-tiny", (1, 10, 10)), seed=trial % 5, residual_scale=0.5)
        node = int(rng.integers(model.config.rep_dim))
        seed = noise_seed((1, 10, 10), trial) if trial % 2 else rng.uniform(0, 1, (1, 10, 10))
        res = feature_viz(model, VizRequest(node, seed_image=seed, steps=20, step_size=0.1))
        viz_ok += res.activation >= res.trace[0]
    interp_worst = 0.0
    blend_ok = True
    for trial in range(20):
        d = int(rng.integers(2, 50))
        ident = linear_model(rng.normal(size=(3, d)), np.zeros(3))
        x1, x2 = rng.uniform(0, 1, d), rng.uniform(0, 1, d)
        lam = float(rng.uniform(0, 1))
        res = interpolate(ident, InterpolationRequest(x1, x2, lam, steps=10))
        blend_ok &= bool(np.allclose(res.image, lam * x1 + (1 - lam) * x2, rtol=0, atol=1e-12))
        interp_worst = max(interp_worst, res.objective)
    d, k = 12, 4
    corners = np.array(np.meshgrid(*[[0.0, 1.0]] * d)).reshape(d, -1).T
    flips = trials = 0
    while trials < 100:
        model = linear_model(rng.normal(size=(k, d)), rng.normal(size=k))
        x = rng.uniform(0, 1, d)
        # A corner owned by the target with this margin has lower target loss
        # than any point where another class wins, so the optimum flips.
        target = _reachable_target(model, x, corners, margin=np.log(k - 1) + 0.5)
        if target is None:
            continue
        trials += 1
        res = targeted_perturbation(model, x, target, eps=500.0)
        flips += res.prediction == target
    elapsed = time.perf_counter() - start
    ok = viz_ok == 50 and blend_ok and interp_worst < 1e-8 and flips == 100 and elapsed < 180
    report(9, ok, f"viz {viz_ok}/50 at or above seed, interpolation objective {interp_worst:.1e}, "
                  f"targeted flips {flips}/100, {elapsed:.0f}s")
    assert viz_ok == 50
    assert blend_ok and interp_worst < 1e-8
    assert flips == 100
    assert elapsed < 180
