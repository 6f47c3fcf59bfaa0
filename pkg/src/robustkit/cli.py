"""Command-line entry point: ``robustkit <command> ...`` (or ``python -m robustkit``)."""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import persistence as io
from .attacks import NORMS
from .config import RunConfig, parse_config, serialize
from .data import Dataset, generate_shapes_dataset
from .models import build_model, predict


def _floats(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def _ints(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v.strip()]


def _address(text: str) -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    if not host or not port.isdigit():
        raise argparse.ArgumentTypeError(f"expected HOST:PORT, got {text!r}")
    return host, int(port)


def load_run_data(run: RunConfig) -> tuple[Dataset, Dataset]:
    d = run.data
    train = io.load_dataset(d.path, "train") if d.path else generate_shapes_dataset(
        d.n, d.classes, d.image_size, d.noise, d.seed, "train")
    if d.val_path:
        val = io.load_dataset(d.val_path, "val")
    else:
        val = generate_shapes_dataset(d.val_n, d.classes, d.image_size, d.noise, d.seed + 1, "val")
    return train, val


def _prepare_run(args) -> tuple[RunConfig, Dataset, Dataset, Path]:
    run = parse_config(args.config).with_overrides(args.seed)
    run.validate()
    train, val = load_run_data(run)
    out = Path(args.out) if args.out else run.output_dir()
    out.mkdir(parents=True, exist_ok=True)
    for sub in ("checkpoints", "curves", "images"):
        (out / sub).mkdir(exist_ok=True)
    (out / "config.ini").write_text(serialize(run))
    return run, train, val, out


def _new_model(run: RunConfig, train: Dataset):
    num_classes = max(train.num_classes, run.data.classes if not run.data.path else 2)
    cfg = run.model.build_config(train.input_shape, num_classes)
    return build_model(cfg, run.seed, run.model.dtype, run.model.residual_scale)


def _report(result, out: Path) -> None:
    last = result.history[-1]
    print(f"trained {len(result.history)} metric rows, {result.updates} updates; last {last.split} "
          f"loss {last.loss:.4f}; best epoch {result.best_epoch}; outputs in {out}")


def cmd_gen_data(args) -> None:
    if args.from_tensors:
        data = io.convert_tensors_to_dataset(args.from_tensors[0], args.from_tensors[1], args.out, args.split)
    else:
        data = generate_shapes_dataset(args.n, args.classes, args.image_size, args.noise, args.seed, args.split)
        io.save_dataset(data, args.out)
    print(f"wrote {len(data)} samples of shape {data.input_shape} to {args.out}")


def cmd_train(args) -> None:
    from .training import train_adversarial, train_free
    run, train, val, out = _prepare_run(args)
    model = _new_model(run, train)
    cfg = run.train_config()
    if run.train.method == "free":
        result = train_free(model, train, val, cfg, run.train.replay, out)
    else:
        result = train_adversarial(model, train, val, cfg, out)
    _report(result, out)


def cmd_train_dist(args) -> None:
    from .distributed import distributed_train
    run, train, val, out = _prepare_run(args)
    if run.train.method == "free":
        raise ValueError("distributed training supports the standard and adversarial methods")
    model = _new_model(run, train)

    def announce(address):
        print(f"coordinator listening on {address[0]}:{address[1]}", flush=True)

    result = distributed_train(model, train, val, run.train_config(), args.workers, args.transport, out,
                               args.socket_workers, args.host, args.port, on_listen=announce)
    _report(result, out)


def cmd_worker(args) -> None:
    from .distributed import run_worker
    run_worker(args.connect)


def _load_eval_inputs(args):
    model = io.load_checkpoint(args.checkpoint)
    data = io.load_dataset(args.data, "test")
    if args.limit:
        data = data.subset(slice(0, args.limit))
    return model, data


def cmd_eval(args) -> None:
    from .evaluation import adversarial_accuracy, clean_accuracy, evaluation_spec
    model, data = _load_eval_inputs(args)
    spec = evaluation_spec(args.eps, args.norm, args.steps, args.restarts, args.seed)
    adv = adversarial_accuracy(model, data, spec)
    print(f"clean_acc={clean_accuracy(model, data):.6f} adv_acc={adv:.6f} eps={args.eps} norm={args.norm} "
          f"steps={args.steps} restarts={args.restarts}")


def cmd_sweep(args) -> None:
    from .evaluation import eps_sweep, evaluation_spec
    model, data = _load_eval_inputs(args)
    base = evaluation_spec(1.0, args.norm, args.steps, args.restarts, args.seed)
    curve = eps_sweep(model, data, args.eps_list, base, Path(args.checkpoint).stem, out_csv=args.out)
    if args.gnuplot:
        curve.write_gnuplot(args.gnuplot)
    for e, a in zip(curve.eps, curve.adv_acc):
        print(f"eps={e:g} adv_acc={a:.4f}")


def cmd_viz_feature(args) -> None:
    from .persistence import image_grid, write_image, write_trace
    from .reptools import VizRequest, feature_viz
    model = io.load_checkpoint(args.checkpoint)
    seed_image = None
    if args.data is not None:
        seed_image = io.load_dataset(args.data).inputs[args.index]
    images = []
    for node in args.nodes:
        res = feature_viz(model, VizRequest(node, seed_image, args.steps, args.eps, args.step_size, args.seed))
        images.append(res.image)
        if args.trace_dir:
            write_trace(Path(args.trace_dir) / f"node{node}.csv", res.trace)
        print(f"node {node}: activation {res.trace[0]:.4f} -> {res.activation:.4f}")
    write_image(image_grid(images, min(len(images), 8)), args.out)


def cmd_interp(args) -> None:
    from .persistence import image_grid, write_image
    from .reptools import InterpolationRequest, interpolate
    model = io.load_checkpoint(args.checkpoint)
    data = io.load_dataset(args.data)
    x1, x2 = data.inputs[args.first], data.inputs[args.second]
    images = [x2]
    for lam in args.lams:
        res = interpolate(model, InterpolationRequest(x1, x2, lam, args.steps, args.step_size, args.form))
        images.append(res.image)
        print(f"lambda {lam:g}: objective {res.trace[0]:.5f} -> {res.objective:.5f}")
    images.append(x1)
    write_image(image_grid(images, len(images)), args.out)


def cmd_target_attack(args) -> None:
    from .persistence import image_grid, write_image, write_trace
    from .reptools import targeted_perturbation
    model = io.load_checkpoint(args.checkpoint)
    data = io.load_dataset(args.data)
    x = data.inputs[args.index]
    res = targeted_perturbation(model, x, args.target, args.steps, args.eps)
    write_image(image_grid([x, res.image], 2), args.out)
    if args.trace:
        write_trace(args.trace, res.trace)
    print(f"prediction {int(predict(model, x))} -> {res.prediction} (target {args.target}); "
          f"target loss {res.trace[0]:.4f} -> {res.trace[-1]:.4f}")


def cmd_estimate_time(args) -> None:
    from .models import preset
    from .timing import estimate_total_time, measure_batch_time, write_estimates_csv, write_timings_csv
    if args.checkpoint:
        model = io.load_checkpoint(args.checkpoint)
    else:
        model = build_model(preset(args.preset, tuple(args.input_shape), args.classes), 0)
    timings = []
    for mode, steps_list in (("train", args.train_steps), ("attack", [args.eval_steps])):
        for steps in steps_list:
            for b in args.batches:
                t = measure_batch_time(model, b, steps, args.reps, mode)
                timings.append(t)
                print(f"{mode} steps={steps} batch={b}: {t.mean_s * 1e3:.2f} ms (sd {t.std_s * 1e3:.2f})")
    estimates = {}
    for steps in args.train_steps:
        est = estimate_total_time(timings, args.epochs, args.cadence, args.n_train, args.n_val, args.batch,
                                  args.workers, steps, args.eval_steps)
        estimates[f"{steps}-step"] = est
        print(f"{steps}-step training: total {est.total_s:.1f}s (train {est.train_s:.1f}s, validation "
              f"{est.val_s:.1f}s over {est.val_epochs} epochs)")
    if args.out:
        out = Path(args.out)
        write_timings_csv(timings, out / "timings.csv")
        write_estimates_csv(estimates, out / "estimates.csv")


def cmd_info(args) -> None:
    path = Path(args.path)
    buf = path.read_bytes()
    if buf.startswith(io.CHECKPOINT_MAGIC):
        model = io.checkpoint_from_bytes(buf)
        c = model.config
        print(f"checkpoint: kind={c.kind} input={c.input_shape} widths={c.widths} classes={c.num_classes} "
              f"dtype={np.dtype(model.dtype).name} parameters={model.parameter_count}")
    elif buf.startswith(io.TENSOR_MAGIC):
        first, end = io.tensor_from_bytes(buf)
        if end == len(buf):
            print(f"tensor: shape={first.shape} dtype={first.dtype}")
        else:
            data = io.dataset_from_bytes(buf)
            counts = np.bincount(data.labels)
            print(f"dataset: {len(data)} samples, input shape {data.input_shape}, "
                  f"{len(counts)} classes, per-class counts {counts.tolist()}")
    elif buf[:2] in (b"P5", b"P6"):
        img = io.image_from_bytes(buf)
        print(f"image: {'grayscale' if img.ndim == 2 else 'rgb'} {img.shape[1]}x{img.shape[0]}")
    else:
        raise ValueError(f"{path}: unrecognised file type")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="robustkit", description="Adversarial training and robustness tools.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate the glyph dataset or convert tensor files")
    g.add_argument("--out", required=True)
    g.add_argument("--n", type=int, default=2000)
    g.add_argument("--classes", type=int, default=10)
    g.add_argument("--image-size", type=int, default=10)
    g.add_argument("--noise", type=float, default=0.05)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--split", default="train")
    g.add_argument("--from-tensors", nargs=2, metavar=("INPUTS", "LABELS"))
    g.set_defaults(func=cmd_gen_data)

    for name, func, helptext in (("train", cmd_train, "train one model"),
                                 ("train-dist", cmd_train_dist, "data-parallel training")):
        t = sub.add_parser(name, help=helptext)
        t.add_argument("--config", required=True)
        t.add_argument("--seed", type=int)
        t.add_argument("--out")
        if name == "train-dist":
            t.add_argument("--workers", type=int, default=2)
            t.add_argument("--transport", choices=("inprocess", "socket"), default="inprocess")
            t.add_argument("--socket-workers", choices=("thread", "process", "external"), default="thread")
            t.add_argument("--host", default="127.0.0.1")
            t.add_argument("--port", type=int, default=0)
        t.set_defaults(func=func)

    w = sub.add_parser("worker", help="serve a socket-transport coordinator")
    w.add_argument("--connect", type=_address, required=True, metavar="HOST:PORT")
    w.set_defaults(func=cmd_worker)

    for name, func in (("eval", cmd_eval), ("sweep", cmd_sweep)):
        e = sub.add_parser(name, help="adversarial accuracy" if name == "eval" else "accuracy-vs-eps curve")
        e.add_argument("--checkpoint", required=True)
        e.add_argument("--data", required=True)
        e.add_argument("--norm", choices=NORMS, default="l2")
        e.add_argument("--steps", type=int, default=20)
        e.add_argument("--restarts", type=int, default=10)
        e.add_argument("--seed", type=int, default=0)
        e.add_argument("--limit", type=int, default=0, help="evaluate only the first N samples")
        if name == "eval":
            e.add_argument("--eps", type=float, default=1.0)
        else:
            e.add_argument("--eps-list", type=_floats, default=[0.0, 0.25, 0.5, 1.0, 1.5, 2.0])
            e.add_argument("--out", required=True, help="curve CSV path")
            e.add_argument("--gnuplot")
        e.set_defaults(func=func)

    v = sub.add_parser("viz-feature", help="maximise representation coordinates")
    v.add_argument("--checkpoint", required=True)
    v.add_argument("--nodes", type=_ints, required=True)
    v.add_argument("--data", help="dataset supplying the seed image (default: noise)")
    v.add_argument("--index", type=int, default=0)
    v.add_argument("--steps", type=int, default=200)
    v.add_argument("--eps", type=float, default=float("inf"))
    v.add_argument("--step-size", type=float, default=0.05)
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--trace-dir")
    v.add_argument("--out", required=True)
    v.set_defaults(func=cmd_viz_feature)

    i = sub.add_parser("interp", help="interpolate two samples in representation space")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--data", required=True)
    i.add_argument("--first", type=int, default=0)
    i.add_argument("--second", type=int, default=1)
    i.add_argument("--lams", type=_floats, default=[0.25, 0.5, 0.75])
    i.add_argument("--steps", type=int, default=200)
    i.add_argument("--step-size", type=float, default=0.02)
    i.add_argument("--form", choices=("convex", "difference"), default="convex")
    i.add_argument("--out", required=True)
    i.set_defaults(func=cmd_interp)

    a = sub.add_parser("target-attack", help="large-budget targeted perturbation")
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--data", required=True)
    a.add_argument("--index", type=int, default=0)
    a.add_argument("--target", type=int, required=True)
    a.add_argument("--steps", type=int, default=1000)
    a.add_argument("--eps", type=float, default=500.0)
    a.add_argument("--trace")
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_target_attack)

    m = sub.add_parser("estimate-time", help="measure batch costs and project training time")
    m.add_argument("--checkpoint")
    m.add_argument("--preset", default="rescnn-tiny")
    m.add_argument("--input-shape", type=_ints, default=[1, 10, 10])
    m.add_argument("--classes", type=int, default=10)
    m.add_argument("--batches", type=_ints, default=[16, 64])
    m.add_argument("--train-steps", type=_ints, default=[0, 1, 7])
    m.add_argument("--eval-steps", type=int, default=7)
    m.add_argument("--reps", type=int, default=5)
    m.add_argument("--epochs", type=int, default=150)
    m.add_argument("--cadence", type=int, default=5)
    m.add_argument("--n-train", type=int, default=2000)
    m.add_argument("--n-val", type=int, default=500)
    m.add_argument("--batch", type=int, default=64)
    m.add_argument("--workers", type=int, default=1)
    m.add_argument("--out")
    m.set_defaults(func=cmd_estimate_time)

    n = sub.add_parser("info", help="describe a tensor, dataset, checkpoint or image file")
    n.add_argument("path")
    n.set_defaults(func=cmd_info)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except KeyboardInterrupt:
        print("error: interrupted", file=sys.stderr)
        return 130
    except Exception as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"error: {msg}", file=sys.stderr)
        return 1
    return 0
