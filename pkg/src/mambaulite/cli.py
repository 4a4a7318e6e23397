"""Command-line entry point: summary, gradcheck, train, predict, eval, bench.

Exit codes: 0 success, 1 verification failure or divergence, 2 usage error,
3 I/O error. Lines starting with ``# time`` carry wall-clock measurements and
are the only non-deterministic output.
"""

from __future__ import annotations

import argparse
import json
import statistics
import sys
import time
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import data as dp
from .checkpoint import load_checkpoint, memory_size, save_checkpoint
from .config import ModelConfig
from .errors import (CheckpointError, ConfigurationError, ContractError, DivergenceError,
                     IngestionError, MambaULiteError)
from .losses import binarize, per_image_metrics
from .model import build, flops_estimate, param_count
from .tensor import Tensor
from .tensor.ops import bilinear_matrix
from .train import TrainSchedule, csv_header, evaluate, fit, predict

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3


class UsageError(Exception):
    pass


def _time_line(label: str, seconds: float) -> None:
    print(f"# time {label} {seconds:.6f}s")


def _load_config(path, size: int | None) -> ModelConfig:
    try:
        cfg = ModelConfig.load(path) if path else ModelConfig()
    except OSError as exc:
        raise IngestionError(f"cannot read config {path}: {exc}") from None
    if size is not None and size != cfg.input_size:
        cfg = cfg.replace(input_size=size)
    return cfg


# ---------------------------------------------------------------------------
# summary


def cmd_summary(args) -> int:
    cfg = _load_config(args.config, None)
    size = args.size
    if size <= 0 or size % 16:
        raise UsageError(f"--size must be a positive multiple of 16, got {size}")
    model = build(cfg, seed=0)
    total, table = param_count(model)
    flops = flops_estimate(model, size, size)
    mem = memory_size(model)
    if args.json:
        print(json.dumps({
            "params": total, "macs": flops.macs, "flops_2x": flops.flops_2x,
            "memory_bytes": mem.total_bytes, "modules": dict(table), "size": size,
        }, sort_keys=True))
        return EXIT_OK
    print(f"{'module':<14}{'params':>10}")
    for name, count in table.items():
        print(f"{name:<14}{count:>10,}")
    print(f"{'total':<14}{total:>10,}")
    print(f"input {size}x{size}: MACs {flops.macs:,} ({flops.macs / 1e9:.3f} G), "
          f"2xMAC FLOPs {flops.flops_2x:,} ({flops.flops_2x / 1e9:.3f} G)")
    print(f"memory {mem.total_bytes:,} bytes (parameters {mem.param_bytes:,}, overhead {mem.overhead_bytes:,})")
    return EXIT_OK


# ---------------------------------------------------------------------------
# gradcheck


def cmd_gradcheck(args) -> int:
    from . import verify

    names = [b for b in (args.blocks or "").split(",") if b]
    try:
        checks = verify.select(names)
    except KeyError as exc:
        raise UsageError(str(exc.args[0])) from None
    failed = []
    for check in checks:
        t0 = time.perf_counter()
        err = check.run(args.seed)
        ok = err <= check.tolerance
        print(f"{check.group:<17}{check.name:<17}max_rel_error={err:.3e}  "
              f"tol={check.tolerance:.0e}  {'ok' if ok else 'FAIL'}")
        _time_line(check.name, time.perf_counter() - t0)
        if not ok:
            failed.append(check.name)
    if failed:
        print(f"gradient check failed: {', '.join(failed)}")
        return EXIT_FAIL
    print(f"all {len(checks)} gradient checks passed")
    return EXIT_OK


# ---------------------------------------------------------------------------
# datasets


def _training_data(args, size: int):
    """Train/validation sample lists for ``--synthetic n`` or ``--data dir``."""
    if args.synthetic is not None:
        n = args.synthetic
        if n < 2:
            raise UsageError("--synthetic needs at least 2 samples")
        samples = dp.synth_dataset(n, size, args.seed)
        n_test = max(1, dp.holdout_count(n))
        tr, te = dp.split_indices(n, n - n_test, n_test, args.seed)
        return [samples[i] for i in tr], [samples[i] for i in te]
    manifest = dp.manifest_from_dir(args.data)
    if len(manifest) < 2:
        raise UsageError(f"{args.data} holds {len(manifest)} samples; need at least 2")
    n_test = max(1, dp.holdout_count(len(manifest)))
    train, test = dp.split_dataset(manifest, len(manifest) - n_test, n_test, args.seed)
    return dp.load_manifest(train, size), dp.load_manifest(test, size)


# ---------------------------------------------------------------------------
# train


def cmd_train(args) -> int:
    if args.epochs < 1:
        raise UsageError("--epochs must be >= 1")
    cfg = _load_config(args.config, args.size)
    train, val = _training_data(args, cfg.input_size)
    model = build(cfg, seed=args.seed)
    out = Path(args.out)
    log_path = Path(args.log) if args.log else out.with_suffix(".csv")
    rows = [csv_header()]

    def on_epoch(m, rec):
        rows.append(rec.csv_row())
        save_checkpoint(m, out)
        log_path.write_text("\n".join(rows) + "\n", newline="\n")
        print(rec.csv_row(), flush=True)

    schedule = TrainSchedule(epochs=args.epochs, batch_size=args.batch_size, lr=args.lr,
                             patience=args.patience, seed=args.seed)
    print(rows[0])
    t0 = time.perf_counter()
    try:
        fit(model, train, val, schedule, on_epoch=on_epoch)
    except DivergenceError as exc:
        print(f"training diverged: {exc}; last good checkpoint kept at {out}", file=sys.stderr)
        return EXIT_FAIL
    finally:
        _time_line("train", time.perf_counter() - t0)
    return EXIT_OK


# ---------------------------------------------------------------------------
# predict


def _resize_prob(prob: np.ndarray, h: int, w: int) -> np.ndarray:
    mh = bilinear_matrix(prob.shape[0], h)
    mw = bilinear_matrix(prob.shape[1], w)
    return mh @ prob.astype(np.float64) @ mw.T


def cmd_predict(args) -> int:
    model = load_checkpoint(args.weights)
    size = model.config.input_size
    src = Path(args.input)
    if not src.is_file():
        raise IngestionError(f"input image not found: {src}")
    original = dp.load_image(src)
    h, w = original.shape[1:]
    image = dp.load_image(src, size)
    prob = predict(model, image[None].astype(model.dtype))[0, 0]
    full = _resize_prob(prob, h, w)
    dp.save_png(args.output, binarize(full) * 255)
    if args.prob:
        dp.save_png(args.prob, dp.to_uint8(full))
    print(f"wrote {args.output} ({w}x{h}), foreground fraction {binarize(full).mean():.4f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval


def _eval_samples(args, size: int):
    if args.synthetic is not None:
        _, val = _training_data(args, size)
        return val
    if args.manifest:
        return dp.load_manifest(dp.read_manifest(args.manifest), size)
    if args.data:
        return dp.load_manifest(dp.manifest_from_dir(args.data), size)
    raise UsageError("eval needs --data, --manifest or --synthetic")


def cmd_eval(args) -> int:
    if args.oracle:
        size = args.size or ModelConfig().input_size
        samples = _eval_samples(args, size)
        if not samples:
            raise UsageError("evaluation set is empty")
        masks = np.stack([s.mask for s in samples])
        dsc, iou = per_image_metrics(masks, masks)
    else:
        if not args.weights:
            raise UsageError("eval needs --weights unless --oracle is given")
        model = load_checkpoint(args.weights)
        samples = _eval_samples(args, model.config.input_size)
        if not samples:
            raise UsageError("evaluation set is empty")
        dsc, iou = evaluate(model, samples, args.batch_size)
    print(f"images {len(samples)}")
    print(f"dsc {dsc.mean():.8f}")
    print(f"iou {iou.mean():.8f}")
    if args.csv:
        lines = ["id,dsc,iou"] + [f"{s.id},{d:.8f},{i:.8f}" for s, d, i in zip(samples, dsc, iou)]
        Path(args.csv).write_text("\n".join(lines) + "\n", newline="\n")
    return EXIT_OK


# ---------------------------------------------------------------------------
# bench


def _parse_shape(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(v) for v in text.split(","))
    except ValueError:
        raise UsageError(f"--shape must be comma-separated integers, got {text!r}") from None


def bench_case(kernel: str, shape: tuple[int, ...], seed: int = 0):
    """Return (run, oracle_error, elements) for one benchmark configuration."""
    from . import reference as ref
    from .params import ParamStore
    from .ssm import ScanParams, init_scan_params, selective_scan, ss2d
    from .tensor import ops

    rng = np.random.default_rng(seed)
    if kernel in ("scan", "ss2d"):
        k = 1 if kernel == "scan" else 4
        if kernel == "scan" and len(shape) != 2 or kernel == "ss2d" and len(shape) != 3:
            raise UsageError(f"{kernel} shape must be {'c,T' if kernel == 'scan' else 'c,h,w'}")
        c = shape[0]
        store = ParamStore(np.float64)
        init_scan_params(store.view("s"), rng, c, 16, max(1, -(-c // 8)), directions=k)
        stacked = ScanParams.from_view(store.view("s"))
        x = rng.standard_normal(shape)
        if kernel == "scan":
            sp = ScanParams(*(Tensor(t.data[0]) for t in stacked.tensors()))
            run = lambda: selective_scan(Tensor(x), sp).data  # noqa: E731
            fields = {f: getattr(stacked, f).data[0] for f in ref.SCAN_FIELDS}
            # oracle on a prefix keeps the pre-timing check fast at long T
            T = min(shape[1], 512)
            want = ref.scan_recurrence(x[:, :T], *(fields[f] for f in ref.SCAN_FIELDS))
            got = selective_scan(Tensor(np.ascontiguousarray(x[:, :T])), sp).data
        else:
            run = lambda: ss2d(Tensor(x), stacked).data  # noqa: E731
            sub = x[:, :min(shape[1], 8), :min(shape[2], 8)]
            want = ref.ss2d_recurrence(sub, {f: getattr(stacked, f).data for f in ref.SCAN_FIELDS})
            got = ss2d(Tensor(np.ascontiguousarray(sub)), stacked).data
        elements = int(np.prod(shape))
    elif kernel == "conv":
        if len(shape) != 4:
            raise UsageError("conv shape must be n,c,h,w")
        n, c, h, w = shape
        x = rng.standard_normal(shape)
        wt = rng.standard_normal((c, c, 3, 3)) / (3 * np.sqrt(c))
        b = rng.standard_normal(c)
        run = lambda: ops.conv2d(Tensor(x), Tensor(wt), Tensor(b), padding=1).data  # noqa: E731
        sub = x[:1, :, :min(h, 16), :min(w, 16)]
        want = ref.conv2d_direct(sub, wt, b, padding=1)
        got = ops.conv2d(Tensor(np.ascontiguousarray(sub)), Tensor(wt), Tensor(b), padding=1).data
        elements = int(np.prod(shape))
    else:
        raise UsageError(f"unknown kernel {kernel!r}")
    return run, float(np.max(np.abs(got - want))), elements


BENCH_ORACLE_TOL = 1e-9


def cmd_bench(args) -> int:
    shape = _parse_shape(args.shape) if args.shape else {
        "scan": (64, 4096), "ss2d": (64, 64, 64), "conv": (1, 32, 64, 64)}[args.kernel]
    if args.iters < 1:
        raise UsageError("--iters must be >= 1")
    run, err, elements = bench_case(args.kernel, shape)
    status = "ok" if err <= BENCH_ORACLE_TOL else "FAIL"
    print(f"kernel {args.kernel} shape {','.join(map(str, shape))} oracle_max_abs_err {err:.3e} {status}")
    if status != "ok":
        return EXIT_FAIL
    run()  # warmup, includes kernel compilation on first use
    times = []
    for _ in range(args.iters):
        t0 = time.perf_counter()
        run()
        times.append(time.perf_counter() - t0)
    med = statistics.median(times)
    _time_line(f"{args.kernel} median", med)
    print(f"# time {args.kernel} elements_per_s {elements / med:.6e}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mambaulite", description="MambaU-Lite segmentation toolkit")
    parser.add_argument("--threads", type=int, default=1,
                        help="BLAS threads; values above 1 give up bitwise determinism")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("summary", help="parameter, FLOP and memory budget")
    p.add_argument("--config")
    p.add_argument("--size", type=int, default=256)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_summary)

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    p.add_argument("--blocks", help="comma-separated block or group names")
    p.add_argument("--precision", type=int, choices=[64], default=64)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("train", help="train on a folder or synthetic lesions")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--data", help="folder with images/ and masks/")
    src.add_argument("--synthetic", type=int, metavar="N")
    p.add_argument("--config")
    p.add_argument("--size", type=int, default=256)
    p.add_argument("--epochs", type=int, default=300)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--patience", type=int, default=10)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="checkpoint path (rewritten after every epoch)")
    p.add_argument("--log", help="CSV log path (default: checkpoint path with .csv)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="segment one PNG image")
    p.add_argument("--weights", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--prob")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", help="mean DSC and IoU over a dataset")
    p.add_argument("--weights")
    src = p.add_mutually_exclusive_group()
    src.add_argument("--data")
    src.add_argument("--manifest")
    src.add_argument("--synthetic", type=int, metavar="N",
                     help="held-out part of the synthetic set that train --synthetic N would use")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, help="sample size for --oracle runs")
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--oracle", action="store_true", help="score ground-truth masks against themselves")
    p.add_argument("--csv")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="time a kernel after checking it against its oracle")
    p.add_argument("--kernel", choices=["scan", "ss2d", "conv"], required=True)
    p.add_argument("--shape")
    p.add_argument("--iters", type=int, default=5)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.threads < 1:
        parser.error("--threads must be >= 1")
    try:
        with threadpool_limits(limits=args.threads):
            return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigurationError, ContractError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (IngestionError, CheckpointError, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except MambaULiteError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
