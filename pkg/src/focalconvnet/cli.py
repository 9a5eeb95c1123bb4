"""``focalconv`` command line: train, eval, bench, profile, synth, gradcheck.

Exit codes: 0 success, 1 domain error (bad data, config, checkpoint), 2 usage error.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import dataclasses
import json
import logging
import os
import platform
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import data as D
from . import engine as E
from . import profiler as P
from .errors import FocalConvError
from .metrics import report_json, report_table
from .model import ModelConfig, build

log = logging.getLogger("focalconvnet")

_ENGINE_KEYS = {f.name for f in dataclasses.fields(E.TrainOptions)} - {"output_dir"}
_MODEL_KEYS = {f.name for f in dataclasses.fields(ModelConfig)}


class UsageError(Exception):
    pass


def _parse_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def parse_overrides(items: list[str] | None) -> dict:
    out: dict = {}
    for item in items or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        key = key.strip()
        if key not in _MODEL_KEYS and key not in _ENGINE_KEYS:
            raise UsageError(f"--set {key}: not a ModelConfig or training field")
        val = _parse_value(raw)
        if key in out and out[key] != val:
            raise UsageError(f"--set {key} given twice with different values")
        out[key] = val
    return out


def resolve_config(args, overrides: dict) -> tuple[ModelConfig, dict]:
    """Model config with precedence flag > file > default; also returns the source of each field."""
    base = ModelConfig().to_dict()
    sources = {k: "default" for k in base}
    if getattr(args, "config", None):
        file_cfg = ModelConfig.load(args.config).to_dict()
        for k, v in file_cfg.items():
            if v != base[k]:
                sources[k] = "file"
        base = file_cfg
    for k, v in overrides.items():
        if k in _MODEL_KEYS:
            base[k] = v
            sources[k] = "flag"
    cfg = ModelConfig.from_dict(base)
    return cfg, sources


def resolve_train_options(args, overrides: dict, output_dir: str) -> tuple[E.TrainOptions, dict]:
    opts = E.TrainOptions(output_dir=output_dir)
    sources = {k: "default" for k in _ENGINE_KEYS}
    flag_batch = getattr(args, "batch_size", None)
    if flag_batch is not None:
        if "batch_size" in overrides and overrides["batch_size"] != flag_batch:
            raise UsageError("--batch-size conflicts with --set batch_size")
        overrides = {**overrides, "batch_size": flag_batch}
    for k, v in overrides.items():
        if k in _ENGINE_KEYS:
            setattr(opts, k, v)
            sources[k] = "flag"
    opts.validate()
    return opts, sources


def _versions() -> dict:
    return {"focalconvnet": __version__, "python": platform.python_version(), "numpy": np.__version__}


def write_run_json(out_dir: Path, args, **extra) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    rec = {
        "command": args.command,
        "argv": getattr(args, "_argv", None),
        "seed": getattr(args, "seed", None),
        "versions": _versions(),
        "precedence": "flag > file > default",
        **extra,
    }
    (out_dir / "run.json").write_text(json.dumps(rec, indent=2, sort_keys=True) + "\n")


# -- subcommands --------------------------------------------------------------------
def cmd_synth(args) -> int:
    out = Path(args.output_dir)
    m = D.synth_dataset(out, args.classes, args.per_class, args.size, args.seed)
    write_run_json(out, args, dataset={"num_classes": args.classes, "per_class": args.per_class, "size": args.size})
    print(f"wrote {len(m)} images in {m.num_classes} classes to {out / 'manifest.csv'}")
    return 0


def cmd_train(args) -> int:
    if not args.train_manifest:
        raise UsageError("train requires --train-manifest")
    overrides = parse_overrides(args.set)
    cfg, cfg_src = resolve_config(args, overrides)
    out = Path(args.output_dir)
    opts, opt_src = resolve_train_options(args, overrides, str(out))
    train_m = D.load_manifest(args.train_manifest)
    test_m = D.load_manifest(args.test_manifest) if args.test_manifest else None
    write_run_json(
        out,
        args,
        model_config=cfg.to_dict(),
        model_config_sources=cfg_src,
        train_options=dataclasses.asdict(opts),
        train_option_sources=opt_src,
        epochs=args.epochs,
    )
    res = E.train(cfg, train_m, test_m, epochs=args.epochs, seed=args.seed, options=opts)
    last = res.history[-1]
    print(f"epoch {last['epoch']}: loss {last['loss']:.6f} acc {last['acc']:.4f} weighted_f1 {last['weighted_f1']:.4f} mcc {last['mcc']:.4f}")
    print(f"history: {out / 'history.csv'}; best checkpoint: {res.best_checkpoint}")
    return 0


def cmd_eval(args) -> int:
    if not args.checkpoint:
        raise UsageError("eval requires --checkpoint")
    if not args.test_manifest:
        raise UsageError("eval requires --test-manifest")
    net, ckpt = E.net_from_checkpoint(args.checkpoint)
    manifest = D.load_manifest(args.test_manifest)
    weights = D.class_weights(manifest) if args.weighted_loss else None
    res = E.evaluate(net, manifest, weights, batch_size=ckpt.meta.get("eval_batch_size", 16))
    out = Path(args.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.json").write_text(report_json(res.confusion) + "\n")
    table = report_table(res.confusion)
    (out / "metrics.txt").write_text(table + "\n")
    (out / "eval.json").write_text(json.dumps(res.metrics(), indent=2, sort_keys=True) + "\n")
    write_run_json(out, args, checkpoint=str(args.checkpoint), model_config=net.config.to_dict())
    print(table)
    return 0


def _config_for(args) -> ModelConfig:
    cfg, _ = resolve_config(args, parse_overrides(args.set))
    return cfg


def cmd_profile(args) -> int:
    cfg = _config_for(args)
    net = build(cfg, args.seed)
    rep = P.profile(net, measure_throughput=args.throughput, batch_size=args.batch,
                    warmup_iters=args.warmup, timed_iters=args.iters)
    out = Path(args.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "profile.json").write_text(rep.to_json() + "\n")
    if args.points_csv:
        with open(args.points_csv, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["method", "f1", "throughput", "params_m"])
            w.writerow(["FocalConvNet", "" if args.f1 is None else args.f1,
                        "" if rep.throughput_ips is None else rep.throughput_ips, rep.total_params / 1e6])
    write_run_json(out, args, model_config=cfg.to_dict())
    cmp = rep.reference_comparison()
    print(P.TABLE_HEADER)
    print(rep.table_row())
    print(f"convention: {P.FLOP_CONVENTION}")
    print(f"GFLOPs (MAC x1): {rep.gflops_mac:.2f}")
    for key, row in cmp.items():
        print(f"{key}: ours {row['ours']:.4g} vs reported {row['reported']:.4g} ({row['rel_delta']:+.1%})")
    return 0


def cmd_bench(args) -> int:
    cfg = _config_for(args)
    net = build(cfg, args.seed)
    dtype = np.float32 if args.dtype == "float32" else np.float64
    if dtype is np.float32:
        for _, t in net.params.items():
            t.data = t.data.astype(np.float32)
    ips = P.throughput(net, batch_size=args.batch, warmup_iters=args.warmup, timed_iters=args.iters, dtype=dtype)
    out = Path(args.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    rec = {"throughput_ips": ips, "batch_size": args.batch, "hardware": P.hardware_string(), "dtype": args.dtype,
           "input_size": list(cfg.input_size)}
    (out / "bench.json").write_text(json.dumps(rec, indent=2) + "\n")
    write_run_json(out, args, model_config=cfg.to_dict())
    print(f"{ips:.2f} images/s at batch {args.batch} on {rec['hardware']}")
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import REL_TOL, run_suite

    results = run_suite(args.seed)
    bad = 0
    for r in results:
        bad += not r.ok
        print(f"{'PASS' if r.ok else 'FAIL'} {r.name:22s} {r.shape:40s} rel_err={r.rel_error:.2e}")
    print(f"{len(results) - bad}/{len(results)} within {REL_TOL:g}")
    return 0 if bad == 0 else 1


# -- parser -------------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="focalconv", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, output_default):
        p.add_argument("--config", help="ModelConfig JSON file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config or training field")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--output-dir", default=output_default)

    p = sub.add_parser("train", help="train from scratch")
    common(p, "runs/train")
    p.add_argument("--train-manifest")
    p.add_argument("--test-manifest")
    p.add_argument("--epochs", type=int, default=1)
    p.add_argument("--batch-size", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint")
    p.add_argument("--test-manifest")
    p.add_argument("--output-dir", default="runs/eval")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-weighted-loss", dest="weighted_loss", action="store_false")
    p.set_defaults(func=cmd_eval)

    for name, func, help_ in (("bench", cmd_bench, "measure forward throughput"),
                              ("profile", cmd_profile, "parameter / FLOP report")):
        p = sub.add_parser(name, help=help_)
        common(p, f"runs/{name}")
        p.add_argument("--batch", type=int, default=6)
        p.add_argument("--warmup", type=int, default=1)
        p.add_argument("--iters", type=int, default=3)
        p.set_defaults(func=func)
        if name == "bench":
            p.add_argument("--dtype", choices=["float32", "float64"], default="float32")
        else:
            p.add_argument("--throughput", action="store_true", help="also time forward passes")
            p.add_argument("--points-csv", help="write a (method, f1, throughput) row for plotting")
            p.add_argument("--f1", type=float, help="weighted F1 to place in --points-csv")

    p = sub.add_parser("synth", help="write a synthetic dataset")
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--per-class", type=int, default=16)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--output-dir", default="runs/synth")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def _thread_limit():
    raw = os.environ.get("FOCALCONV_THREADS")
    if not raw:
        return contextlib.nullcontext()
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"FOCALCONV_THREADS must be an integer, got {raw!r}") from None
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=max(n, 1))


def run(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    args._argv = argv
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        with _thread_limit():
            return args.func(args)
    except UsageError as e:
        print(f"focalconv {args.command}: usage error: {e}", file=sys.stderr)
        return 2
    except FocalConvError as e:
        print(f"focalconv {args.command}: error: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"focalconv {args.command}: error: {e}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
