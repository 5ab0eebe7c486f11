"""Command-line entry point: ``cwmstream <subcommand> [flags]``.

Subcommands: gen-data, train, eval, bench, flops, masks, reproduce.  Every
run that writes files also writes ``run_config.json`` (fully resolved
configuration plus tool version) next to them.

Exit codes: 0 success, 1 configuration/usage error, 2 runtime failure.
"""
import argparse
import csv
import json
import os
import sys
import time
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import __version__, ops
from .masks import bistep_generator, random_contiguous_generator, strip_diagram
from .metrics import AbtConfig, abt_eval, abt_sweep, write_sweep_csv
from .net import build_toynet, load_weights, save_weights
from .profiler import FLOP_CONVENTION, bench_layer, bench_network, count_flops
from .synth import SynthConfig, generate, load_split
from .train import TrainConfig, train

REPRODUCE_COLUMNS = ["model", "alpha", "rho", "per_step_flops", "params", "median_latency_us", "miou_abt"]
ALPHAS = (0.5, 0.65, 0.8, 1.0)
MODELS = (("baseline", None), ("0-BG", 0.0), ("0.25-BG", 0.25))


class ConfigError(Exception):
    def __init__(self, field_name, message):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


@dataclass
class NetConfig:
    num_classes: int = 5
    base_width: int = 16
    alpha: float = 1.0
    rho: float | None = 0.25
    seed: int = 0
    cwm_stem: bool = False
    cwm_skip: bool = False


@dataclass
class BenchConfig:
    steps: int = 40
    warmup: int = 5
    size: int = 64


@dataclass
class RunConfig:
    synth: SynthConfig = field(default_factory=SynthConfig)
    net: NetConfig = field(default_factory=NetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    abt: AbtConfig = field(default_factory=AbtConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)

    def to_dict(self):
        return {k: asdict(getattr(self, k)) for k in ("synth", "net", "train", "abt", "bench")}


# Desk-scale settings for `reproduce --quick`: 32x32 frames, base width 8,
# gradients through time so the masked models learn to use their cache.
QUICK = {
    "synth": {"height": 32, "width": 32, "min_size": 3, "max_size": 7, "n_train": 200, "n_val": 50},
    "net": {"base_width": 8},
    "train": {"j": 5, "epochs": 20, "lr": 0.006, "bptt": True, "lr_schedule": "cosine"},
    "bench": {"steps": 30, "size": 32},
}


def _section(cls, base, updates, name):
    known = {f.name for f in fields(cls)}
    for k in updates:
        if k not in known:
            raise ConfigError(f"{name}.{k}", "unknown field")
    try:
        return replace(base, **updates)
    except (TypeError, ValueError) as e:
        raise ConfigError(name, str(e)) from None


def merge_config(cfg, updates):
    """Apply a nested dict of overrides; each section is re-validated."""
    for name, vals in updates.items():
        if not hasattr(cfg, name):
            raise ConfigError(name, "unknown config section")
        if not isinstance(vals, dict):
            raise ConfigError(name, "expected an object")
        setattr(cfg, name, _section(type(getattr(cfg, name)), getattr(cfg, name), vals, name))
    return cfg


def resolve_config(args, quick=False):
    cfg = RunConfig()
    if quick:
        merge_config(cfg, QUICK)
    if getattr(args, "config", None):
        try:
            with open(args.config) as f:
                merge_config(cfg, json.load(f))
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError("--config", str(e)) from None
    flag_map = {
        "synth": ["height", "width", "n_train", "n_val", "max_speed", "min_size", "max_size", "noise"],
        "net": ["num_classes", "base_width", "alpha", "rho", "cwm_stem", "cwm_skip"],
        "train": ["j", "sequences_per_sample", "lr", "momentum", "weight_decay", "epochs", "eval_every",
                  "bptt", "lr_schedule"],
        "abt": ["k", "average_pair"],
        "bench": ["steps", "warmup", "size"],
    }
    updates = {}
    for section, names in flag_map.items():
        vals = {n: getattr(args, n) for n in names if getattr(args, n, None) is not None}
        if vals:
            updates[section] = vals
    if getattr(args, "seed", None) is not None:
        for section in ("synth", "net", "train"):
            updates.setdefault(section, {})["seed"] = args.seed
    merge_config(cfg, updates)
    synth = cfg.synth
    try:
        synth.validate()
    except ValueError as e:
        raise ConfigError("synth", str(e)) from None
    if cfg.net.base_width < 8:
        raise ConfigError("net.base_width", "must be >= 8")
    if not 0 < cfg.net.alpha <= 1:
        raise ConfigError("net.alpha", "must be in (0, 1]")
    if cfg.net.rho is not None and not 0 <= cfg.net.rho <= 1:
        raise ConfigError("net.rho", "must be in [0, 1] or none")
    if cfg.net.num_classes != synth.num_classes:
        raise ConfigError("net.num_classes", f"must match synth.num_classes ({synth.num_classes})")
    return cfg


def write_run_config(out_dir, cfg, command, path=None):
    """Write the resolved config; ``path`` overrides ``out_dir/run_config.json``."""
    if path is None:
        os.makedirs(out_dir, exist_ok=True)
        path = os.path.join(out_dir, "run_config.json")
    with open(path, "w") as f:
        json.dump({"tool": "cwmstream", "version": __version__, "command": command,
                   "backend": ops.BACKEND, "config": cfg.to_dict()}, f, indent=2)


def _rho(text):
    if text.lower() in ("none", "baseline", "stateless"):
        return None
    try:
        return float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid rho {text!r}") from None


def _bool(text):
    if text.lower() in ("1", "true", "yes"):
        return True
    if text.lower() in ("0", "false", "no"):
        return False
    raise argparse.ArgumentTypeError(f"invalid boolean {text!r}")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser():
    p = _Parser(prog="cwmstream", description="Streaming channel-wise masked convolutions.")
    p.add_argument("--version", action="version", version=f"cwmstream {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def synth_flags(sp):
        sp.add_argument("--height", type=int)
        sp.add_argument("--width", type=int)
        sp.add_argument("--n-train", dest="n_train", type=int)
        sp.add_argument("--n-val", dest="n_val", type=int)
        sp.add_argument("--max-speed", dest="max_speed", type=int)
        sp.add_argument("--min-size", dest="min_size", type=int)
        sp.add_argument("--max-size", dest="max_size", type=int)
        sp.add_argument("--noise", type=float)

    def net_flags(sp):
        sp.add_argument("--num-classes", dest="num_classes", type=int)
        sp.add_argument("--base-width", dest="base_width", type=int)
        sp.add_argument("--alpha", type=float)
        sp.add_argument("--rho", type=_rho, help="bi-step ratio, or 'none' for the stateless baseline")
        sp.add_argument("--cwm-stem", dest="cwm_stem", type=_bool)
        sp.add_argument("--cwm-skip", dest="cwm_skip", type=_bool)

    def common(sp):
        sp.add_argument("--config", help="JSON file with synth/net/train/abt/bench sections")
        sp.add_argument("--seed", type=int)

    sp = sub.add_parser("gen-data", help="render a synthetic dataset")
    common(sp)
    synth_flags(sp)
    sp.add_argument("--out", required=True)

    sp = sub.add_parser("train", help="train a network on a generated dataset")
    common(sp)
    net_flags(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--j", type=int)
    sp.add_argument("--sequences-per-sample", dest="sequences_per_sample", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--momentum", type=float)
    sp.add_argument("--weight-decay", dest="weight_decay", type=float)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--eval-every", dest="eval_every", type=int)
    sp.add_argument("--bptt", type=_bool, help="backpropagate through cached channels (true/false)")
    sp.add_argument("--lr-schedule", dest="lr_schedule", choices=["constant", "cosine"])

    sp = sub.add_parser("eval", help="ABT evaluation of saved weights")
    common(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--weights", required=True)
    sp.add_argument("--k", type=int)
    sp.add_argument("--average-pair", dest="average_pair", action="store_true", default=None)
    sp.add_argument("--sweep", help="kmin:kmax, inclusive")
    sp.add_argument("--out", help="output file (.csv for sweeps, .json otherwise)")

    sp = sub.add_parser("bench", help="latency microbenchmarks")
    common(sp)
    net_flags(sp)
    sp.add_argument("--weights")
    sp.add_argument("--size", type=int)
    sp.add_argument("--steps", type=int)
    sp.add_argument("--warmup", type=int)
    sp.add_argument("--contiguity", action="store_true", help="contiguous vs scattered masked layer")
    sp.add_argument("--channels", type=int, default=64)
    sp.add_argument("--active", type=int)
    sp.add_argument("--out")

    sp = sub.add_parser("flops", help="exact FLOP counts")
    common(sp)
    net_flags(sp)
    sp.add_argument("--weights")
    sp.add_argument("--size", type=int)
    sp.add_argument("--mode", choices=["stateless", "cwm_step"], default="cwm_step")
    sp.add_argument("--out")

    sp = sub.add_parser("masks", help="print a mask schedule")
    sp.add_argument("--channels", type=int, required=True)
    sp.add_argument("--rho", type=float, default=0.0)
    sp.add_argument("--random", action="store_true", help="random contiguous generator")
    sp.add_argument("--count", type=int)
    sp.add_argument("--n-masks", dest="n_masks", type=int, default=4)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--steps", type=int, default=4)

    sp = sub.add_parser("reproduce", help="desk-scale trade-off table (baseline, 0-BG, 0.25-BG x alpha)")
    common(sp)
    sp.add_argument("--out", required=True)
    sp.add_argument("--quick", action="store_true", help="small frames and widths, minutes on a laptop CPU")
    sp.add_argument("--alphas", help="comma-separated width multipliers")
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--n-train", dest="n_train", type=int)
    sp.add_argument("--n-val", dest="n_val", type=int)
    sp.add_argument("--bptt", type=_bool)
    sp.add_argument("--lr-schedule", dest="lr_schedule", choices=["constant", "cosine"])
    return p


def _net_from(cfg):
    n = cfg.net
    return build_toynet(n.num_classes, n.base_width, n.alpha, n.rho, n.seed, n.cwm_stem, n.cwm_skip)


def _log(msg):
    print(msg, file=sys.stderr, flush=True)


def cmd_gen_data(args):
    cfg = resolve_config(args)
    index = generate(cfg.synth, args.out)
    write_run_config(args.out, cfg, "gen-data")
    print(json.dumps({"out": args.out, "sequences": len(index["sequences"])}))


def cmd_train(args):
    cfg = resolve_config(args)
    net = _net_from(cfg)
    train_data = load_split(args.data, "train")
    val_data = load_split(args.data, "val") if cfg.train.eval_every else None
    report = train(net, train_data, cfg.train, val_data, cfg.abt, log=_log)
    weights = os.path.join(args.out, "weights")
    save_weights(net, weights)
    report.weights_path = weights
    report.to_json(os.path.join(args.out, "train_report.json"))
    report.to_csv(os.path.join(args.out, "learning_curve.csv"))
    write_run_config(args.out, cfg, "train")
    print(json.dumps({"weights": weights, "final_loss": report.losses[-1] if report.losses else None}))


def _parse_sweep(text):
    try:
        lo, hi = (int(v) for v in text.split(":"))
    except ValueError:
        raise ConfigError("--sweep", f"expected kmin:kmax, got {text!r}") from None
    if not 1 <= lo <= hi:
        raise ConfigError("--sweep", "need 1 <= kmin <= kmax")
    return range(lo, hi + 1)


def cmd_eval(args):
    cfg = resolve_config(args)
    sweep = _parse_sweep(args.sweep) if args.sweep else None
    net = load_weights(args.weights)
    val = load_split(args.data, "val")
    if sweep:
        rows = abt_sweep(net, val, sweep)
        if args.out:
            write_sweep_csv(rows, args.out)
            _sidecar(args.out, cfg, "eval")
        print("k,miou")
        for k, m in rows:
            print(f"{k},{m:.6f}")
        return
    result = {"k": cfg.abt.k, "average_pair": cfg.abt.average_pair, "miou": abt_eval(net, val, cfg.abt)}
    if args.out:
        with open(args.out, "w") as f:
            json.dump(result, f, indent=2)
        _sidecar(args.out, cfg, "eval")
    print(json.dumps(result))


def _sidecar(out, cfg, command):
    write_run_config(None, cfg, command, path=out + ".run_config.json")


def _emit(report, out, cfg, command):
    data = report.to_dict()
    if out:
        _sidecar(out, cfg, command)
        if out.endswith(".csv"):
            with open(out, "w") as f:
                f.write("\n".join(report.csv_rows()) + "\n")
        else:
            with open(out, "w") as f:
                json.dump(data, f, indent=2)
    print(json.dumps(data, indent=2))


def cmd_bench(args):
    cfg = resolve_config(args)
    b = cfg.bench
    if args.contiguity:
        active = args.active or args.channels // 2
        if not 1 <= active <= args.channels:
            raise ConfigError("--active", f"must be in [1, {args.channels}]")
        report = bench_layer(args.channels, args.channels, b.size, active, warmup=b.warmup, iters=b.steps)
        report.environment["contiguous_over_scattered"] = report.ratio("contiguous", "scattered")
    else:
        net = load_weights(args.weights) if args.weights else _net_from(cfg)
        report = bench_network(net, (b.size, b.size), steps=b.steps, warmup=b.warmup)
        report.environment["cwm_over_stateless"] = report.ratio("cwm", "stateless")
    _emit(report, args.out, cfg, "bench")


def cmd_flops(args):
    cfg = resolve_config(args)
    net = load_weights(args.weights) if args.weights else _net_from(cfg)
    size = cfg.bench.size
    _emit(count_flops(net, (size, size), args.mode), args.out, cfg, "flops")


def cmd_masks(args):
    if args.channels < 1:
        raise ConfigError("--channels", "must be >= 1")
    if args.random:
        count = args.count if args.count is not None else (args.channels + 1) // 2
        try:
            sched = random_contiguous_generator(args.channels, count, args.n_masks, args.seed)
        except ValueError as e:
            raise ConfigError("--count", str(e)) from None
    else:
        try:
            sched = bistep_generator(args.channels, args.rho)
        except ValueError as e:
            raise ConfigError("--rho" if args.channels >= 2 else "--channels", str(e)) from None
    print(sched.to_json())
    print(strip_diagram(sched, args.steps))


def model_dir_name(model, alpha):
    return f"{model}_a{alpha:g}"


def reproduce(cfg, out_dir, alphas=ALPHAS, log=_log):
    """Train and evaluate every (model, alpha) pair; returns the CSV rows."""
    os.makedirs(out_dir, exist_ok=True)
    write_run_config(out_dir, cfg, "reproduce")
    data_dir = os.path.join(out_dir, "data")
    generate(cfg.synth, data_dir)
    train_data = load_split(data_dir, "train")
    val_data = load_split(data_dir, "val")
    size = (cfg.synth.height, cfg.synth.width)
    rows = []
    for model, rho in MODELS:
        for alpha in alphas:
            t0 = time.perf_counter()
            net_cfg = replace(cfg.net, alpha=alpha, rho=rho)
            n = net_cfg
            net = build_toynet(n.num_classes, n.base_width, n.alpha, n.rho, n.seed, n.cwm_stem, n.cwm_skip)
            report = train(net, train_data, cfg.train)
            d = os.path.join(out_dir, "models", model_dir_name(model, alpha))
            save_weights(net, os.path.join(d, "weights"))
            report.weights_path = os.path.join(d, "weights")
            report.to_json(os.path.join(d, "train_report.json"))
            report.to_csv(os.path.join(d, "learning_curve.csv"))
            miou = abt_eval(net, val_data, cfg.abt)
            flops = count_flops(net, size, "cwm_step" if net.spec.stateful else "stateless").total_flops
            lat = bench_network(net, size, steps=cfg.bench.steps, warmup=cfg.bench.warmup)
            rows.append({"model": model, "alpha": alpha, "rho": 1.0 if rho is None else rho,
                         "per_step_flops": flops, "params": net.num_params(),
                         "median_latency_us": round(lat.median("cwm"), 1),
                         "miou_abt": round(100 * miou, 4)})
            log(f"{model} alpha={alpha}: miou {100 * miou:.2f} flops {flops} "
                f"loss {report.losses[-1]:.4f} ({time.perf_counter() - t0:.0f}s)")
    with open(os.path.join(out_dir, "reproduce.csv"), "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=REPRODUCE_COLUMNS)
        w.writeheader()
        w.writerows(rows)
    return rows


def cmd_reproduce(args):
    cfg = resolve_config(args, quick=args.quick)
    alphas = ALPHAS
    if args.alphas:
        try:
            alphas = tuple(float(a) for a in args.alphas.split(","))
        except ValueError:
            raise ConfigError("--alphas", f"invalid list {args.alphas!r}") from None
        if not all(0 < a <= 1 for a in alphas):
            raise ConfigError("--alphas", "each alpha must be in (0, 1]")
    rows = reproduce(cfg, args.out, alphas)
    print(",".join(REPRODUCE_COLUMNS))
    for r in rows:
        print(",".join(str(r[c]) for c in REPRODUCE_COLUMNS))


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "bench": cmd_bench,
    "flops": cmd_flops,
    "masks": cmd_masks,
    "reproduce": cmd_reproduce,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else 1
    try:
        COMMANDS[args.command](args)
    except ConfigError as e:
        print(f"cwmstream {args.command}: config error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # runtime failure
        print(f"cwmstream {args.command}: {type(e).__name__}: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
