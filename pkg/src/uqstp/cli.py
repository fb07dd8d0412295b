"""Command-line entry point: ``uqstp <command> [flags]``.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import gradsuite
from .dataset import generate_synthetic, load_csv, random_centroids, write_csv
from .graph import build_adjacency, diffusion_operators, graph_from_dict, graph_to_dict, pairwise_distances, \
    stationary_distribution
from .metrics import METRIC_NAMES
from .model import DISTRIBUTIONS, VARIANTS, ModelConfig
from .training import Checkpoint, TrainConfig, evaluate_model, forecast_windows, prepare, train, write_history

log = logging.getLogger("uqstp")

CONFIG_SECTIONS = {
    "graph": {"sigma2": None, "r": None},
    "data": {"per": "region_variable", "fill": "zero"},
    "model": {f.name: f.default for f in fields(ModelConfig)},
    "train": {f.name: f.default for f in fields(TrainConfig)},
}


class UsageError(Exception):
    pass


def load_run_config(path) -> dict:
    """Read a sectioned JSON config; unknown sections or keys are rejected."""
    raw = json.loads(Path(path).read_text()) if path else {}
    if not isinstance(raw, dict):
        raise UsageError("config must be a JSON object")
    out = {name: dict(defaults) for name, defaults in CONFIG_SECTIONS.items()}
    for section, values in raw.items():
        if section not in CONFIG_SECTIONS:
            raise UsageError(f"unknown config section {section!r}")
        unknown = set(values) - set(CONFIG_SECTIONS[section])
        if unknown:
            raise UsageError(f"unknown keys in config section {section!r}: {sorted(unknown)}")
        out[section].update(values)
    return out


def _apply_flags(cfg: dict, args, mapping: dict) -> None:
    for flag, (section, key) in mapping.items():
        value = getattr(args, flag, None)
        if value is not None:
            cfg[section][key] = value


TRAIN_FLAGS = {
    "variant": ("train", "variant"), "dist": ("train", "dist"), "seed": ("train", "seed"),
    "max_epochs": ("train", "max_epochs"), "batch_size": ("train", "batch_size"), "lr": ("train", "lr0"),
    "patience": ("train", "patience"), "t": ("train", "t"), "T": ("train", "T"),
    "decay_mode": ("train", "decay_mode"), "cheb_order": ("model", "cheb_order"),
    "v_min": ("model", "v_min"), "dropout": ("model", "dropout"),
}


def _load_data(args, cfg):
    meta = json.loads(Path(args.meta).read_text())
    if args.graph:
        gspec = json.loads(Path(args.graph).read_text())
        gspec = gspec.get("graph", gspec)
    elif "graph" in meta:
        gspec = meta["graph"]
    else:
        raise UsageError("no graph: pass --graph or use metadata carrying a 'graph' entry")
    gspec = dict(gspec)
    for key in ("sigma2", "r"):
        if cfg["graph"][key] is not None:
            gspec[key] = cfg["graph"][key]
    tensor = load_csv(args.data, args.meta, fill=cfg["data"]["fill"])
    return tensor, graph_from_dict(gspec)


def _write_table(path, header, rows) -> None:
    fh = open(path, "w", newline="") if path else sys.stdout
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    finally:
        if path:
            fh.close()


def _fmt(x) -> str:
    return f"{x:.6g}"


# ---------------------------------------------------------------- commands

def cmd_generate(args) -> int:
    if not -1 <= args.cross_corr <= 1:
        raise UsageError("correlation must be in [-1,1]")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    centroids = random_centroids(args.regions, seed=args.seed)
    graph = build_adjacency(pairwise_distances(centroids), args.sigma2, args.r)
    try:
        syn = generate_synthetic(args.regions, args.variables, args.length, graph, args.cross_corr,
                                 args.noise_scale, args.seed, args.heteroscedastic, args.mode, args.lag)
    except ValueError as err:
        raise UsageError(str(err)) from None
    write_csv(syn.tensor, out / "data.csv", out / "meta.json",
              {"graph": graph_to_dict(centroids, args.sigma2, args.r)})
    (out / "truth.json").write_text(json.dumps(syn.truth_dict(), sort_keys=True) + "\n")
    print(f"wrote {out / 'data.csv'}, {out / 'meta.json'}, {out / 'truth.json'}")
    return 0


def cmd_graph(args) -> int:
    spec = json.loads(Path(args.graph).read_text())
    graph = graph_from_dict(spec.get("graph", spec))
    ops = diffusion_operators(graph)
    print(f"regions,{graph.n_regions}")
    print(f"edges,{graph.edge_count}")
    print(f"density,{_fmt(graph.density)}")
    print("K,truncation_mass")
    for K in range(args.max_k + 1):
        _, mass = stationary_distribution(ops, args.alpha, K)
        print(f"{K},{_fmt(mass)}")
    return 0


def _prepared_from_args(args, cfg, spec=None, expect_variables=None):
    tensor, graph = _load_data(args, cfg)
    if expect_variables is not None and list(tensor.variable_names) != list(expect_variables):
        raise UsageError(f"dataset variables {list(tensor.variable_names)} do not match checkpoint "
                         f"variables {list(expect_variables)}")
    if spec is not None and spec.lo.shape[0] != tensor.shape[0]:
        raise UsageError(f"dataset has {tensor.shape[0]} regions, checkpoint expects {spec.lo.shape[0]}")
    tc = cfg["train"]
    return prepare(tensor, graph, tc["t"], tc["T"], cfg["model"]["cheb_order"], tc["dist"],
                   cfg["data"]["per"], spec=spec)


def _configs(cfg):
    try:
        return TrainConfig.from_dict(cfg["train"]), ModelConfig.from_dict(cfg["model"])
    except (TypeError, ValueError) as err:
        raise UsageError(str(err)) from None


def cmd_train(args) -> int:
    cfg = load_run_config(args.config)
    _apply_flags(cfg, args, TRAIN_FLAGS)
    if args.no_clip:
        cfg["train"]["clip_norm"] = None
    tcfg, mcfg = _configs(cfg)
    prep = _prepared_from_args(args, cfg)

    def report(r):
        print(f"epoch {r.epoch} train_loss {_fmt(r.train_loss)} val_loss {_fmt(r.val_loss)} lr {_fmt(r.lr)}",
              flush=True)

    try:
        result = train(tcfg, prep, mcfg, on_epoch=None if args.quiet else report)
    except FloatingPointError as err:
        print(f"training failed: {err}", file=sys.stderr)
        return 1
    result.checkpoint.save(args.checkpoint)
    if args.history:
        write_history(result.history, args.history)
    print(f"best val loss {_fmt(result.checkpoint.best_val_loss)} at epoch {result.checkpoint.epoch}")
    return 0


def _load_checkpoint(args):
    ckpt = Checkpoint.load(args.checkpoint)
    cfg = load_run_config(None)
    cfg["train"].update(ckpt.config["train"])
    cfg["model"].update(ckpt.config["model"])
    prep = _prepared_from_args(args, cfg, spec=ckpt.spec, expect_variables=ckpt.config["variables"])
    if prep.supports.shape != np.asarray(ckpt.config["supports"]).shape:
        raise UsageError("dataset graph does not match the checkpoint's region count")
    return ckpt, ckpt.build_model(), prep


def _split(prep, name):
    return {"train": prep.train, "val": prep.val, "test": prep.test}[name]


def cmd_predict(args) -> int:
    ckpt, model, prep = _load_checkpoint(args)
    windows = _split(prep, args.split)
    _, fd, _ = forecast_windows(model, windows, prep.spec)
    fd.variable_names = list(prep.variable_names)
    out = fd.to_dict()
    out["window_start"] = windows.start.tolist()
    text = json.dumps(out, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
    else:
        print(text)
    return 0


def cmd_evaluate(args) -> int:
    ckpt, model, prep = _load_checkpoint(args)
    report = evaluate_model(model, _split(prep, args.split), prep.spec, prep.variable_names,
                            selective=args.selective, score=args.score)
    text = json.dumps(report.to_dict(), indent=1, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
    else:
        print(text)
    if args.selective_csv and report.selective is not None:
        report.selective.write_csv(args.selective_csv)
    return 0


def cmd_ablate(args) -> int:
    cfg = load_run_config(args.config)
    _apply_flags(cfg, args, TRAIN_FLAGS)
    base, mcfg = _configs(cfg)
    prep = _prepared_from_args(args, cfg)
    rows = []
    for variant in VARIANTS:
        tcfg = TrainConfig.from_dict({**base.to_dict(), "variant": variant, "dist": "gaussian"})
        try:
            result = train(tcfg, prep, mcfg)
        except FloatingPointError as err:
            print(f"training {variant} failed: {err}", file=sys.stderr)
            return 1
        report = evaluate_model(result.model, prep.test, prep.spec, prep.variable_names)
        rows.append([variant] + [_fmt(report.overall[k]) for k in METRIC_NAMES])
        print(f"{variant}: mae {rows[-1][1]} crps {rows[-1][-1]}", file=sys.stderr, flush=True)
    _write_table(args.out, ["variant", *METRIC_NAMES], rows)
    return 0


def cmd_gradcheck(args) -> int:
    try:
        results = gradsuite.run_suite(args.instances, args.seed, inject=args.inject_fault)
    except ValueError as err:
        raise UsageError(str(err)) from None
    _write_table(None, ["op", "max_rel_err", "status"],
                 [[r.op, f"{r.max_rel_err:.3e}", r.status] for r in results])
    failed = [r.op for r in results if not r.ok]
    if failed:
        print(f"gradient check failed: {', '.join(failed)}", file=sys.stderr)
        return 1
    return 0


# ---------------------------------------------------------------- parser

def _data_flags(p, need_config=True):
    p.add_argument("--data", required=True, help="long-format CSV: time_index,region_id,variable,value")
    p.add_argument("--meta", required=True, help="metadata JSON (regions, variables, step_minutes, optional graph)")
    p.add_argument("--graph", help="graph JSON; defaults to the 'graph' entry of --meta")
    if need_config:
        p.add_argument("--config", help="run config JSON with sections graph/data/model/train")


def _train_flags(p):
    p.add_argument("--variant", choices=VARIANTS, help="model variant (config default: full)")
    p.add_argument("--dist", choices=DISTRIBUTIONS, help="output distribution (config default: gaussian)")
    p.add_argument("--seed", type=int, help="seed for init, shuffling and dropout (default 0)")
    p.add_argument("--max-epochs", type=int, help="epoch cap (default 200)")
    p.add_argument("--batch-size", type=int, help="batch size (default 64)")
    p.add_argument("--lr", type=float, help="initial learning rate (default 1e-3)")
    p.add_argument("--decay-mode", choices=("subtract", "multiply"),
                   help="learning-rate decay every 10 epochs: lr0 - 5e-4*k or lr0 * 5e-4**k (default subtract)")
    p.add_argument("--patience", type=int, help="early-stopping patience in epochs (default 50)")
    p.add_argument("--t", type=int, help="input window length (default 12)")
    p.add_argument("--T", type=int, help="prediction horizon (default 1)")
    p.add_argument("--cheb-order", type=int, help="Chebyshev order K (default 2)")
    p.add_argument("--v-min", type=float, help="eigenvalue floor of the covariance (default 1e-4)")
    p.add_argument("--dropout", type=float, help="temporal-branch dropout rate (default 0.1)")


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(prog="uqstp", description="Multivariate probabilistic spatiotemporal forecasting.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic dataset", formatter_class=fmt)
    p.add_argument("--regions", type=int, default=20)
    p.add_argument("--variables", type=int, default=3)
    p.add_argument("--length", type=int, default=600)
    p.add_argument("--cross-corr", type=float, default=0.0, help="noise correlation between variables")
    p.add_argument("--noise-scale", type=float, default=1.0)
    p.add_argument("--heteroscedastic", action="store_true", help="noise std follows the daily cycle, 1x to 5x")
    p.add_argument("--mode", choices=("mixed", "lagged"), default="mixed")
    p.add_argument("--lag", type=int, default=1, help="delay used by --mode lagged")
    p.add_argument("--sigma2", type=float, default=9.0, help="Gaussian kernel width")
    p.add_argument("--r", type=float, default=0.1, help="adjacency threshold")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("graph", help="inspect a region graph", formatter_class=fmt)
    p.add_argument("action", choices=("inspect",))
    p.add_argument("--graph", required=True, help="graph JSON (or metadata JSON with a 'graph' entry)")
    p.add_argument("--alpha", type=float, default=0.2, help="restart probability")
    p.add_argument("--max-k", type=int, default=6, help="largest truncation order in the table")
    p.set_defaults(func=cmd_graph)

    p = sub.add_parser("train", help="train a model", formatter_class=fmt)
    _data_flags(p)
    _train_flags(p)
    p.add_argument("--no-clip", action="store_true", help="disable gradient clipping at global norm 5")
    p.add_argument("--checkpoint", required=True, help="checkpoint output path")
    p.add_argument("--history", help="per-epoch CSV output path")
    p.add_argument("--quiet", action="store_true", help="skip per-epoch lines")
    p.set_defaults(func=cmd_train)

    for name, func, helptext in (("predict", cmd_predict, "dump forecasts"),
                                 ("evaluate", cmd_evaluate, "score forecasts")):
        p = sub.add_parser(name, help=helptext, formatter_class=fmt)
        _data_flags(p, need_config=False)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--split", choices=("train", "val", "test"), default="test")
        p.add_argument("--out", help="output JSON path (stdout when omitted)")
        if name == "evaluate":
            p.add_argument("--selective", action="store_true", help="add the selective-regression curve")
            p.add_argument("--score", choices=("logdet", "trace"), default="logdet",
                           help="uncertainty score for abstention")
            p.add_argument("--selective-csv", help="also write the curve as CSV")
        p.set_defaults(func=func)

    p = sub.add_parser("ablate", help="train all variants and compare test metrics", formatter_class=fmt)
    _data_flags(p)
    _train_flags(p)
    p.add_argument("--out", help="CSV output path (stdout when omitted)")
    p.set_defaults(func=cmd_ablate, no_clip=False)

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks", formatter_class=fmt)
    p.add_argument("--instances", type=int, default=10, help="random instances per operation")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--inject-fault", metavar="OP", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def _thread_limit():
    value = os.environ.get("UQSTP_THREADS")
    if not value:
        return None
    try:
        n = int(value)
    except ValueError:
        raise UsageError(f"UQSTP_THREADS must be a positive integer, got {value!r}") from None
    if n < 1:
        raise UsageError(f"UQSTP_THREADS must be a positive integer, got {value!r}")
    from threadpoolctl import threadpool_limits
    return threadpool_limits(n)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        limiter = _thread_limit()
        try:
            return args.func(args)
        finally:
            if limiter is not None:
                limiter.restore_original_limits()
    except UsageError as err:
        print(f"uqstp {args.command}: {err}", file=sys.stderr)
        return 2
    except (FileNotFoundError, json.JSONDecodeError) as err:
        print(f"uqstp {args.command}: {err}", file=sys.stderr)
        return 2
    except ValueError as err:
        print(f"uqstp {args.command}: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
