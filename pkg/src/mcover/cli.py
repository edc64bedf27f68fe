"""Command-line harness: model runs, parameter sweeps, summaries, figures.

Exit codes: 0 success, 2 configuration error, 3 at least one trial diverged
(results are still written).
"""
from __future__ import annotations

import argparse
import csv
import math
import sys
from pathlib import Path

from . import harness as hn
from . import plots


def _add_run_options(p: argparse.ArgumentParser, model: str) -> None:
    p.add_argument("--config", help="flat key=value config file; CLI flags override")
    p.add_argument("--trials", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--workers", type=int)
    p.add_argument("--m", type=int, dest="m")
    p.add_argument("--sperm", type=int, dest="s_perm")
    if model in ("perceptron", "committee", "sweep"):
        p.add_argument("--dest-s", type=int, dest="dest_s")
    p.add_argument("--mu", type=float)
    p.add_argument("--sigma", type=float)
    p.add_argument("--kernel", choices=["ring", "uniform", "identity"])
    if model in ("perceptron", "sweep"):
        p.add_argument("--n", type=int)
        p.add_argument("--alpha", type=float)
        p.add_argument("--gamma", type=float)
        p.add_argument("--tmax", type=float, dest="t_max")
        p.add_argument("--tmin", type=float, dest="t_min")
        p.add_argument("--dt", type=float)
    if model in ("committee", "sweep"):
        p.add_argument("--k", type=int)
        p.add_argument("--n-input", type=int, dest="n_input")
        p.add_argument("--p-train", type=int, dest="p_train")
        p.add_argument("--p-test", type=int, dest="p_test")
        p.add_argument("--beta0", type=float)
        p.add_argument("--beta-growth", type=float, dest="beta_growth")
        p.add_argument("--coupling", type=float)
    if model in ("committee", "mlp", "sweep"):
        p.add_argument("--data")
        p.add_argument("--batch", type=int)
        p.add_argument("--epochs", type=int)
        p.add_argument("--lr", type=float)
    if model in ("perceptron", "committee", "sweep"):
        p.add_argument("--method")
    if model in ("mlp", "sweep"):
        p.add_argument("--arch")
        p.add_argument("--blocks")
        p.add_argument("--mode", choices=["empirical", "exact"])
        p.add_argument("--momentum", type=float)
        p.add_argument("--nesterov", action=argparse.BooleanOptionalAction)
        p.add_argument("--init-noise", type=float, dest="init_noise")
        p.add_argument("--dtype", choices=["float32", "float64"])
        p.add_argument("--n-train", type=int, dest="n_train")
        p.add_argument("--n-test", type=int, dest="n_test")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mcover",
        description="Cover-replicated training with permutation-routed messages")
    sub = parser.add_subparsers(dest="command", required=True)

    for model in ("perceptron", "committee", "mlp"):
        p = sub.add_parser(model, help=f"run {model} trials")
        _add_run_options(p, model)

    p_sweep = sub.add_parser("sweep", help="sweep one parameter and summarize")
    p_sweep.add_argument("--model", required=True,
                         choices=["perceptron", "committee", "mlp"])
    p_sweep.add_argument("--param", required=True,
                         choices=list(hn.SWEEPABLE))
    p_sweep.add_argument("--values", required=True,
                         help="comma-separated swept values")
    p_sweep.add_argument("--no-figure", action="store_true",
                         help="skip rendering the summary figure")
    _add_run_options(p_sweep, "sweep")

    p_sum = sub.add_parser("summarize", help="summarize a results or sweep CSV")
    p_sum.add_argument("--in", dest="input", required=True)
    p_sum.add_argument("--out", required=True)
    p_sum.add_argument("--metric", default="",
                       help="metric column (default: eps_g or test_error)")

    p_plot = sub.add_parser("plot", help="render figures from CSV files")
    p_plot.add_argument("--kind", choices=["sweep", "hist"], default="sweep")
    p_plot.add_argument("--in", dest="inputs", nargs="+", required=True)
    p_plot.add_argument("--out", required=True)
    p_plot.add_argument("--metric", default="test_error")
    p_plot.add_argument("--title", default="")
    p_plot.add_argument("--log-x", action="store_true")
    return parser


_NON_CONFIG_ARGS = {"command", "config", "param", "values", "model", "no_figure",
                    "input", "inputs", "metric", "kind", "title", "log_x"}


def _config_from_args(args: argparse.Namespace, model: str) -> hn.ExperimentConfig:
    mapping = {}
    if getattr(args, "config", None):
        mapping.update(hn.load_config_file(args.config))
    for key, value in vars(args).items():
        if key in _NON_CONFIG_ARGS or value is None:
            continue
        mapping[key] = value
    mapping["model"] = model
    cfg = hn.config_from_mapping(mapping)
    return cfg.resolved()


def _run_model(args: argparse.Namespace, model: str) -> int:
    cfg = _config_from_args(args, model)
    results = hn.run_trials(cfg)
    out = Path(cfg.out)
    hn.write_results_csv(cfg, results, out)
    hn.write_config_json(cfg, out.with_suffix(out.suffix + ".config.json"))
    n_div = sum(r.diverged for r in results)
    print(f"wrote {len(results)} trials to {out} ({n_div} diverged)")
    return 3 if n_div else 0


def _run_sweep(args: argparse.Namespace) -> int:
    cfg = _config_from_args(args, args.model)
    try:
        values = [float(v) for v in args.values.split(",") if v.strip()]
    except ValueError:
        raise hn.ConfigError(f"bad sweep values {args.values!r}")
    if not values:
        raise hn.ConfigError("empty sweep value list")
    rows, summaries = hn.sweep(cfg, args.param, values)
    out = Path(cfg.out)
    hn.write_sweep_csv(cfg, args.param, rows, out)
    summary_path = out.with_suffix(".summary.csv")
    hn.write_summary_csv(cfg, summaries, summary_path)
    hn.write_config_json(cfg, out.with_suffix(out.suffix + ".config.json"))
    made = [str(out), str(summary_path)]
    if not args.no_figure:
        fig_path = plots.render_summary_figure(
            summary_path, out.with_suffix(".png"),
            title=f"{cfg.model} {cfg.method}: {args.param} sweep",
            ylabel=hn.PRIMARY_METRIC[cfg.model])
        made.append(str(fig_path))
    n_div = sum(r.diverged for _, r in rows)
    print("wrote " + ", ".join(made) + f" ({n_div} diverged)")
    return 3 if n_div else 0


def _run_summarize(args: argparse.Namespace) -> int:
    with open(args.input, "r", encoding="utf-8", newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise hn.ConfigError(f"no rows in {args.input}")
    metric = args.metric
    if not metric:
        metric = "eps_g" if "eps_g" in rows[0] else "test_error"
    if metric not in rows[0]:
        raise hn.ConfigError(f"no column {metric!r} in {args.input}")
    groups: dict = {}
    for row in rows:
        key = (row.get("param", "all"), row.get("value", ""))
        groups.setdefault(key, []).append(row)
    with open(args.out, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("param", "value", "n", "mean", "se", "ci95", "formatted"))
        for (param, value), grp in groups.items():
            vals = []
            for row in grp:
                try:
                    v = float(row[metric])
                except ValueError:
                    continue
                if math.isfinite(v):
                    vals.append(v)
            n, mean, se, ci = hn.summarize(vals)
            formatted = hn.format_mean_ci(mean, ci) if n >= 2 else ""
            writer.writerow([param, value, n, repr(mean), repr(se), repr(ci),
                             formatted])
    print(f"wrote summary to {args.out}")
    return 0


def _run_plot(args: argparse.Namespace) -> int:
    if args.kind == "sweep":
        plots.render_summary_figure(args.inputs, args.out, title=args.title,
                                    log_x=args.log_x)
    else:
        plots.render_trial_histogram(args.inputs, args.out, metric=args.metric,
                                     title=args.title)
    print(f"wrote figure to {args.out}")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command in ("perceptron", "committee", "mlp"):
            return _run_model(args, args.command)
        if args.command == "sweep":
            return _run_sweep(args)
        if args.command == "summarize":
            return _run_summarize(args)
        return _run_plot(args)
    except hn.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
