"""Command-line front end: experiment execution, bound reports and figure rendering.

Exit codes: 0 success, 2 configuration/parse failure (with a line number when
one is known), 3 numerical abort naming the device and round.
"""

from __future__ import annotations

import argparse
import csv
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from fedsim import analysis, compressor, config as config_mod, federation, model, plots
from fedsim.errors import (
    ConfigParseError,
    ConfigurationError,
    FedsimError,
    NumericalError,
)

RECORD_HEADER = (
    "round,iteration,train_loss,test_acc,dist_sq_to_opt,bits_round,bits_cum,eps_prime,sigma_sq"
)


def _fmt(value: float) -> str:
    return f"{value:.12g}"


def write_records_csv(path: Path, records) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(RECORD_HEADER + "\n")
        for r in records:
            fh.write(
                f"{r.round_index},{r.iteration},{_fmt(r.train_loss)},{_fmt(r.test_acc)},"
                f"{_fmt(r.dist_sq_to_opt)},{r.bits_round},{r.bits_cum},"
                f"{_fmt(r.eps_prime)},{_fmt(r.sigma_sq)}\n"
            )


def _sweep_value_text(value) -> str:
    return "none" if value is None else str(value)


def _cell_filename(param: str | None, value, seed: int) -> str:
    if param is None:
        return f"run_seed{seed}.csv"
    return f"run_{param}={_sweep_value_text(value)}_seed{seed}.csv"


def _run_cell(exp: config_mod.ExperimentConfig, value, seed: int, out_dir: str) -> dict:
    """Execute one (sweep value, seed) cell and write its CSV; returns the manifest row."""
    train, test = exp.dataset.build(seed)
    cfg = exp.cell_config(value, seed)
    partitions = exp.dataset.partition(train, cfg.num_devices, seed)
    x_star = None
    if exp.compute_optimum and cfg.mu > 0:
        x_star = model.solve_reference_optimum(train, cfg.mu, tol=exp.optimum_tol)
    records = federation.run(cfg, train, partitions, x_star=x_star, test_data=test)
    filename = _cell_filename(exp.sweep_param, value, seed)
    write_records_csv(Path(out_dir) / filename, records)
    return {
        "file": filename,
        "param": exp.sweep_param or "",
        "value": _sweep_value_text(value) if exp.sweep_param else "",
        "seed": str(seed),
    }


def run_experiment(
    config_path: str,
    out_dir: str | None = None,
    seed: int | None = None,
    jobs: int = 1,
    render: bool = True,
) -> int:
    """Run every sweep cell of a config, write per-cell CSVs plus manifest.csv."""
    kv = config_mod.load_config(config_path)
    exp = config_mod.build_experiment(kv)
    out = Path(out_dir if out_dir is not None else exp.output)
    out.mkdir(parents=True, exist_ok=True)
    base_seed = seed if seed is not None else exp.run.seed

    cells = [
        (value, base_seed + repeat)
        for value in exp.sweep_values
        for repeat in range(exp.repeats)
    ]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(_run_cell, exp, v, s, str(out)) for v, s in cells]
            rows = [f.result() for f in futures]
    else:
        rows = [_run_cell(exp, v, s, str(out)) for v, s in cells]

    with open(out / "manifest.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["file", "param", "value", "seed"], lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    if render:
        plots.render_run_figures(out)
    return 0


def write_bound_report(path: Path, report: analysis.TradeoffReport) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(",".join(analysis.REPORT_COLUMNS) + "\n")
        for row in report.rows:
            cells = [str(row.local_steps), str(row.participants), str(row.rounds),
                     _fmt(row.bound_total)]
            cells += [_fmt(t) for t in row.terms]
            cells.append(str(int(row.feasible)))
            fh.write(",".join(cells) + "\n")


def run_bound_report(
    config_path: str,
    out_dir: str | None = None,
    render: bool = True,
) -> int:
    """Evaluate the trade-off sweep of the convergence bound and emit bound_report.csv."""
    kv = config_mod.load_config(config_path)
    privacy = config_mod.build_privacy(kv)
    quant = config_mod.parse_scalar(config_mod.get_str(kv, "run.quant_level", "10"))
    constants = model.ProblemConstants(
        L=config_mod.get_float(kv, "constants.L", 1.0),
        mu=config_mod.get_float(kv, "constants.mu", 1.0),
        sigma_grad=config_mod.get_float(kv, "constants.sigma", 0.0),
        lambda_het=config_mod.get_float(kv, "constants.lambda", 0.0),
        G=config_mod.get_float(kv, "constants.G", 1.0),
        b=config_mod.get_int(kv, "constants.batch_size", 10),
        d=config_mod.get_int(kv, "constants.dim", 100),
    )
    # The bound only consumes the schedule shape and the privacy knobs; the
    # algorithm label just has to be consistent with the privacy section.
    run_cfg = federation.RunConfig(
        algorithm="dp_fedpaq" if privacy is not None else "fedpaq",
        num_devices=config_mod.get_int(kv, "run.num_devices", 100),
        participants=config_mod.get_int(kv, "run.participants", 10),
        local_steps=config_mod.get_int(kv, "run.local_steps", 1),
        total_iters=config_mod.get_int(kv, "run.total_iters", 1000),
        batch_size=constants.b,
        quant_level=quant,
        privacy=privacy,
    )
    if "budget.beta" in kv:
        beta = config_mod.get_float(kv, "budget.beta")
    else:
        beta = float(compressor.bit_cost(constants.d, run_cfg.quant_level))
    if "budget.total_bits" in kv:
        budget = analysis.CommBudget.from_total(
            config_mod.get_float(kv, "budget.total_bits"), beta
        )
    else:
        budget = analysis.CommBudget(
            config_mod.get_float(kv, "budget.capacity"),
            config_mod.get_float(kv, "budget.duration"),
            beta,
        )
    if "bound.q" in kv:
        q = config_mod.get_float(kv, "bound.q")
    elif run_cfg.quant_level is not None:
        q = compressor.q_factor(constants.d, run_cfg.quant_level)
    else:
        q = 0.0
    report = analysis.dominant_tradeoff(
        run_cfg,
        budget,
        constants,
        q=q,
        dist0=config_mod.get_float(kv, "bound.dist0", 1.0),
        n_k=config_mod.get_int(kv, "bound.n_k", 100),
    )
    out = Path(out_dir if out_dir is not None else config_mod.get_str(kv, "experiment.output", "out"))
    out.mkdir(parents=True, exist_ok=True)
    write_bound_report(out / "bound_report.csv", report)
    if report.best_index is None:
        print("no feasible (local steps, participants) pair under the budget")
    else:
        best = report.rows[report.best_index]
        print(
            f"minimizer: local_steps={best.local_steps} participants={best.participants} "
            f"rounds={best.rounds} bound={best.bound_total:.6g}"
        )
    if render:
        plots.render_bound_figure(out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedsim",
        description="Deterministic federated-learning simulator with local differential privacy",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute an experiment config")
    p_run.add_argument("config")
    p_run.add_argument("--seed", type=int, default=None, help="override the base seed")
    p_run.add_argument("--out-dir", default=None, help="override the output directory")
    p_run.add_argument("--jobs", type=int, default=1, help="parallel sweep cells")
    p_run.add_argument("--no-plots", action="store_true", help="skip figure rendering")

    p_bound = sub.add_parser("bound", help="emit a convergence-bound trade-off report")
    p_bound.add_argument("config")
    p_bound.add_argument("--out-dir", default=None)
    p_bound.add_argument("--no-plots", action="store_true")

    p_plot = sub.add_parser("plot", help="re-render figures from an output directory")
    p_plot.add_argument("out_dir")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "run":
            return run_experiment(
                args.config,
                out_dir=args.out_dir,
                seed=args.seed,
                jobs=args.jobs,
                render=not args.no_plots,
            )
        if args.command == "bound":
            return run_bound_report(args.config, out_dir=args.out_dir, render=not args.no_plots)
        out = Path(args.out_dir)
        if (out / "bound_report.csv").exists():
            plots.render_bound_figure(out)
        if (out / "manifest.csv").exists():
            plots.render_run_figures(out)
        return 0
    except NumericalError as exc:
        print(f"fedsim: numerical abort: {exc}", file=sys.stderr)
        return 3
    except (ConfigParseError, ConfigurationError) as exc:
        print(f"fedsim: config error: {exc}", file=sys.stderr)
        return 2
    except FedsimError as exc:
        print(f"fedsim: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
