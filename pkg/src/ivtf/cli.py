"""Command line entry point: ``ivtf <subcommand> [flags]``.

Sweep subcommands build an :class:`~ivtf.harness.ExperimentConfig` from the
scenario defaults, then an optional JSON ``--config`` file, then explicit
flags (later sources win), run it and write the sweep CSV.
"""

from __future__ import annotations

import argparse
import csv
import io
import math
import sys

from . import harness
from .datagen import ClipBounds, generate_prompt, sample_task
from .estimators import SampleSizeError, mse_bound, ols, ridge_two_sls, two_sls
from .gd2sls import DivergenceError
from .numerics import RngStream
from .transformer import ConstructedPredictor, build_looped_model, dump_model, extract_coefficients, load_model

SWEEP_COMMANDS = {
    "sweep-n": "standard",
    "sweep-iv-strength": "iv-strength",
    "quadratic": "quadratic",
    "underid": "underid",
    "multicollinearity": "multicollinearity",
    "nonlinear": "nonlinear",
    "endogeneity": "endogeneity",
}
HEAVY_ESTIMATORS = ("ols", "2sls", "ridge-2sls", "ridge-ols", "tf")
HEAVY_RIDGE = 1.0


def _csv_list(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def _float_list(text: str) -> list[float]:
    return [float(t) for t in _csv_list(text)]


def _add_common(sp: argparse.ArgumentParser) -> None:
    sp.add_argument("--p", type=int, help="number of regressors")
    sp.add_argument("--q", type=int, help="number of instruments")
    sp.add_argument("--n", type=int, help="training sample size")
    sp.add_argument("--seed", type=int, help="base random seed")
    sp.add_argument("--rates", help="safe | optimal | a=<alpha>,e=<eta>")
    sp.add_argument("--lambda", dest="lam", type=float, help="second-stage ridge penalty")
    sp.add_argument("--tau", type=float, help="first-stage ridge penalty")
    sp.add_argument("--out", help="output CSV path (default: stdout)")


def _add_tf(sp: argparse.ArgumentParser) -> None:
    sp.add_argument("--loops", help="loop count of the constructed transformer, or 'auto'")
    sp.add_argument("--delta", type=float, help="finite-difference step for coefficient extraction")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ivtf", description="IV regression, GD-2SLS and looped-transformer emulation")
    sub = parser.add_subparsers(dest="command", required=True)

    for name, scenario in SWEEP_COMMANDS.items():
        sp = sub.add_parser(name, help=f"Monte Carlo sweep of the {scenario} scenario")
        _add_common(sp)
        _add_tf(sp)
        sp.add_argument("--grid", help="comma-separated sweep values (sample sizes or factors r)")
        sp.add_argument("--sims", type=int, help=f"simulations per sweep point (default {harness.DEFAULT_SIMS})")
        sp.add_argument("--sims-500", action="store_true", help="use 500 simulations per point")
        sp.add_argument("--estimators", help=f"comma-separated subset of {','.join(harness.ESTIMATORS)}")
        sp.add_argument("--workers", type=int, help="worker processes (results do not depend on it)")
        sp.add_argument("--stddev", action="store_true", default=None, help="add standard-deviation columns")
        sp.add_argument("--config", help="JSON file with ExperimentConfig fields")
        sp.add_argument("--svg", help="also write an SVG plot (requires --out)")
        if scenario == "multicollinearity":
            sp.add_argument("--heavy", action="store_true", default=None, help="2 collinear X and 5 collinear Z columns")
        if scenario == "underid":
            sp.add_argument("--q-eff", dest="q_eff", type=int, help="number of instruments kept")
        if scenario == "nonlinear":
            sp.add_argument("--hidden", type=int, help="hidden width of the instrument network")
        sp.set_defaults(func=cmd_sweep, scenario=scenario)

    sp = sub.add_parser("convergence", help="distance of the GD-2SLS iterates to the closed form")
    _add_common(sp)
    sp.add_argument("--steps", type=int, default=500, help="number of GD steps")
    sp.add_argument("--svg", help="also write a log-scale SVG plot (requires --out)")
    sp.set_defaults(func=cmd_convergence)

    sp = sub.add_parser("bound-check", help="finite-sample 2SLS error envelope diagnostics")
    _add_common(sp)
    sp.add_argument("--sims", type=int, default=200, help="simulations for the empirical MSE")
    sp.add_argument("--b-z", dest="b_z", type=float, help="instrument norm bound (default 2 sqrt(q))")
    sp.add_argument("--b-eps2", dest="b_eps2", type=float, help="first-stage error bound (default 2 sqrt(p))")
    sp.add_argument("--b-beta", dest="b_beta", type=float, help="coefficient norm bound (default 2 sqrt(p))")
    sp.add_argument("--c-const", dest="c_const", type=float, default=1.0, help="absolute constant of the bound")
    sp.set_defaults(func=cmd_bound_check)

    sp = sub.add_parser("fit", help="OLS, 2SLS and constructed-transformer estimates on a CSV file")
    _add_common(sp)
    _add_tf(sp)
    _add_data_flags(sp)
    sp.set_defaults(func=cmd_fit)

    sp = sub.add_parser("extract", help="finite-difference coefficient extraction on a saved prompt")
    _add_common(sp)
    _add_tf(sp)
    _add_data_flags(sp)
    sp.add_argument("--model", help="model dump to use instead of building one")
    sp.add_argument("--save-model", dest="save_model", help="write the model used to this path")
    sp.set_defaults(func=cmd_extract)

    sp = sub.add_parser("prompt", help="draw one standard prompt and save it as CSV")
    _add_common(sp)
    sp.set_defaults(func=cmd_prompt)
    return parser


def _add_data_flags(sp: argparse.ArgumentParser) -> None:
    sp.add_argument("--data", required=True, help="input CSV with a header row")
    sp.add_argument("--z", help="comma-separated instrument columns (default: z<k> columns)")
    sp.add_argument("--x", help="comma-separated regressor columns (default: x<k> columns)")
    sp.add_argument("--y", help="outcome column (default: y)")
    sp.add_argument("--query-row", dest="query_row", type=int, default=-1, help="0-based data row used as query")


def _emit(text: str, path: str | None) -> None:
    if path is None:
        sys.stdout.write(text)
    else:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)


def _rows_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([harness.fmt(v) for v in row])
    return buf.getvalue()


def _require_out_for_svg(args) -> None:
    if getattr(args, "svg", None) and not args.out:
        raise ValueError("--svg needs --out")


def sweep_config(args) -> harness.ExperimentConfig:
    base = {"scenario": args.scenario}
    if args.scenario == "multicollinearity" and args.heavy:
        base.update(heavy=True, estimators=HEAVY_ESTIMATORS, lam=HEAVY_RIDGE, tau=HEAVY_RIDGE)
    cfg = harness.ExperimentConfig.from_dict(base)
    if args.config:
        file_cfg = harness.load_config_json(args.config)
        file_cfg.pop("scenario", None)  # the subcommand fixes the scenario
        cfg = cfg.with_overrides(**file_cfg)
    sims = harness.FULL_SIMS if args.sims_500 else args.sims
    overrides = dict(
        p=args.p,
        q=args.q,
        n=args.n,
        seed=args.seed,
        rates=args.rates,
        lam=args.lam,
        tau=args.tau,
        loops=args.loops,
        delta=args.delta,
        grid=_float_list(args.grid) if args.grid else None,
        sims=sims,
        estimators=_csv_list(args.estimators) if args.estimators else None,
        workers=args.workers,
        stddev=args.stddev,
        out=args.out,
        svg=args.svg,
        heavy=getattr(args, "heavy", None),
        q_eff=getattr(args, "q_eff", None),
        hidden=getattr(args, "hidden", None),
    )
    return cfg.with_overrides(**overrides)


def cmd_sweep(args) -> int:
    _require_out_for_svg(args)
    cfg = sweep_config(args)
    records = harness.run_experiment(cfg)
    _emit(harness.sweep_csv_text(records, cfg.stddev), cfg.out)
    if cfg.svg:
        harness.plot_sweep_svg(cfg.out, cfg.svg)
    return 0


def _standard_prompt(args, n_default=50):
    p, q = args.p or 5, args.q or 10
    n = args.n or n_default
    gen = RngStream(args.seed or 0, 0).generator()
    task = sample_task(p, q, gen)
    data, _ = generate_prompt(task, n, gen)
    return task, data


def cmd_convergence(args) -> int:
    _require_out_for_svg(args)
    _, data = _standard_prompt(args)
    rates = harness.resolve_rates(data, args.rates or "safe")
    report = harness.convergence_report(data, rates, args.steps, lam=args.lam or 0.0, tau=args.tau or 0.0)
    _emit(harness.convergence_csv_text(report), args.out)
    status = f"diverged at step {report.diverged_at}" if report.diverged else "converging"
    print(f"alpha={rates.alpha!r} eta={rates.eta!r} Lambda={report.rate!r} {status}", file=sys.stderr)
    if args.svg:
        harness.plot_convergence_svg(args.out, args.svg)
    return 0


def cmd_bound_check(args) -> int:
    task, _ = _standard_prompt(args)
    p, q, n = task.p, task.q, args.n or 50
    b_z = args.b_z or 2.0 * math.sqrt(q)
    b_eps2 = args.b_eps2 or 2.0 * math.sqrt(p)
    b_beta = args.b_beta or 2.0 * math.sqrt(p)
    bounds = ClipBounds(b_z=b_z, b_beta=b_beta)
    rows: list[tuple[str, object]] = [("p", p), ("q", q), ("n", n)]
    try:
        rep = mse_bound(task, bounds, b_eps2, n, c_const=args.c_const)
        rows.append(("status", "ok"))
        rows += [
            ("K", rep.k),
            ("K0", rep.k0),
            ("C_n", rep.c_n),
            ("n_min", rep.n_min),
            ("mse_bound", rep.mse_bound),
            ("c_const", rep.c_const),
            ("b_beta", rep.b_beta),
            ("b_theta", rep.b_theta),
            ("b_z", rep.b_z),
            ("b_eps2", rep.b_eps2),
            ("sigma1", rep.sigma1),
            ("lambda_min_z", rep.lambda_min_z),
            ("sigma_min_theta", rep.sigma_min_theta),
        ]
    except SampleSizeError as err:
        rows += [("status", "below-threshold"), ("n_min", err.n_min)]
    mean, se = harness.clipped_2sls_mse(p, q, n, args.sims, args.seed or 0, b_beta, bounds, task=task)
    rows += [("empirical_mse", mean), ("empirical_mse_stderr", se), ("sims", args.sims)]
    _emit(_rows_text(("quantity", "value"), rows), args.out)
    return 0


def _ingest(args):
    return harness.ingest_csv(
        args.data,
        _csv_list(args.z) if args.z else None,
        _csv_list(args.x) if args.x else None,
        args.y,
        args.query_row,
    )


def _model_for(args, data):
    rates = harness.resolve_rates(data, args.rates or "safe")
    loops = harness.parse_loops(args.loops or harness.DEFAULT_LOOPS)
    lam, tau = args.lam or 0.0, args.tau or 0.0
    if loops == "auto":
        cfg = harness.ExperimentConfig(loops="auto", lam=lam, tau=tau)
        loops = harness.loops_for(cfg, data, rates)
    delta = args.delta if args.delta is not None else 5.0
    return build_looped_model(data, loops, rates, lam, tau, x_query_slack=delta), delta


def cmd_fit(args) -> int:
    data = _ingest(args)
    lam, tau = args.lam or 0.0, args.tau or 0.0
    outputs = [("ols", ols(data).beta_hat), ("2sls", two_sls(data).beta_hat)]
    if lam or tau:
        outputs.append(("ridge-2sls", ridge_two_sls(data, lam, tau).beta_hat))
    model, delta = _model_for(args, data)
    outputs.append(("tf", extract_coefficients(ConstructedPredictor(model), data, delta)))
    tf_pred = ConstructedPredictor(model)(data)
    rows = []
    for name, beta in outputs:
        pred = tf_pred if name == "tf" else float(beta @ data.x_query)
        rows.append((name, pred, *beta))
    header = ["estimator", "prediction"] + [f"beta_{k}" for k in range(data.p)]
    _emit(_rows_text(header, rows), args.out)
    return 0


def cmd_extract(args) -> int:
    data = _ingest(args)
    delta = args.delta if args.delta is not None else 5.0
    if args.model:
        model = load_model(args.model)
        if (model.n, model.p, model.q) != (data.n, data.p, data.q):
            raise ValueError(
                f"model expects (n, p, q) = {(model.n, model.p, model.q)}, data has {(data.n, data.p, data.q)}"
            )
    else:
        model, delta = _model_for(args, data)
    if args.save_model:
        dump_model(model, args.save_model)
    beta_tf = extract_coefficients(ConstructedPredictor(model), data, delta)
    ref = (
        ridge_two_sls(data, model.block.lam, model.block.tau)
        if model.block.lam or model.block.tau
        else two_sls(data)
    )
    header = ["estimator"] + [f"beta_{k}" for k in range(data.p)]
    _emit(_rows_text(header, [("tf", *beta_tf), (ref.method, *ref.beta_hat)]), args.out)
    return 0


def cmd_prompt(args) -> int:
    if not args.out:
        raise ValueError("prompt needs --out")
    _, data = _standard_prompt(args)
    harness.export_csv(data, args.out)
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, DivergenceError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
