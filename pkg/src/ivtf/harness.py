"""Monte Carlo experiments: configuration, per-sim metrics, sweeps, CSV and
SVG output, and CSV ingestion of user data.

Every simulation draws its task from ``RngStream(seed, sim)`` and its prompt
at sweep point ``k`` from an independent stream keyed ``(seed, sim, k + 1)``,
so the same task is reused along a sweep and no result depends on the order
in which simulations run. Simulations are processed in fixed chunks of
``CHUNK`` sims (the unit of work for the worker pool and for the stacked
transformer forward pass); the chunking never depends on the worker count.
"""

from __future__ import annotations

import csv
import io
import json
import math
import re
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Callable, Sequence

import numpy as np

from .datagen import (
    ClipBounds,
    Dataset,
    EndogeneityStrength,
    IvStrength,
    Multicollinearity,
    NonlinearMlp,
    QuadraticIv,
    Standard,
    TaskParams,
    UnderIdentified,
    clip,
    empirical_iv_strength,
    generate_prompt,
    sample_task,
)
from .estimators import EstimatorOutput, ols, ridge_ols, ridge_two_sls, two_sls
from .gd2sls import (
    DivergenceError,
    GDState,
    LearningRates,
    choose_rates,
    contraction_factors,
    run_gd,
)
from .numerics import RngStream
from .transformer import (
    Layout,
    build_looped_model,
    embed,
    loops_for_tolerance,
    looped_forward_stack,
)

ESTIMATORS = ("ols", "2sls", "ridge-2sls", "ridge-ols", "tf")
SWEEP_KIND = {
    "standard": "n",
    "iv-strength": "r",
    "quadratic": "n",
    "underid": "r",
    "multicollinearity": "n",
    "nonlinear": "n",
    "endogeneity": "r",
}
DEFAULT_N_GRID = (20, 30, 40, 50)
DEFAULT_IV_GRID = (0.1, 0.25, 0.5, 1.0, 1.5, 2.0)
DEFAULT_ENDOGENEITY_GRID = (0.0, 0.25, 0.5, 1.0, 1.5, 2.0)
DEFAULT_SIMS = 200
FULL_SIMS = 500
DEFAULT_LOOPS = 200
AUTO_TOL = 1e-13
AUTO_MAX_LOOPS = 5000
CHUNK = 25
NON_IDENTIFIED = "non-identified"

SWEEP_COLUMNS = (
    "scenario",
    "sweep_value",
    "estimator",
    "icpe_mean",
    "icpe_stderr",
    "coef_mse_mean",
    "coef_mse_stderr",
    "diverged",
    "sims",
)
CONVERGENCE_COLUMNS = ("t", "dist_beta", "dist_theta", "lambda_pow")


# Configuration -------------------------------------------------------------


def parse_rates(rates) -> str | tuple[float, float]:
    """``"safe"``, ``"optimal"``, ``"a=..,e=.."`` or an ``(alpha, eta)`` pair."""
    if isinstance(rates, (tuple, list)):
        if len(rates) != 2:
            raise ValueError("explicit rates need exactly (alpha, eta)")
        alpha, eta = float(rates[0]), float(rates[1])
        LearningRates(alpha, eta)
        return (alpha, eta)
    if rates in ("safe", "optimal"):
        return rates
    match = re.fullmatch(r"\s*a\s*=\s*([^,]+?)\s*,\s*e\s*=\s*([^,]+?)\s*", str(rates))
    if not match:
        raise ValueError(f"rates must be safe, optimal or a=<alpha>,e=<eta>; got {rates!r}")
    return parse_rates((float(match.group(1)), float(match.group(2))))


def resolve_rates(data: Dataset, rates) -> LearningRates:
    rates = parse_rates(rates)
    if isinstance(rates, tuple):
        return LearningRates(*rates)
    return choose_rates(data, rates)


def parse_loops(value) -> int | str:
    if value == "auto":
        return "auto"
    loops = int(value)
    if loops < 1:
        raise ValueError("loops must be at least 1")
    return loops


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything that determines a sweep's output.

    ``grid`` holds sample sizes for scenarios swept over n and scale factors
    r for the others (see ``SWEEP_KIND``); ``None`` selects the scenario
    default. ``n`` is the sample size used by r-sweeps. ``loops`` is an
    integer or ``"auto"`` (enough loops for ``Lambda^L <= 1e-13``, capped).
    ``lam`` and ``tau`` feed the ridge estimators and, when nonzero, switch
    the constructed transformer to the ridge block.
    """

    scenario: str = "standard"
    grid: tuple | None = None
    n: int = 50
    p: int = 5
    q: int = 10
    sims: int = DEFAULT_SIMS
    seed: int = 0
    rates: str | tuple = "safe"
    loops: int | str = DEFAULT_LOOPS
    delta: float = 5.0
    estimators: tuple = ("ols", "2sls", "tf")
    lam: float = 0.0
    tau: float = 0.0
    heavy: bool = False
    q_eff: int = 3
    hidden: int = 16
    stddev: bool = False
    workers: int = 1
    out: str | None = None
    svg: str | None = None

    def __post_init__(self):
        if self.scenario not in SWEEP_KIND:
            raise ValueError(f"unknown scenario {self.scenario!r}; choose from {sorted(SWEEP_KIND)}")
        if self.sims < 1:
            raise ValueError("sims must be at least 1")
        if self.delta == 0:
            raise ValueError("delta must be nonzero")
        if self.p < 1 or self.q < 1 or self.n < 1:
            raise ValueError("n, p and q must be positive")
        if self.workers < 1:
            raise ValueError("workers must be at least 1")
        if self.lam < 0 or self.tau < 0:
            raise ValueError("lam and tau must be nonnegative")
        object.__setattr__(self, "rates", parse_rates(self.rates))
        object.__setattr__(self, "loops", parse_loops(self.loops))
        ests = tuple(self.estimators)
        unknown = [e for e in ests if e not in ESTIMATORS]
        if unknown or not ests:
            raise ValueError(f"unknown or empty estimator list {ests}; choose from {ESTIMATORS}")
        object.__setattr__(self, "estimators", ests)
        if self.grid is not None:
            grid = tuple(self.grid)
            if not grid:
                raise ValueError("sweep grid must be nonempty")
            if self.sweep_kind == "n":
                if any(int(v) != v or v < 1 for v in grid):
                    raise ValueError("sample-size grid must hold positive integers")
                grid = tuple(int(v) for v in grid)
            else:
                grid = tuple(float(v) for v in grid)
            object.__setattr__(self, "grid", grid)
        for value in self.resolved_grid:
            self.variant(value)  # validates factors and variant parameters

    @property
    def sweep_kind(self) -> str:
        return SWEEP_KIND[self.scenario]

    @property
    def resolved_grid(self) -> tuple:
        if self.grid is not None:
            return self.grid
        if self.sweep_kind == "n":
            return DEFAULT_N_GRID
        if self.scenario == "endogeneity":
            return DEFAULT_ENDOGENEITY_GRID
        return DEFAULT_IV_GRID

    def sample_size(self, value) -> int:
        return int(value) if self.sweep_kind == "n" else self.n

    def variant(self, value):
        """Scenario variant at one sweep point."""
        s = self.scenario
        if s == "standard":
            return Standard()
        if s == "iv-strength":
            return IvStrength(float(value))
        if s == "quadratic":
            return QuadraticIv()
        if s == "underid":
            IvStrength(float(value))  # same range check as the IV-strength factor
            if self.q_eff >= self.q:
                raise ValueError(f"q_eff={self.q_eff} must be smaller than q={self.q}")
            return UnderIdentified(self.q_eff)
        if s == "multicollinearity":
            return Multicollinearity.heavy() if self.heavy else Multicollinearity()
        if s == "nonlinear":
            return NonlinearMlp(self.hidden)
        return EndogeneityStrength(float(value))

    def task_at(self, task: TaskParams, value) -> TaskParams:
        # Under-identified sweeps scale Theta by r on top of dropping instruments.
        if self.scenario == "underid":
            return replace(task, theta=float(value) * task.theta)
        return task

    @property
    def note(self) -> str:
        if self.scenario == "underid" and self.q_eff < self.p:
            return NON_IDENTIFIED
        return ""

    def to_dict(self) -> dict:
        d = asdict(self)
        d["grid"] = list(self.resolved_grid) if self.grid is not None else None
        d["estimators"] = list(self.estimators)
        if isinstance(self.rates, tuple):
            d["rates"] = list(self.rates)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        d = dict(d)
        for key in ("grid", "estimators", "rates"):
            if isinstance(d.get(key), list):
                d[key] = tuple(d[key])
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        return cls.from_dict(load_config_json(path))

    def with_overrides(self, **overrides) -> "ExperimentConfig":
        """Replace the fields whose override is not ``None``."""
        d = self.to_dict()
        d.update({k: v for k, v in overrides.items() if v is not None})
        return type(self).from_dict(d)


def load_config_json(path) -> dict:
    """Raw config fields from a JSON object, keys checked but not defaulted."""
    with open(path, encoding="utf-8") as fh:
        d = json.load(fh)
    if not isinstance(d, dict):
        raise ValueError("config file must hold a JSON object")
    unknown = set(d) - {f.name for f in fields(ExperimentConfig)}
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    return d


@dataclass(frozen=True)
class MetricRecord:
    scenario: str
    sweep_value: float
    estimator: str
    icpe_mean: float
    icpe_stderr: float
    coef_mse_mean: float
    coef_mse_stderr: float
    diverged: int
    sims: int
    icpe_stddev: float = 0.0
    coef_mse_stddev: float = 0.0
    iv_corr: float = math.nan
    note: str = ""

    def __post_init__(self):
        if self.sims > 0:
            for name in ("icpe_mean", "icpe_stderr", "coef_mse_mean", "coef_mse_stderr"):
                v = getattr(self, name)
                if not (math.isfinite(v) and v >= 0):
                    raise ValueError(f"{name}={v} must be finite and nonnegative")


# Simulation ----------------------------------------------------------------


def sim_task(cfg: ExperimentConfig, sim: int) -> TaskParams:
    return sample_task(cfg.p, cfg.q, RngStream(cfg.seed, sim))


def sim_prompt(cfg: ExperimentConfig, sim: int, point: int) -> tuple[TaskParams, Dataset]:
    """Task and prompt of simulation ``sim`` at sweep point index ``point``."""
    value = cfg.resolved_grid[point]
    task = cfg.task_at(sim_task(cfg, sim), value)
    gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence([cfg.seed, sim, point + 1])))
    data, _ = generate_prompt(task, cfg.sample_size(value), gen, ClipBounds(), cfg.variant(value))
    return task, data


def _closed_form(name: str, data: Dataset, lam: float, tau: float) -> EstimatorOutput:
    if name == "ols":
        return ols(data)
    if name == "2sls":
        return two_sls(data)
    if name == "ridge-2sls":
        return ridge_two_sls(data, lam, tau)
    if name == "ridge-ols":
        return ridge_ols(data, lam)
    raise ValueError(f"{name!r} is not a closed-form estimator")


def loops_for(cfg: ExperimentConfig, data: Dataset, rates: LearningRates) -> int:
    if cfg.loops != "auto":
        return int(cfg.loops)
    rate = contraction_factors(data, rates, cfg.lam, cfg.tau).rate
    if not rate < 1.0:
        return AUTO_MAX_LOOPS
    return min(loops_for_tolerance(rate, AUTO_TOL), AUTO_MAX_LOOPS)


def constructed_tf_batch(
    datasets: Sequence[Dataset],
    loops: Sequence[int] | int,
    rates: Sequence[LearningRates],
    delta: float,
    lam: float = 0.0,
    tau: float = 0.0,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Constructed-transformer predictions and finite-difference coefficients for a batch.

    All datasets must share n, p and q. Each prompt is run once as is and
    once per regressor with its query ``x`` shifted by ``delta``; the p + 1
    probes of every dataset and all datasets go through one stacked forward
    pass. Returns ``(y_hat (B,), beta_hat (B, p), diverged (B,) bool)``; rows
    of diverged sims hold NaN.
    """
    b = len(datasets)
    p, q = datasets[0].p, datasets[0].q
    lay = Layout(p, q)
    if isinstance(loops, (int, np.integer)):
        loops = [int(loops)] * b
    y_hat = np.full(b, np.nan)
    beta_hat = np.full((b, p), np.nan)
    diverged = np.zeros(b, dtype=bool)
    models, hs, keep = [], [], []
    for i, data in enumerate(datasets):
        try:
            model = build_looped_model(data, loops[i], rates[i], lam, tau, x_query_slack=delta)
        except DivergenceError:
            diverged[i] = True
            continue
        base = embed(data).h
        probes = np.repeat(base[None], p + 1, axis=0)
        for k in range(p):
            # x_query enters the embedding only through its own rows.
            probes[k + 1, lay.x(k), -1] += delta
        models.append(model)
        hs.append(probes)
        keep.append(i)
    if models:
        out, bad = looped_forward_stack(models, np.stack(hs))
        values = out[:, :, lay.y, -1]
        for j, i in enumerate(keep):
            if bad[j] or not np.all(np.isfinite(values[j])):
                diverged[i] = True
                continue
            y_hat[i] = values[j, 0]
            beta_hat[i] = (values[j, 1:] - values[j, 0]) / delta
    return y_hat, beta_hat, diverged


@dataclass
class PointSamples:
    """Per-sim metrics at one sweep point, indexed by sim."""

    icpe: dict[str, np.ndarray]
    coef: dict[str, np.ndarray]
    diverged: dict[str, np.ndarray]
    iv_corr: np.ndarray


@dataclass
class SweepSamples:
    cfg: ExperimentConfig
    points: list[PointSamples] = field(default_factory=list)


def _run_unit(cfg: ExperimentConfig, point: int, start: int, stop: int) -> PointSamples:
    """Metrics for sims ``start..stop-1`` at one sweep point."""
    count = stop - start
    icpe = {e: np.zeros(count) for e in cfg.estimators}
    coef = {e: np.zeros(count) for e in cfg.estimators}
    div = {e: np.zeros(count, dtype=bool) for e in cfg.estimators}
    iv_corr = np.full(count, np.nan)
    prompts = [sim_prompt(cfg, s, point) for s in range(start, stop)]
    for j, (task, data) in enumerate(prompts):
        if cfg.sweep_kind == "r" and cfg.scenario != "endogeneity":
            iv_corr[j] = empirical_iv_strength(data)
        for name in cfg.estimators:
            if name == "tf":
                continue
            beta_hat = _closed_form(name, data, cfg.lam, cfg.tau).beta_hat
            icpe[name][j] = (float(beta_hat @ data.x_query) - data.y_query) ** 2
            coef[name][j] = float(np.sum((beta_hat - task.beta) ** 2))
    if "tf" in cfg.estimators:
        datasets = [d for _, d in prompts]
        rates = [resolve_rates(d, cfg.rates) for d in datasets]
        loops = [loops_for(cfg, d, r) for d, r in zip(datasets, rates)]
        y_hat, beta_hat, bad = constructed_tf_batch(datasets, loops, rates, cfg.delta, cfg.lam, cfg.tau)
        for j, (task, data) in enumerate(prompts):
            div["tf"][j] = bad[j]
            if not bad[j]:
                icpe["tf"][j] = (y_hat[j] - data.y_query) ** 2
                coef["tf"][j] = float(np.sum((beta_hat[j] - task.beta) ** 2))
    return PointSamples(icpe, coef, div, iv_corr)


def _units(cfg: ExperimentConfig) -> list[tuple[int, int, int]]:
    return [
        (k, start, min(start + CHUNK, cfg.sims))
        for k in range(len(cfg.resolved_grid))
        for start in range(0, cfg.sims, CHUNK)
    ]


def _run_unit_args(args) -> PointSamples:
    return _run_unit(*args)


def simulate(cfg: ExperimentConfig) -> SweepSamples:
    """Per-sim metrics for every sweep point; see :func:`run_experiment`."""
    units = _units(cfg)
    jobs = [(cfg, k, a, b) for k, a, b in units]
    if cfg.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            results = list(pool.map(_run_unit_args, jobs))
    else:
        results = [_run_unit_args(j) for j in jobs]
    by_key = {u: r for u, r in zip(units, results)}
    out = SweepSamples(cfg)
    for k in range(len(cfg.resolved_grid)):
        parts = [by_key[u] for u in units if u[0] == k]  # sim order
        out.points.append(
            PointSamples(
                icpe={e: np.concatenate([r.icpe[e] for r in parts]) for e in cfg.estimators},
                coef={e: np.concatenate([r.coef[e] for r in parts]) for e in cfg.estimators},
                diverged={e: np.concatenate([r.diverged[e] for r in parts]) for e in cfg.estimators},
                iv_corr=np.concatenate([r.iv_corr for r in parts]),
            )
        )
    return out


def _mean_stderr_std(values: np.ndarray) -> tuple[float, float, float]:
    m = len(values)
    if m == 0:
        return math.nan, math.nan, math.nan
    mean = float(np.mean(values))
    if m < 2:
        return mean, 0.0, 0.0
    std = float(np.std(values, ddof=1))
    return mean, std / math.sqrt(m), std


def summarize(samples: SweepSamples) -> list[MetricRecord]:
    """Fold per-sim metrics into one record per sweep point and estimator.

    Diverged sims are excluded from the means and counted in ``diverged``;
    ``sims`` is the number of sims that contributed.
    """
    cfg = samples.cfg
    records = []
    for value, pt in zip(cfg.resolved_grid, samples.points):
        iv = float(np.mean(pt.iv_corr)) if np.all(np.isfinite(pt.iv_corr)) else math.nan
        for name in cfg.estimators:
            ok = ~pt.diverged[name]
            i_mean, i_se, i_sd = _mean_stderr_std(pt.icpe[name][ok])
            c_mean, c_se, c_sd = _mean_stderr_std(pt.coef[name][ok])
            records.append(
                MetricRecord(
                    scenario=cfg.scenario,
                    sweep_value=value,
                    estimator=name,
                    icpe_mean=i_mean,
                    icpe_stderr=i_se,
                    coef_mse_mean=c_mean,
                    coef_mse_stderr=c_se,
                    diverged=int(np.sum(~ok)),
                    sims=int(np.sum(ok)),
                    icpe_stddev=i_sd,
                    coef_mse_stddev=c_sd,
                    iv_corr=iv,
                    note=cfg.note,
                )
            )
    return records


def run_experiment(cfg: ExperimentConfig) -> list[MetricRecord]:
    """Run a sweep and aggregate it.

    Per sim: ICPE = (y_hat - y_query)^2 and coefficient MSE =
    ||beta_hat - beta||^2, with closed-form beta_hat for the baselines and
    finite-difference extraction for the constructed transformer. Records
    come in grid order, estimators in configuration order.
    """
    return summarize(simulate(cfg))


def paired_difference(
    samples: SweepSamples, point: int, first: str, second: str, metric: str = "icpe"
) -> tuple[float, float]:
    """Mean and standard error of the per-sim difference ``first - second``
    over sims where neither estimator diverged."""
    pt = samples.points[point]
    values = pt.icpe if metric == "icpe" else pt.coef
    ok = ~(pt.diverged[first] | pt.diverged[second])
    mean, se, _ = _mean_stderr_std(values[first][ok] - values[second][ok])
    return mean, se


# Empirical ICL loss -------------------------------------------------------


def closed_form_predictor(estimator: Callable[[Dataset], EstimatorOutput]) -> Callable[[Dataset], float]:
    """Wrap an estimator as ``Dataset -> beta_hat' x_query``."""

    def predict(data: Dataset) -> float:
        return estimator(data).predict(data.x_query)

    return predict


def icl_loss_empirical(predictor, prompts: Sequence[Dataset]) -> float:
    """(1/N) sum_k (y_query_k - predictor(prompt_k))^2."""
    if len(prompts) < 1:
        raise ValueError("need at least one prompt")
    if hasattr(predictor, "predict_batch"):
        preds = np.asarray(predictor.predict_batch(prompts), dtype=float)
    else:
        preds = np.array([predictor(d) for d in prompts], dtype=float)
    targets = np.array([d.y_query for d in prompts])
    return float(np.mean((targets - preds) ** 2))


# Convergence ---------------------------------------------------------------


@dataclass(frozen=True)
class ConvergenceReport:
    """Distances of the GD iterates to the closed form, per step.

    ``rows`` holds ``(t, dist_beta, dist_theta, lambda_pow)`` with
    ``lambda_pow = Lambda^t``. When the iteration diverges, the last row is
    ``(t_div, inf, inf, Lambda^t_div)`` and ``diverged_at = t_div``.
    """

    rows: tuple[tuple[int, float, float, float], ...]
    rate: float
    diverged_at: int | None

    @property
    def diverged(self) -> bool:
        return self.diverged_at is not None


def convergence_report(
    data: Dataset,
    rates: LearningRates,
    steps: int,
    init: GDState | None = None,
    lam: float = 0.0,
    tau: float = 0.0,
) -> ConvergenceReport:
    rate = contraction_factors(data, rates, lam, tau).rate
    diverged_at = None
    try:
        traj = run_gd(data, rates, steps, init, lam, tau)
    except DivergenceError as err:
        traj, diverged_at = err.trajectory, err.t
    rows = [(t, db, dt, rate**t) for t, (db, dt) in enumerate(zip(traj.dist_beta, traj.dist_theta))]
    if diverged_at is not None:
        rows.append((diverged_at, math.inf, math.inf, rate**diverged_at))
    return ConvergenceReport(tuple(rows), rate, diverged_at)


# CSV and SVG output --------------------------------------------------------


def fmt(v) -> str:
    """Locale-free, round-trippable text for a CSV cell."""
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _sweep_extra_columns(records: Sequence[MetricRecord], stddev: bool) -> list[str]:
    extra = ["icpe_stddev", "coef_mse_stddev"] if stddev else []
    if records and records[0].scenario in ("iv-strength", "underid"):
        extra.append("iv_corr")
    if any(r.note for r in records):
        extra.append("note")
    return extra


def sweep_csv_text(records: Sequence[MetricRecord], stddev: bool = False) -> str:
    columns = list(SWEEP_COLUMNS) + _sweep_extra_columns(records, stddev)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in records:
        w.writerow([fmt(getattr(r, c)) for c in columns])
    return buf.getvalue()


def write_sweep_csv(records: Sequence[MetricRecord], path, stddev: bool = False) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(sweep_csv_text(records, stddev))


def read_sweep_csv(path) -> list[dict]:
    with open(path, encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh))


def convergence_csv_text(report: ConvergenceReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CONVERGENCE_COLUMNS)
    for row in report.rows:
        w.writerow([fmt(v) for v in row])
    return buf.getvalue()


def write_convergence_csv(report: ConvergenceReport, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(convergence_csv_text(report))


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "ivtf"
    return plt


def _save_svg(fig, path) -> None:
    fig.savefig(path, format="svg", metadata={"Date": None})


def plot_sweep_svg(csv_path, svg_path, log_y: bool = True) -> None:
    """ICPE and coefficient MSE against the sweep value, one line per estimator."""
    rows = read_sweep_csv(csv_path)
    plt = _pyplot()
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.5))
    estimators = list(dict.fromkeys(r["estimator"] for r in rows))
    for ax, metric, label in ((axes[0], "icpe", "ICPE"), (axes[1], "coef_mse", "coefficient MSE")):
        for est in estimators:
            sel = [r for r in rows if r["estimator"] == est]
            xs = [float(r["sweep_value"]) for r in sel]
            ys = [float(r[f"{metric}_mean"]) for r in sel]
            es = [float(r[f"{metric}_stderr"]) for r in sel]
            ax.errorbar(xs, ys, yerr=es, marker="o", capsize=3, label=est)
        ax.set_ylabel(label)
        ax.set_xlabel("sweep value")
        if log_y:
            ax.set_yscale("log")
    axes[0].legend()
    if rows:
        fig.suptitle(rows[0]["scenario"])
    fig.tight_layout()
    _save_svg(fig, svg_path)
    plt.close(fig)


def plot_convergence_svg(csv_path, svg_path) -> None:
    """Log-scale distances of the GD iterates, with the Lambda^t envelope."""
    with open(csv_path, encoding="utf-8", newline="") as fh:
        rows = [r for r in csv.DictReader(fh) if math.isfinite(float(r["dist_beta"]))]
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5, 3.5))
    t = [int(r["t"]) for r in rows]
    for col, label in (("dist_beta", "beta"), ("dist_theta", "Theta"), ("lambda_pow", "Lambda^t")):
        ax.plot(t, [max(float(r[col]), 1e-300) for r in rows], label=label)
    ax.set_yscale("log")
    ax.set_xlabel("t")
    ax.set_ylabel("distance to closed form")
    ax.legend()
    fig.tight_layout()
    _save_svg(fig, svg_path)
    plt.close(fig)


# CSV data ingestion --------------------------------------------------------


class CsvFormatError(ValueError):
    """A malformed input file; ``row`` is the 1-based file line, ``column`` a name or None."""

    def __init__(self, message: str, row: int, column: str | None = None):
        where = f"row {row}" + (f", column {column!r}" if column is not None else "")
        super().__init__(f"{where}: {message}")
        self.row = row
        self.column = column


_Z_NAME = re.compile(r"z\d+")
_X_NAME = re.compile(r"x\d+")


def _default_columns(header: Sequence[str]) -> tuple[list[str], list[str], str]:
    z = [c for c in header if _Z_NAME.fullmatch(c)]
    x = [c for c in header if _X_NAME.fullmatch(c)]
    return z, x, "y"


def ingest_csv(
    path,
    z_columns: Sequence[str] | None = None,
    x_columns: Sequence[str] | None = None,
    y_column: str | None = None,
    query_row: int = -1,
) -> Dataset:
    """Read named instrument, regressor and outcome columns.

    Columns are selected by header name in the given order, independent of
    their order in the file; by default every ``z<k>`` and ``x<k>`` column in
    file order and ``y``. ``query_row`` is a 0-based data-row index
    (negative counts from the end) of the row held out as the query; the
    remaining rows are the training samples.
    """
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise CsvFormatError("file is empty", 1) from None
        body = [(i + 2, rec) for i, rec in enumerate(reader) if rec and any(c.strip() for c in rec)]
    if len(set(header)) != len(header):
        raise CsvFormatError("duplicate column names", 1)
    dz, dx, dy = _default_columns(header)
    z_columns = list(z_columns) if z_columns else dz
    x_columns = list(x_columns) if x_columns else dx
    y_column = y_column or dy
    if not z_columns or not x_columns:
        raise CsvFormatError("no instrument or regressor columns selected", 1)
    index = {name: j for j, name in enumerate(header)}
    for name in [*z_columns, *x_columns, y_column]:
        if name not in index:
            raise CsvFormatError("missing column", 1, name)
    if len(body) < 2:
        raise CsvFormatError("need at least two data rows", len(body) + 1)
    values = np.empty((len(body), len(header)))
    for r, (line, rec) in enumerate(body):
        if len(rec) != len(header):
            raise CsvFormatError(f"expected {len(header)} cells, found {len(rec)}", line)
        for j, cell in enumerate(rec):
            try:
                v = float(cell)
            except ValueError:
                raise CsvFormatError(f"non-numeric cell {cell!r}", line, header[j]) from None
            if not math.isfinite(v):
                raise CsvFormatError(f"non-finite cell {cell!r}", line, header[j])
            values[r, j] = v
    rows = len(body)
    if not -rows <= query_row < rows:
        raise ValueError(f"query row {query_row} outside 0..{rows - 1}")
    qi = query_row % rows
    train = np.array([i for i in range(rows) if i != qi])
    zc = [index[c] for c in z_columns]
    xc = [index[c] for c in x_columns]
    yc = index[y_column]
    return Dataset(
        z=values[np.ix_(train, zc)],
        x=values[np.ix_(train, xc)],
        y=values[train, yc],
        z_query=values[qi, zc],
        x_query=values[qi, xc],
        y_query=float(values[qi, yc]),
    )


def export_csv(data: Dataset, path) -> None:
    """Write ``z0..,x0..,y`` with the training rows first and the query last."""
    header = [f"z{l}" for l in range(data.q)] + [f"x{k}" for k in range(data.p)] + ["y"]
    z = np.vstack([data.z, data.z_query])
    x = np.vstack([data.x, data.x_query])
    y = np.append(data.y, data.y_query)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(data.n + 1):
            w.writerow([fmt(v) for v in (*z[i], *x[i], y[i])])


# Error-bound check -------------------------------------------------------


def clipped_2sls_mse(
    p: int,
    q: int,
    n: int,
    sims: int,
    seed: int,
    b_beta: float = math.inf,
    bounds: ClipBounds = ClipBounds(),
    task: TaskParams | None = None,
) -> tuple[float, float]:
    """Monte Carlo mean and standard error of ||clip(beta_2sls) - beta||^2
    on the standard scenario. Each sim draws from stream (seed, sim): a fresh
    task and its prompt, or only a prompt when ``task`` is fixed."""
    errs = np.empty(sims)
    for s in range(sims):
        gen = RngStream(seed, s).generator()
        t = task if task is not None else sample_task(p, q, gen)
        data, _ = generate_prompt(t, n, gen, bounds)
        errs[s] = float(np.sum((clip(two_sls(data).beta_hat, b_beta) - t.beta) ** 2))
    mean, se, _ = _mean_stderr_std(errs)
    return mean, se


__all__ = [
    "ESTIMATORS",
    "SWEEP_KIND",
    "SWEEP_COLUMNS",
    "CONVERGENCE_COLUMNS",
    "ExperimentConfig",
    "MetricRecord",
    "PointSamples",
    "SweepSamples",
    "ConvergenceReport",
    "CsvFormatError",
    "parse_rates",
    "resolve_rates",
    "parse_loops",
    "load_config_json",
    "sim_task",
    "sim_prompt",
    "loops_for",
    "constructed_tf_batch",
    "simulate",
    "summarize",
    "run_experiment",
    "paired_difference",
    "closed_form_predictor",
    "icl_loss_empirical",
    "convergence_report",
    "sweep_csv_text",
    "write_sweep_csv",
    "read_sweep_csv",
    "convergence_csv_text",
    "write_convergence_csv",
    "plot_sweep_svg",
    "plot_convergence_svg",
    "ingest_csv",
    "export_csv",
    "clipped_2sls_mse",
]
