"""Monte Carlo study driver: K replications of generate -> estimate over a
scenario grid, aggregated into bias, MSE and 95% coverage per
(scenario, model, estimand type)."""

import json
import time
from dataclasses import asdict, dataclass, field
from typing import Optional, Tuple

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from threadpoolctl import threadpool_limits

from dgp import ScenarioSpec, table1_scenarios, table2_scenarios
from drdtd import DEFAULT_MAX_WEIGHT_SHARE, MIN_BOOTSTRAP_B, dr_asu, dr_att, dr_td
from errors import ConfigError, EstimationError, StudyQualityError
from logging_config import setup_logging
from paneldata import split_windows, to_two_period
from rng import derive_seed
from tdiff import dtd_threeway_fe, dtd_two_period, td_threeway_fe, td_two_period

logger = setup_logging("mcharness")

MODELS = ("TD_3FE", "DTD_3FE", "DTD_3FE_EXT", "TD_2P", "DTD_2P", "DR_TD", "DR_DTD")
MAX_FAILURE_SHARE = 0.05
REPORT_COLUMNS = ["scenario", "model", "type", "bias", "mse", "coverage", "k", "bias_mcse"]
RAW_COLUMNS = ["iteration", "scenario", "model", "type", "point", "se"]
CONFIG_KEYS = {
    "K", "master_seed", "threads", "bootstrap_b", "models", "grid",
    "preset", "shares", "sizes", "n_units", "max_weight_share",
}


@dataclass(frozen=True)
class StudyConfig:
    grid: Tuple[ScenarioSpec, ...]
    models: Tuple[str, ...] = ("TD_3FE", "DTD_3FE")
    K: int = 1000
    master_seed: int = 0
    threads: int = 1
    bootstrap_b: int = 200
    max_weight_share: float = DEFAULT_MAX_WEIGHT_SHARE

    def __post_init__(self):
        object.__setattr__(self, "grid", tuple(self.grid))
        object.__setattr__(self, "models", tuple(self.models))
        if self.K < 2:
            raise ConfigError(f"K must be at least 2, got {self.K}")
        if not self.grid:
            raise ConfigError("scenario grid is empty")
        if not self.models:
            raise ConfigError("no models requested")
        unknown = [m for m in self.models if m not in MODELS]
        if unknown:
            raise ConfigError(f"unknown models: {', '.join(unknown)}; expected {', '.join(MODELS)}")
        if self.threads < 0:
            raise ConfigError("threads must be >= 0 (0 means all cores)")
        if self.bootstrap_b and self.bootstrap_b < MIN_BOOTSTRAP_B:
            raise ConfigError(f"bootstrap_b must be 0 or >= {MIN_BOOTSTRAP_B}")
        ids = [spec.id for spec in self.grid]
        if len(set(ids)) != len(ids):
            raise ConfigError("scenario ids must be unique")
        for spec in self.grid:
            if spec.design != "sim2" and any(m.startswith("DR_") for m in self.models):
                raise ConfigError(f"doubly-robust models need covariates; grid entry {spec.id} is {spec.design}")

    @property
    def n_jobs(self):
        return -1 if self.threads == 0 else self.threads

    def to_dict(self):
        return {
            "K": self.K,
            "master_seed": self.master_seed,
            "threads": self.threads,
            "bootstrap_b": self.bootstrap_b,
            "max_weight_share": self.max_weight_share,
            "models": list(self.models),
            "grid": [spec.to_dict() for spec in self.grid],
        }

    @classmethod
    def from_dict(cls, payload):
        unknown = sorted(set(payload) - CONFIG_KEYS)
        if unknown:
            raise ConfigError(f"unknown study config keys: {', '.join(unknown)}")
        if "grid" in payload and "preset" in payload:
            raise ConfigError("give either grid or preset, not both")
        if "grid" in payload:
            grid = [ScenarioSpec.from_dict(entry) for entry in payload["grid"]]
        elif payload.get("preset") == "table1":
            grid = table1_scenarios(
                shares=tuple(payload.get("shares", (0.10, 0.50))),
                n_units=payload.get("n_units", 2000),
            )
        elif payload.get("preset") == "table2":
            grid = table2_scenarios(sizes=tuple(payload.get("sizes", (2000, 5000, 10000))))
        else:
            raise ConfigError("study config needs a grid or a preset (table1, table2)")
        try:
            return cls(
                grid=grid,
                models=tuple(payload.get("models", ("TD_3FE", "DTD_3FE"))),
                K=int(payload.get("K", 1000)),
                master_seed=int(payload.get("master_seed", 0)),
                threads=int(payload.get("threads", 1)),
                bootstrap_b=int(payload.get("bootstrap_b", 200)),
                max_weight_share=float(payload.get("max_weight_share", DEFAULT_MAX_WEIGHT_SHARE)),
            )
        except (TypeError, ValueError) as e:
            if isinstance(e, ConfigError):
                raise
            raise ConfigError(f"invalid study config: {str(e)}")


def load_study_config(path):
    try:
        with open(path, "r", encoding="utf-8") as f:
            payload = json.load(f)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {path} is not valid JSON: {str(e)}")
    if not isinstance(payload, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    return StudyConfig.from_dict(payload)


def save_study_config(cfg, path):
    with open(path, "w", encoding="utf-8") as f:
        json.dump(cfg.to_dict(), f, indent=2)


@dataclass(frozen=True)
class MetricRow:
    scenario: str
    model: str
    type: str
    bias: float
    mse: float
    coverage: float
    k: int
    bias_mcse: float = float("nan")


@dataclass(frozen=True, eq=False)
class StudyReport:
    rows: Tuple[MetricRow, ...]
    config: dict
    wall_time: float = 0.0
    raw: Optional[pd.DataFrame] = field(default=None, repr=False)

    def to_frame(self):
        return pd.DataFrame([asdict(r) for r in self.rows], columns=REPORT_COLUMNS)

    def row(self, scenario, model, type_):
        for r in self.rows:
            if (r.scenario, r.model, r.type) == (scenario, model, type_):
                return r
        raise KeyError((scenario, model, type_))


def summarize(estimates, truth):
    """Bias, MSE and share of |est - truth| <= 1.96 * se over (point, se) pairs

    Pairs without a standard error (NaN, e.g. bootstrap switched off) count
    toward bias and MSE only; coverage is NaN when no pair has one.
    """
    if len(estimates) == 0:
        raise EstimationError("no estimates to summarize")
    values = np.asarray(estimates, dtype=float).reshape(-1, 2)
    err = values[:, 0] - truth
    se = values[:, 1]
    if np.any(se < 0):
        raise EstimationError("standard errors must be non-negative")
    bias = float(np.mean(err))
    mse = float(np.mean(err ** 2))
    has_se = np.isfinite(se)
    if has_se.any():
        coverage = float(np.mean(np.abs(err[has_se]) <= 1.96 * se[has_se]))
    else:
        coverage = float("nan")
    return bias, mse, coverage


def _two_period(spec, data):
    if len(data.time_values) == 2:
        return data
    pre, post = split_windows(data.time_values, spec.config.treat_from)
    return to_two_period(data, pre, post)


def _post_from(spec):
    return spec.config.treat_from if spec.design == "sim1" else 1


def _fit_model(model, spec, data, seed, bootstrap_b, max_weight_share):
    """[(type, point, se), ...] for one model, or one DR_DTD estimand, on one panel"""
    if model == "TD_3FE":
        delta = td_threeway_fe(data, _post_from(spec))
        return [("ATT", delta.point, delta.se)]
    if model in ("DTD_3FE", "DTD_3FE_EXT"):
        delta, psi = dtd_threeway_fe(
            data, _post_from(spec), with_year_by_interference=model == "DTD_3FE_EXT"
        )
        return [("ATT", delta.point, delta.se), ("spillover", psi.point, psi.se)]
    if model in ("TD_2P", "DTD_2P"):
        fn = td_two_period if model == "TD_2P" else dtd_two_period
        delta, psi = fn(_two_period(spec, data))
        return [("ATT", delta.point, delta.se), ("spillover", psi.point, psi.se)]
    options = {"bootstrap_b": bootstrap_b, "seed": seed, "max_weight_share": max_weight_share}
    if model == "DR_TD":
        est = dr_td(data, **options)
        return [("ATT", est.point, est.se)]
    if model == "DR_DTD:ATT":
        est = dr_att(data, **options)
        return [("ATT", est.point, est.se)]
    est = dr_asu(data, **options)
    return [("spillover", est.point, est.se)]


def _model_types(model):
    return ("ATT",) if model in ("TD_3FE", "DR_TD") else ("ATT", "spillover")


def _model_parts(model):
    """(part, types) pairs fitted and failed as one; DR_DTD splits by estimand"""
    if model == "DR_DTD":
        return (("DR_DTD:ATT", ("ATT",)), ("DR_DTD:spillover", ("spillover",)))
    return ((model, _model_types(model)),)


def _run_iteration(spec, k, seed, models, bootstrap_b, max_weight_share):
    records = []
    with threadpool_limits(limits=1):
        panel = spec.generate(seed)
        for model in models:
            for part, types in _model_parts(model):
                try:
                    for type_, point, se in _fit_model(part, spec, panel.data, seed, bootstrap_b, max_weight_share):
                        records.append((k, spec.id, model, type_, point, se))
                except EstimationError as e:
                    logger.warning(f"{spec.id} iteration {k}: {part} failed: {str(e)}")
                    for type_ in types:
                        records.append((k, spec.id, model, type_, np.nan, np.nan))
    return panel.truth, records


def run_study(cfg, raw=False):
    """Run every grid point K times and summarize each (scenario, model, type)"""
    started = time.perf_counter()
    logger.info(
        f"Study: {len(cfg.grid)} scenarios x {cfg.K} iterations, models {', '.join(cfg.models)}"
    )
    rows = []
    raw_records = []
    for g, spec in enumerate(cfg.grid):
        results = Parallel(n_jobs=cfg.n_jobs)(
            delayed(_run_iteration)(
                spec, k, derive_seed(cfg.master_seed, "study", g, k), cfg.models,
                cfg.bootstrap_b, cfg.max_weight_share,
            )
            for k in range(cfg.K)
        )
        truth = results[0][0]
        records = pd.DataFrame([r for _, recs in results for r in recs], columns=RAW_COLUMNS)
        raw_records.append(records)

        for model in cfg.models:
            for type_ in _model_types(model):
                cell = records[(records["model"] == model) & (records["type"] == type_)]
                ok = cell.dropna(subset=["point"])
                n_failed = len(cell) - len(ok)
                cell_id = f"{spec.id}/{model}/{type_}"
                if n_failed > MAX_FAILURE_SHARE * cfg.K or ok.empty:
                    raise StudyQualityError(
                        f"{n_failed} of {cfg.K} iterations failed in {cell_id}", cell=cell_id
                    )
                target = truth.delta if type_ == "ATT" else truth.psi1
                pairs = ok[["point", "se"]].to_numpy()
                bias, mse, coverage = summarize(pairs, target)
                mcse = float(np.std(pairs[:, 0], ddof=1) / np.sqrt(len(ok))) if len(ok) > 1 else float("nan")
                rows.append(MetricRow(spec.id, model, type_, bias, mse, coverage, len(ok), mcse))
        logger.info(f"Finished scenario {spec.id} ({g + 1}/{len(cfg.grid)})")

    wall_time = time.perf_counter() - started
    logger.info(f"Study finished in {wall_time:.1f}s with {len(rows)} metric rows")
    return StudyReport(
        rows=tuple(rows),
        config=cfg.to_dict(),
        wall_time=wall_time,
        raw=pd.concat(raw_records, ignore_index=True) if raw else None,
    )


def write_report_csv(report, path):
    report.to_frame().to_csv(path, index=False, encoding="utf-8")
    logger.info(f"Wrote {len(report.rows)} metric rows to {path}")


def write_report_json(report, path):
    payload = {
        "config": report.config,
        "wall_time": report.wall_time,
        "rows": [asdict(r) for r in report.rows],
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2)
    logger.info(f"Wrote {len(report.rows)} metric rows to {path}")


def write_raw_csv(report, path):
    if report.raw is None:
        raise ConfigError("report has no raw estimates; run the study with raw=True")
    report.raw.to_csv(path, index=False, encoding="utf-8")


def read_report_csv(path):
    """Parse a report CSV back into MetricRows"""
    frame = pd.read_csv(path, dtype={"scenario": str, "model": str, "type": str})
    if list(frame.columns) != REPORT_COLUMNS:
        raise ConfigError(f"unexpected report columns {list(frame.columns)}")
    return [
        MetricRow(
            scenario=r.scenario,
            model=r.model,
            type=r.type,
            bias=float(r.bias),
            mse=float(r.mse),
            coverage=float(r.coverage),
            k=int(r.k),
            bias_mcse=float(r.bias_mcse),
        )
        for r in frame.itertuples(index=False)
    ]
