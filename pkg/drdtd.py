"""Doubly-robust TD/DTD estimators under conditional parallel trend-in-trends.

Each estimator works on a per-unit table of outcome changes dy = y1 - y0.
For a target cell and three comparison cells c with signs (+1, +1, -1) the
point estimate is

    sum_c sign_c * mean[(w_target - w_c) * (dy - m_c(X))]

where w_target = D_target / mean(D_target), w_c = D_c * odds_c(X) /
mean(D_c * odds_c(X)), odds_c is the odds of the pairwise propensity of
target against c, and m_c is the linear outcome regression of dy in cell c.
"""

from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from scipy.special import expit
from threadpoolctl import threadpool_limits

from errors import (
    BootstrapError,
    ConfigError,
    EmptyCellError,
    EstimationError,
    OverlapError,
    PanelValidationError,
)
from logging_config import setup_logging
from paneldata import cell_label, split_windows, subset, to_two_period, unit_changes
from regress import DesignMatrix, logit_fit, ols_fit
from rng import make_rng
from tdiff import Estimand, Estimate

logger = setup_logging("drdtd")

PS_BOUNDS = (0.001, 0.999)
DEFAULT_MAX_WEIGHT_SHARE = 0.05
DEFAULT_BOOTSTRAP_B = 400
MIN_BOOTSTRAP_B = 50
MAX_BOOTSTRAP_FAILURE = 0.10


@dataclass(frozen=True)
class DRDesign:
    """Target cell, signed comparison cells and the subsample they live in"""

    model: str
    estimand: Estimand
    selector: Optional[Dict[str, int]]
    target: Tuple[int, int, Optional[int]]
    comparisons: Tuple[Tuple[Tuple[int, int, Optional[int]], int], ...]


ATT_DESIGN = DRDesign(
    "DR_DTD",
    Estimand.DR_DELTA,
    {"i": 0},
    (1, 1, 0),
    (((1, 0, 0), 1), ((0, 1, 0), 1), ((0, 0, 0), -1)),
)
ASU_DESIGN = DRDesign(
    "DR_DTD",
    Estimand.DR_PHI,
    {"g": 0},
    (1, 0, 1),
    (((1, 0, 0), 1), ((0, 0, 1), 1), ((0, 0, 0), -1)),
)
TD_DESIGN = DRDesign(
    "DR_TD",
    Estimand.DR_DELTA,
    None,
    (1, 1, None),
    (((1, 0, None), 1), ((0, 1, None), 1), ((0, 0, None), -1)),
)


@dataclass(frozen=True)
class GPSModel:
    """Pairwise propensity of the target cell against each comparison cell"""

    target: Tuple[int, int, Optional[int]]
    coefficients: Dict[Tuple, pd.Series]
    probabilities: Dict[Tuple, np.ndarray]
    n_winsorized: int = 0


@dataclass(frozen=True)
class OutcomeModel:
    """Linear regressions of dy on (1, X) fitted within each comparison cell"""

    coefficients: Dict[Tuple, pd.Series]
    predictions: Dict[Tuple, np.ndarray]


@dataclass(frozen=True)
class DRWeights:
    target: np.ndarray
    comparisons: Dict[Tuple, np.ndarray] = field(default_factory=dict)


def _membership(table, cell):
    s, g, i = cell
    mask = (table["s"] == s) & (table["g"] == g)
    if i is not None:
        mask &= table["i"] == i
    return mask.to_numpy()


def _as_unit_table(sub):
    if isinstance(sub, pd.DataFrame):
        return sub
    return unit_changes(sub)


def _regressors(table, covariates):
    columns = {"const": np.ones(len(table))}
    for name in covariates:
        columns[name] = table[name].to_numpy(dtype=float)
    return DesignMatrix.from_columns(columns)


def _predict(design, coefficients):
    frame = design.to_frame()
    return frame[list(coefficients.index)].to_numpy() @ coefficients.to_numpy()


def _check_cell_size(table, cell, n_covariates):
    n = int(_membership(table, cell).sum())
    label = cell_label(*cell)
    if n == 0:
        raise EmptyCellError(f"cell {label} has no units", cell=label)
    if n < n_covariates + 2:
        raise EstimationError(f"cell {label} has {n} units; at least {n_covariates + 2} needed")
    return n


def fit_gps(sub, target_cell, comparison_cells=None, covariates=None):
    """Binary logit of target-vs-comparison membership on (1, X), one per comparison cell

    Fitted probabilities are evaluated on every row of the subsample and
    winsorized to PS_BOUNDS.
    """
    table = _as_unit_table(sub)
    covariates = _covariate_list(sub, covariates)
    if comparison_cells is None:
        comparison_cells = _design_for_target(target_cell).comparisons
    comparison_cells = [c[0] if isinstance(c[0], tuple) else c for c in comparison_cells]

    design = _regressors(table, covariates)
    in_target = _membership(table, target_cell)
    _check_cell_size(table, target_cell, len(covariates))

    coefficients, probabilities = {}, {}
    n_winsorized = 0
    for cell in comparison_cells:
        _check_cell_size(table, cell, len(covariates))
        in_pair = in_target | _membership(table, cell)
        pair_design = DesignMatrix(design.values[in_pair], design.column_names)
        fit = logit_fit(pair_design, in_target[in_pair].astype(float))
        p = expit(_predict(design, fit.coefficients))
        clipped = np.clip(p, *PS_BOUNDS)
        n_winsorized += int(np.sum((clipped != p) & in_pair))
        coefficients[cell] = fit.coefficients
        probabilities[cell] = clipped

    if n_winsorized:
        logger.warning(f"Winsorized {n_winsorized} propensity scores to {PS_BOUNDS}")
    return GPSModel(
        target=tuple(target_cell),
        coefficients=coefficients,
        probabilities=probabilities,
        n_winsorized=n_winsorized,
    )


def fit_outcome_reg(sub, cell, covariates=None):
    """OLS of dy on (1, X) within one cell, predicted for every subsample row"""
    table = _as_unit_table(sub)
    covariates = _covariate_list(sub, covariates)
    _check_cell_size(table, cell, len(covariates))
    design = _regressors(table, covariates)
    in_cell = _membership(table, cell)
    cell_design = DesignMatrix(design.values[in_cell], design.column_names)
    # point fit only; unit labels stand in for clusters
    fit = ols_fit(cell_design, table["dy"].to_numpy()[in_cell], np.arange(int(in_cell.sum())))
    return OutcomeModel(
        coefficients={tuple(cell): fit.coefficients},
        predictions={tuple(cell): _predict(design, fit.coefficients)},
    )


def dr_weights(table, design, gps):
    """Self-normalized target and comparison weights (each averages to 1)"""
    d_target = _membership(table, design.target).astype(float)
    w_target = d_target / d_target.mean()
    comparisons = {}
    for cell, _ in design.comparisons:
        p = gps.probabilities[cell]
        raw = _membership(table, cell).astype(float) * p / (1.0 - p)
        comparisons[cell] = raw / raw.mean()
    return DRWeights(target=w_target, comparisons=comparisons)


def _check_overlap(weights, max_weight_share):
    families = [("target", weights.target)] + [
        (cell_label(*cell), w) for cell, w in weights.comparisons.items()
    ]
    for name, w in families:
        share = float(w.max() / w.sum())
        if share > max_weight_share:
            raise OverlapError(
                f"weight family {name}: one unit carries {share:.3f} of the total "
                f"(cap {max_weight_share}); covariate overlap is too thin"
            )


def dr_point(table, design, covariates=(), ps_covariates=None, or_covariates=None,
             max_weight_share=DEFAULT_MAX_WEIGHT_SHARE):
    """Point estimate on a unit table; returns (point, weights, gps, outcome)"""
    ps_covariates = list(covariates if ps_covariates is None else ps_covariates)
    or_covariates = list(covariates if or_covariates is None else or_covariates)

    gps = fit_gps(table, design.target, design.comparisons, ps_covariates)
    predictions, coefficients = {}, {}
    for cell, _ in design.comparisons:
        model = fit_outcome_reg(table, cell, or_covariates)
        predictions.update(model.predictions)
        coefficients.update(model.coefficients)
    outcome = OutcomeModel(coefficients=coefficients, predictions=predictions)

    weights = dr_weights(table, design, gps)
    _check_overlap(weights, max_weight_share)

    dy = table["dy"].to_numpy(dtype=float)
    point = 0.0
    for cell, sign in design.comparisons:
        point += sign * float(
            np.mean((weights.target - weights.comparisons[cell]) * (dy - predictions[cell]))
        )
    return point, weights, gps, outcome


def _covariate_list(sub, covariates):
    if covariates is not None:
        return list(covariates)
    names = getattr(sub, "covariate_names", None)
    if names is None:
        raise EstimationError("covariates must be named when estimating from a unit table")
    return list(names)


def _design_for_target(target_cell):
    for design in (ATT_DESIGN, ASU_DESIGN, TD_DESIGN):
        if tuple(target_cell) == design.target:
            return design
    raise ConfigError(f"no doubly-robust design targets cell {target_cell}")


def _prepare(data, design, post_from):
    sub = subset(data, design.selector) if design.selector else data
    times = sub.time_values
    if len(times) > 2:
        if post_from is None:
            raise PanelValidationError(
                f"panel has {len(times)} periods; post_from is needed to collapse to two"
            )
        pre, post = split_windows(times, post_from)
        sub = to_two_period(sub, pre, post)
    elif len(times) < 2:
        raise PanelValidationError("doubly-robust estimators need two periods")
    table = unit_changes(sub)
    for cell in [design.target] + [c for c, _ in design.comparisons]:
        if not _membership(table, cell).any():
            label = cell_label(*cell)
            raise EmptyCellError(f"required cell {label} is empty", cell=label)
    return sub, table


def _bootstrap_replicate(table, strata, design, b, seed, options):
    rng = make_rng(seed, "bootstrap", b)
    rows = np.concatenate([rng.choice(idx, size=len(idx), replace=True) for idx in strata])
    sample = table.iloc[rows]
    with threadpool_limits(limits=1):
        try:
            return dr_point(sample, design, **options)[0]
        except EstimationError:
            return None


def _strata(table):
    keys = table[["s", "g", "i"]].astype(int).astype(str).agg("".join, axis=1).to_numpy()
    return [np.flatnonzero(keys == key) for key in sorted(set(keys))]


def _resolve_design(estimator):
    if isinstance(estimator, DRDesign):
        return estimator
    if isinstance(estimator, str):
        try:
            return {"att": ATT_DESIGN, "asu": ASU_DESIGN, "td": TD_DESIGN}[estimator.lower()]
        except KeyError:
            raise ConfigError(f"unknown doubly-robust estimator {estimator!r}")
    for fn, design in ((dr_att, ATT_DESIGN), (dr_asu, ASU_DESIGN), (dr_td, TD_DESIGN)):
        if estimator is fn:
            return design
    raise ConfigError(f"unknown doubly-robust estimator {estimator!r}")


def bootstrap_ci(estimator, data, B, seed, n_jobs=1, point=None, post_from=None, **options):
    """Cell-stratified unit bootstrap; returns (se, (ci_low, ci_high))

    estimator is dr_att, dr_asu, dr_td, a DRDesign or one of "att"/"asu"/"td".
    data is a PanelDataset or an already prepared unit table. Replicate b
    draws from the stream (seed, "bootstrap", b), so results do not depend
    on n_jobs.
    """
    design = _resolve_design(estimator)
    if B < MIN_BOOTSTRAP_B:
        raise ConfigError(f"bootstrap needs B >= {MIN_BOOTSTRAP_B}, got {B}")
    if isinstance(data, pd.DataFrame):
        table = data
    else:
        _, table = _prepare(data, design, post_from)
    if point is None:
        point = dr_point(table, design, **options)[0]

    strata = _strata(table)
    replicates = Parallel(n_jobs=n_jobs)(
        delayed(_bootstrap_replicate)(table, strata, design, b, seed, options) for b in range(B)
    )
    values = np.array([r for r in replicates if r is not None], dtype=float)
    n_failed = B - len(values)
    if n_failed / B > MAX_BOOTSTRAP_FAILURE:
        raise BootstrapError(f"{n_failed} of {B} bootstrap replicates failed")
    if n_failed:
        logger.warning(f"{n_failed} of {B} bootstrap replicates failed and were dropped")

    se = float(np.std(values, ddof=1)) if len(values) > 1 else float("nan")
    return se, (point - 1.96 * se, point + 1.96 * se)


def _estimate(design, data, covariates, ps_covariates, or_covariates, bootstrap_b, seed,
              max_weight_share, n_jobs, post_from):
    try:
        covariates = list(data.covariate_names if covariates is None else covariates)
        _, table = _prepare(data, design, post_from)
        options = {
            "covariates": covariates,
            "ps_covariates": ps_covariates,
            "or_covariates": or_covariates,
            "max_weight_share": max_weight_share,
        }
        point, _, gps, _ = dr_point(table, design, **options)
        if bootstrap_b:
            se, _ = bootstrap_ci(design, table, bootstrap_b, seed, n_jobs=n_jobs, point=point, **options)
        else:
            se = float("nan")
        estimate = Estimate.from_point(
            design.estimand, point, se, 2 * len(table), len(table), design.model
        )
        logger.info(
            f"{design.model} {design.estimand.value} on {len(table)} units: "
            f"point={point:.4f}, se={se:.4f}, winsorized={gps.n_winsorized}"
        )
        return estimate
    except EstimationError as e:
        logger.error(f"{design.model} {design.estimand.value} failed: {str(e)}")
        raise


def dr_att(data, covariates=None, ps_covariates=None, or_covariates=None,
           bootstrap_b=DEFAULT_BOOTSTRAP_B, seed=0, max_weight_share=DEFAULT_MAX_WEIGHT_SHARE,
           n_jobs=1, post_from=None):
    """Doubly-robust ATT on the target and pure-control cells (i = 0)"""
    return _estimate(ATT_DESIGN, data, covariates, ps_covariates, or_covariates, bootstrap_b,
                     seed, max_weight_share, n_jobs, post_from)


def dr_asu(data, covariates=None, ps_covariates=None, or_covariates=None,
           bootstrap_b=DEFAULT_BOOTSTRAP_B, seed=0, max_weight_share=DEFAULT_MAX_WEIGHT_SHARE,
           n_jobs=1, post_from=None):
    """Doubly-robust spillover on the interference and pure-control cells (g = 0)"""
    return _estimate(ASU_DESIGN, data, covariates, ps_covariates, or_covariates, bootstrap_b,
                     seed, max_weight_share, n_jobs, post_from)


def dr_td(data, covariates=None, ps_covariates=None, or_covariates=None,
          bootstrap_b=DEFAULT_BOOTSTRAP_B, seed=0, max_weight_share=DEFAULT_MAX_WEIGHT_SHARE,
          n_jobs=1, post_from=None):
    """Doubly-robust TD with interference and pure controls pooled"""
    return _estimate(TD_DESIGN, data, covariates, ps_covariates, or_covariates, bootstrap_b,
                     seed, max_weight_share, n_jobs, post_from)
