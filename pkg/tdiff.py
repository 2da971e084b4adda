"""TD and DTD estimators.

Two forms of each: the saturated two-period regression and the three-way
fixed-effects panel specification (unit effects absorbed by demeaning, year
effects, year-by-stratum and year-by-group effects). Cell-mean oracles give
an independent evaluation of the same contrasts.
"""

from dataclasses import asdict, dataclass
from enum import Enum
from typing import Optional, Tuple

import numpy as np
import pandas as pd

from errors import ConfigError, EmptyCellError, PanelValidationError
from logging_config import setup_logging
from paneldata import CELL_LABELS, cell_label, subset
from regress import DesignMatrix, coef_table, ols_fit, within_demean

logger = setup_logging("tdiff")

Z_95 = 1.96


class Estimand(str, Enum):
    ATT_DELTA = "ATT_delta"
    SPILLOVER_PSI = "Spillover_psi"
    DR_DELTA = "DR_delta"
    DR_PHI = "DR_phi"


@dataclass(frozen=True)
class Estimate:
    estimand: Estimand
    point: float
    se: float
    ci_low: float
    ci_high: float
    n_obs: int
    n_units: int
    model: str = ""

    @classmethod
    def from_point(cls, estimand, point, se, n_obs, n_units, model=""):
        point = float(point)
        se = float(se)
        return cls(
            estimand=Estimand(estimand),
            point=point,
            se=se,
            ci_low=point - Z_95 * se,
            ci_high=point + Z_95 * se,
            n_obs=int(n_obs),
            n_units=int(n_units),
            model=model,
        )

    def to_dict(self):
        out = asdict(self)
        out["estimand"] = self.estimand.value
        return out


@dataclass(frozen=True)
class ContrastSpec:
    """Signed cell means; a term is ((s, g, i, t), sign) with i=None pooling over i"""

    name: str
    terms: Tuple[Tuple[Tuple[int, int, Optional[int], int], int], ...]

    def __post_init__(self):
        signs = [sign for _, sign in self.terms]
        if any(sign not in (1, -1) for sign in signs):
            raise ConfigError(f"contrast {self.name}: signs must be +1 or -1")
        if sum(signs) != 0:
            raise ConfigError(f"contrast {self.name}: signs must sum to zero")


def _did_terms(treated, control):
    """(treated post - pre) - (control post - pre) for two (s, g, i) cells"""
    return (
        (treated + (1,), 1),
        (treated + (0,), -1),
        (control + (1,), -1),
        (control + (0,), 1),
    )


def _triple_terms(first, second):
    """DiD over the s=1 pair minus the same DiD over the s=0 pair"""
    head = _did_terms(*first)
    tail = tuple((cell, -sign) for cell, sign in _did_terms(*second))
    return head + tail


TD_DELTA = ContrastSpec(
    "td_delta", _triple_terms(((1, 1, None), (1, 0, None)), ((0, 1, None), (0, 0, None)))
)
TD_PSI = ContrastSpec("td_psi", _did_terms((1, 0, None), (0, 0, None)))
DTD_DELTA = ContrastSpec("dtd_delta", _triple_terms(((1, 1, 0), (1, 0, 0)), ((0, 1, 0), (0, 0, 0))))
DTD_PSI = ContrastSpec("dtd_psi", _triple_terms(((1, 0, 1), (1, 0, 0)), ((0, 0, 1), (0, 0, 0))))


def _two_periods(data):
    times = data.time_values
    if len(times) != 2:
        raise PanelValidationError(
            f"two-period estimator needs exactly two periods, found {len(times)}"
        )
    return times


def _cell_mask(frame, s, g, i):
    mask = (frame["s"] == s) & (frame["g"] == g)
    if i is not None:
        mask &= frame["i"] == i
    return mask


def cell_mean_oracle(data, spec):
    """Sum of sign * mean(outcome) over the referenced (s, g, i, t) cells"""
    times = _two_periods(data)
    frame = data.frame
    total = 0.0
    for (s, g, i, t), sign in spec.terms:
        mask = _cell_mask(frame, s, g, i) & (frame["time"] == times[t])
        if not mask.any():
            raise EmptyCellError(
                f"cell {cell_label(s, g, i)} has no rows in period {times[t]}",
                cell=cell_label(s, g, i),
            )
        total += sign * float(frame.loc[mask, "outcome"].mean())
    return total


def _require_cells(data, cells):
    frame = data.frame
    times = data.time_values
    for s, g, i in cells:
        mask = _cell_mask(frame, s, g, i)
        present = set(frame.loc[mask, "time"].unique())
        if not present.issuperset(times):
            label = cell_label(s, g, i)
            raise EmptyCellError(f"required cell {label} is empty in at least one period", cell=label)


def _fit(data, columns):
    design = DesignMatrix.from_columns(columns)
    return ols_fit(design, data.frame["outcome"].to_numpy(), data.frame["cluster"].to_numpy())


def _estimates(fit, data, pairs, model):
    out = []
    for estimand, name in pairs:
        out.append(
            Estimate.from_point(
                estimand, fit.coef(name), fit.stderr(name), fit.n_obs, data.n_units, model
            )
        )
    return tuple(out)


def td_two_period(data):
    """Saturated two-period TD: delta on s:g:post, psi on s:post; i is ignored"""
    times = _two_periods(data)
    _require_cells(data, [(s, g, None) for s, g in ((1, 1), (1, 0), (0, 1), (0, 0))])
    frame = data.frame
    s = frame["s"].to_numpy(float)
    g = frame["g"].to_numpy(float)
    post = (frame["time"] == times[1]).to_numpy(float)
    columns = {
        "const": np.ones(len(frame)),
        "s": s,
        "g": g,
        "post": post,
        "s:g": s * g,
        "g:post": g * post,
        "s:post": s * post,
        "s:g:post": s * g * post,
    }
    fit = _fit(data, columns)
    delta, psi = _estimates(
        fit, data, ((Estimand.ATT_DELTA, "s:g:post"), (Estimand.SPILLOVER_PSI, "s:post")), "TD_2P"
    )
    logger.info(f"TD_2P on {fit.n_obs} rows: delta={delta.point:.4f}, psi={psi.point:.4f}")
    return delta, psi


def dtd_two_period(data):
    """Saturated two-period DTD: delta on s:g:post, psi on s:i:post"""
    times = _two_periods(data)
    _require_cells(data, list(CELL_LABELS))
    frame = data.frame
    s = frame["s"].to_numpy(float)
    g = frame["g"].to_numpy(float)
    i = frame["i"].to_numpy(float)
    post = (frame["time"] == times[1]).to_numpy(float)
    columns = {
        "const": np.ones(len(frame)),
        "s": s,
        "post": post,
        "g": g,
        "i": i,
        "s:g": s * g,
        "s:post": s * post,
        "g:post": g * post,
        "s:i": s * i,
        "i:post": i * post,
        "s:g:post": s * g * post,
        "s:i:post": s * i * post,
    }
    fit = _fit(data, columns)
    delta, psi = _estimates(
        fit, data, ((Estimand.ATT_DELTA, "s:g:post"), (Estimand.SPILLOVER_PSI, "s:i:post")), "DTD_2P"
    )
    logger.info(f"DTD_2P on {fit.n_obs} rows: delta={delta.point:.4f}, psi={psi.point:.4f}")
    return delta, psi


def _check_post_from(data, post_from, base_year):
    times = data.time_values
    if len(times) < 2:
        raise PanelValidationError(f"panel estimator needs at least two periods, found {len(times)}")
    if post_from is None or not (times[0] < post_from <= times[-1]):
        raise PanelValidationError(
            f"post_from={post_from} must leave pre and post periods inside {times[0]}..{times[-1]}"
        )
    base = times[0] if base_year is None else int(base_year)
    if base not in times:
        raise PanelValidationError(f"base year {base} is not a panel period")
    return times, base


def _threeway_fit(data, post_from, base_year, triple_terms, year_groups=("s", "g")):
    """Demeaned OLS of outcome on year, year-by-group and the post-period triple terms"""
    times, base = _check_post_from(data, post_from, base_year)
    frame = data.frame
    time = frame["time"].to_numpy()
    post = (time >= post_from).astype(float)

    regressors = {}
    for t in times:
        if t == base:
            continue
        year = (time == t).astype(float)
        regressors[f"year_{t}"] = year
        for group in year_groups:
            regressors[f"{group}:year_{t}"] = frame[group].to_numpy(float) * year
    for name, parts in triple_terms:
        values = post.copy()
        for part in parts:
            values = values * frame[part].to_numpy(float)
        regressors[name] = values

    block = pd.DataFrame(regressors)
    block["outcome"] = frame["outcome"].to_numpy(float)
    names = [c for c in block.columns if c != "outcome"]
    demeaned = within_demean(block, names + ["outcome"], units=frame["unit"].to_numpy())
    X = DesignMatrix(demeaned.values[:, :-1], tuple(names))
    y = demeaned.values[:, -1]
    return ols_fit(X, y, frame["cluster"].to_numpy())


def td_threeway_fe(data, post_from, base_year=None):
    """Three-way FE TD: unit, year, year-by-S and year-by-G effects plus S*G*post"""
    fit = _threeway_fit(data, post_from, base_year, [("s:g:post", ("s", "g"))])
    (delta,) = _estimates(fit, data, ((Estimand.ATT_DELTA, "s:g:post"),), "TD_3FE")
    logger.info(f"TD_3FE on {fit.n_obs} rows, {data.n_units} units: delta={delta.point:.4f}")
    return delta


def dtd_threeway_fe(data, post_from, base_year=None, with_year_by_interference=False):
    """Three-way FE DTD: the TD specification plus S*I*post

    The default has no year-by-I effects. with_year_by_interference=True
    adds them (reported as DTD_3FE_EXT).
    """
    year_groups = ("s", "g", "i") if with_year_by_interference else ("s", "g")
    model = "DTD_3FE_EXT" if with_year_by_interference else "DTD_3FE"
    fit = _threeway_fit(
        data,
        post_from,
        base_year,
        [("s:g:post", ("s", "g")), ("s:i:post", ("s", "i"))],
        year_groups=year_groups,
    )
    delta, psi = _estimates(
        fit, data, ((Estimand.ATT_DELTA, "s:g:post"), (Estimand.SPILLOVER_PSI, "s:i:post")), model
    )
    logger.info(
        f"{model} on {fit.n_obs} rows, {data.n_units} units: "
        f"delta={delta.point:.4f}, psi={psi.point:.4f}"
    )
    return delta, psi


def yearly_interactions(data, post_from, model="td", base_year=None):
    """Year-by-S and year-by-G coefficients of a three-way FE fit"""
    model = model.lower()
    if model not in ("td", "dtd"):
        raise ConfigError(f"unknown model {model!r}; expected td or dtd")
    terms = [("s:g:post", ("s", "g"))]
    if model == "dtd":
        terms.append(("s:i:post", ("s", "i")))
    fit = _threeway_fit(data, post_from, base_year, terms)
    names = [n for n in fit.coefficients.index if n.startswith(("s:year_", "g:year_"))]
    table = coef_table(fit, names)
    table.insert(0, "family", table["term"].str.split(":").str[0])
    table.insert(1, "period", table["term"].str.split("_").str[-1].astype(int))
    return table.drop(columns=["term"])


def _two_by_two(data, g, i, model, estimand):
    times = _two_periods(data)
    _require_cells(data, [(1, g, i), (0, g, i)])
    frame = data.frame
    s = frame["s"].to_numpy(float)
    post = (frame["time"] == times[1]).to_numpy(float)
    fit = _fit(data, {"const": np.ones(len(frame)), "s": s, "post": post, "s:post": s * post})
    (est,) = _estimates(fit, data, ((estimand, "s:post"),), model)
    return est


def separate_did(data):
    """Two 2x2 DiDs: ATT from T1 against T0, ASU from I1 against I0"""
    targets = subset(data, {"g": 1})
    interference = subset(data, {"i": 1})
    att = _two_by_two(targets, 1, 0, "DID_T", Estimand.ATT_DELTA)
    asu = _two_by_two(interference, 0, 1, "DID_I", Estimand.SPILLOVER_PSI)
    logger.info(f"Separate DiDs: ATT={att.point:.4f}, ASU={asu.point:.4f}")
    return att, asu


def expected_bias(model, rho, psi1, psi2=0.0, case="B"):
    """Three-way FE bias of the ATT when spillovers also reach the placebo stratum

    Case B: the placebo interference group is hit by psi2.
    Case A: the placebo target group is hit by psi2.
    """
    family = "dtd" if model.lower().startswith("dtd") else "td"
    case = case.upper()
    if case == "B":
        return rho * psi2 if family == "dtd" else rho * (psi2 - psi1)
    if case == "A":
        return -psi2 if family == "dtd" else -psi2 - rho * psi1
    raise ConfigError(f"unknown spillover case {case!r}; expected A or B")
