"""Pre-policy lead regressions for parallel trends (did) and parallel
trend-in-trends (tt), with a joint Wald test on the top-order leads."""

from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np
import pandas as pd

from errors import EmptyCellError, PanelValidationError, SingularMatrixError
from logging_config import setup_logging
from paneldata import PanelDataset
from regress import DesignMatrix, coef_table, joint_wald, ols_fit, within_demean

logger = setup_logging("pretrend")

LEAD_COLUMNS = ["family", "period", "coef", "se", "p"]

SUBSETS = {
    "all": None,
    "i0": {"i": 0},
    "g0": {"g": 0},
    "g1": {"g": 1},
    "i1": {"i": 1},
}


@dataclass(frozen=True, eq=False)
class LeadsResult:
    base_period: int
    design: str
    families: Dict[str, pd.DataFrame]
    joint_family: str
    joint: Optional[object] = None
    n_obs: int = 0
    n_units: int = 0
    extra: Dict[str, object] = field(default_factory=dict)
    joint_note: str = ""

    def lead(self, family, period):
        table = self.families[family]
        row = table[table["period"] == period]
        if row.empty:
            raise KeyError((family, period))
        return row.iloc[0]

    def to_frame(self):
        parts = []
        for family, table in self.families.items():
            part = table[["period", "coef", "se", "p"]].copy()
            part.insert(0, "family", family)
            parts.append(part)
        frame = pd.concat(parts, ignore_index=True)
        if self.joint is not None:
            joint = pd.DataFrame(
                [{
                    "family": "joint",
                    "period": self.base_period,
                    "coef": self.joint.statistic,
                    "se": float(self.joint.df),
                    "p": self.joint.p_value,
                }]
            )
            frame = pd.concat([frame, joint], ignore_index=True)
        return frame[LEAD_COLUMNS]


def _pre_policy(data, post_from):
    if post_from is None:
        return data
    frame = data.frame[data.frame["time"] < post_from].reset_index(drop=True)
    if frame.empty:
        raise PanelValidationError(f"no observations before period {post_from}")
    return PanelDataset(frame=frame, covariate_names=data.covariate_names, metadata=dict(data.metadata))


def _check_periods(data, base):
    times = data.time_values
    if len(times) < 2:
        raise PanelValidationError(
            f"lead regressions need at least two pre-policy periods, found {len(times)}"
        )
    if base not in times:
        raise PanelValidationError(f"base period {base} is not a pre-policy period {times}")
    return [t for t in times if t != base]


def _lead_fit(data, base, families):
    """Demeaned OLS on year dummies and family x lead interactions"""
    leads = _check_periods(data, base)
    frame = data.frame
    time = frame["time"].to_numpy()

    regressors = {}
    for t in leads:
        regressors[f"year_{t}"] = (time == t).astype(float)
    for family in families:
        weight = np.ones(len(frame))
        for part in family.split(":"):
            weight = weight * frame[part].to_numpy(float)
        for t in leads:
            regressors[f"{family}:lead_{t}"] = weight * (time == t)

    block = pd.DataFrame(regressors)
    names = list(block.columns)
    block["outcome"] = frame["outcome"].to_numpy(float)
    demeaned = within_demean(block, names + ["outcome"], units=frame["unit"].to_numpy())
    X = DesignMatrix(demeaned.values[:, :-1], tuple(names))
    fit = ols_fit(X, demeaned.values[:, -1], frame["cluster"].to_numpy())
    return fit, leads


def _family_tables(fit, families, leads):
    out = {}
    for family in families:
        names = [f"{family}:lead_{t}" for t in leads if f"{family}:lead_{t}" in fit.coefficients.index]
        table = coef_table(fit, names)
        table["period"] = [int(n.rsplit("_", 1)[1]) for n in names]
        out[family] = table[["period", "coef", "se", "p"]].reset_index(drop=True)
    return out


def _joint(fit, family, leads):
    """(TestResult, "") or (None, reason the test could not be formed)"""
    names = [f"{family}:lead_{t}" for t in leads if f"{family}:lead_{t}" in fit.coefficients.index]
    if not names:
        note = f"every {family} lead was pruned as collinear"
        logger.warning(f"{note}; no joint test")
        return None, note
    try:
        return joint_wald(fit, names), ""
    except SingularMatrixError as e:
        logger.warning(f"joint test on {family} leads skipped: {str(e)}")
        return None, "singular covariance block"


def did_leads(data, base, post_from=None):
    """Unit FE + year FE + S x lead; joint test on the S x lead family"""
    data = _pre_policy(data, post_from)
    families = ["s"]
    fit, leads = _lead_fit(data, base, families)
    joint, note = _joint(fit, "s", leads)
    result = LeadsResult(
        base_period=base,
        design="did",
        families=_family_tables(fit, families, leads),
        joint_family="s",
        joint=joint,
        n_obs=fit.n_obs,
        n_units=data.n_units,
        joint_note=note,
    )
    if joint is not None:
        logger.info(f"did leads (base {base}): joint W={joint.statistic:.3f}, p={joint.p_value:.4f}")
    return result


def tt_leads(data, base, group_var="g", post_from=None):
    """Unit FE + year FE + S x lead + group x lead + S x group x lead

    group_var is "g" (target group, usually on the i = 0 subsample) or "i"
    (interference group, on the g = 0 subsample). The joint test covers the
    S x group x lead family.
    """
    group = group_var.lower()
    if group not in ("g", "i"):
        raise PanelValidationError(f"group_var must be G or I, got {group_var!r}")
    data = _pre_policy(data, post_from)
    frame = data.frame
    for s in (1, 0):
        for value in (1, 0):
            if not ((frame["s"] == s) & (frame[group] == value)).any():
                label = f"s={s},{group}={value}"
                raise EmptyCellError(f"trend-in-trends leads need cell {label}", cell=label)

    triple = f"s:{group}"
    families = ["s", group, triple]
    fit, leads = _lead_fit(data, base, families)
    joint, note = _joint(fit, triple, leads)
    result = LeadsResult(
        base_period=base,
        design="tt",
        families=_family_tables(fit, families, leads),
        joint_family=triple,
        joint=joint,
        n_obs=fit.n_obs,
        n_units=data.n_units,
        extra={"group_var": group},
        joint_note=note,
    )
    if joint is not None:
        logger.info(
            f"tt leads ({group}, base {base}): joint W={joint.statistic:.3f}, p={joint.p_value:.4f}"
        )
    return result


def write_leads_csv(result, path):
    result.to_frame().to_csv(path, index=False, encoding="utf-8")
    logger.info(f"Wrote lead table to {path}")
