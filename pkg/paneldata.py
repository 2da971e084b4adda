"""Canonical long-format panel used by every estimator.

A dataset is one row per (unit, time) with the stratum (s), target-group (g)
and interference-group (i) indicators, an outcome, an optional covariate
vector and a cluster label. Partition cells are named

    T1 / I1 / C1  -- target, interference and pure-control units, s = 1
    T0 / I0 / C0  -- the same groups in the placebo stratum, s = 0
"""

from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Tuple, Union

import numpy as np
import pandas as pd

from errors import PanelValidationError
from logging_config import setup_logging

logger = setup_logging("paneldata")

BASE_COLUMNS = ["unit", "time", "outcome", "s", "g", "i", "cluster"]
INDICATORS = ("s", "g", "i")

CELL_LABELS = {
    (1, 1, 0): "T1",
    (1, 0, 1): "I1",
    (1, 0, 0): "C1",
    (0, 1, 0): "T0",
    (0, 0, 1): "I0",
    (0, 0, 0): "C0",
}
TD_CELLS = ((1, 1), (1, 0), (0, 1), (0, 0))


def cell_label(s, g, i=None):
    """Name of a partition cell; i=None pools interference and pure controls (U1, U0)"""
    if i is None:
        return f"T{int(s)}" if g else f"U{int(s)}"
    return CELL_LABELS[(int(s), int(g), int(i))]


@dataclass(frozen=True)
class ColumnMapping:
    """Names of the CSV columns holding each canonical field"""

    unit: str = "unit"
    time: str = "time"
    outcome: str = "outcome"
    s: str = "s"
    g: str = "g"
    i: Optional[str] = None
    covariates: Tuple[str, ...] = ()
    cluster: Optional[str] = None
    post_from: Optional[int] = None

    def columns(self):
        cols = [self.unit, self.time, self.outcome, self.s, self.g]
        if self.i:
            cols.append(self.i)
        cols.extend(self.covariates)
        if self.cluster:
            cols.append(self.cluster)
        return cols

    def validate(self):
        cols = self.columns()
        duplicated = sorted({c for c in cols if cols.count(c) > 1})
        if duplicated:
            raise PanelValidationError(
                f"column mapping uses the same column twice: {', '.join(duplicated)}",
                column=duplicated[0],
            )


@dataclass(frozen=True)
class Observation:
    unit_id: object
    time: int
    outcome: float
    s: int
    g: int
    i: int
    covariates: Tuple[float, ...]
    cluster: object


@dataclass(frozen=True)
class PartitionSummary:
    """Unit counts per cell and interference shares per stratum"""

    counts: Mapping[str, int]
    rho: Mapping[int, float]
    td_missing: Tuple[str, ...]
    dtd_missing: Tuple[str, ...]

    @property
    def td_incomplete(self):
        return bool(self.td_missing)

    @property
    def dtd_incomplete(self):
        return bool(self.dtd_missing)

    def to_frame(self):
        rows = [{"cell": label, "units": n} for label, n in self.counts.items()]
        rows.append({"cell": "rho_1", "units": self.rho[1]})
        rows.append({"cell": "rho_0", "units": self.rho[0]})
        return pd.DataFrame(rows, columns=["cell", "units"])

    def to_dict(self):
        return {
            "counts": dict(self.counts),
            "rho": {str(k): v for k, v in self.rho.items()},
            "td_missing": list(self.td_missing),
            "dtd_missing": list(self.dtd_missing),
        }


@dataclass(frozen=True, eq=False)
class PanelDataset:
    """Validated long panel; the frame is private and never mutated"""

    frame: pd.DataFrame
    covariate_names: Tuple[str, ...] = ()
    metadata: Mapping[str, object] = field(default_factory=dict)

    @classmethod
    def from_frame(cls, frame, covariate_names=(), metadata=None):
        """Validate a frame with the canonical columns and wrap it"""
        covariate_names = tuple(covariate_names)
        frame = frame.copy()
        if "i" not in frame.columns:
            frame["i"] = 0
        if "cluster" not in frame.columns:
            frame["cluster"] = frame["unit"] if "unit" in frame.columns else None
        missing = [c for c in BASE_COLUMNS + list(covariate_names) if c not in frame.columns]
        if missing:
            raise PanelValidationError(
                f"missing column: {', '.join(missing)}", column=missing[0]
            )
        frame = frame[BASE_COLUMNS + list(covariate_names)]
        _validate_frame(frame, covariate_names)
        frame = frame.astype(
            {"time": np.int64, "outcome": float, "s": np.int64, "g": np.int64, "i": np.int64}
        )
        frame = frame.sort_values(["unit", "time"], kind="mergesort").reset_index(drop=True)
        return cls(frame=frame, covariate_names=covariate_names, metadata=dict(metadata or {}))

    @property
    def time_values(self):
        return tuple(int(t) for t in np.sort(self.frame["time"].unique()))

    @property
    def units(self):
        return tuple(pd.unique(self.frame["unit"]))

    @property
    def n_obs(self):
        return len(self.frame)

    @property
    def n_units(self):
        return int(self.frame["unit"].nunique())

    @property
    def rows(self):
        return list(self.observations())

    def observations(self):
        cov = self.frame[list(self.covariate_names)].to_numpy(dtype=float)
        for k, rec in enumerate(self.frame.itertuples(index=False)):
            yield Observation(
                unit_id=rec.unit,
                time=int(rec.time),
                outcome=float(rec.outcome),
                s=int(rec.s),
                g=int(rec.g),
                i=int(rec.i),
                covariates=tuple(cov[k]),
                cluster=rec.cluster,
            )

    def column(self, name):
        """Read-only numpy view of one column"""
        values = self.frame[name].to_numpy()
        values = values.copy()
        values.flags.writeable = False
        return values

    def covariate_matrix(self):
        return self.frame[list(self.covariate_names)].to_numpy(dtype=float)

    def to_frame(self):
        return self.frame.copy()

    def unit_frame(self):
        """One row per unit: indicators, cluster and covariates of its earliest row"""
        return (
            self.frame.drop(columns=["time", "outcome"])
            .groupby("unit", sort=True)
            .first()
        )

    def equals(self, other):
        return (
            isinstance(other, PanelDataset)
            and self.covariate_names == other.covariate_names
            and self.frame.equals(other.frame)
        )


def _validate_frame(frame, covariate_names):
    if frame["unit"].isna().any():
        raise PanelValidationError("unit id is empty", column="unit")
    if frame["cluster"].isna().any() or (frame["cluster"].astype(str) == "").any():
        raise PanelValidationError("cluster id is empty", column="cluster")

    for col in INDICATORS:
        values = frame[col]
        if not values.isin([0, 1]).all():
            bad = values[~values.isin([0, 1])].iloc[0]
            raise PanelValidationError(
                f"non-binary indicator value {bad!r} in column {col!r}", column=col
            )

    times = pd.to_numeric(frame["time"], errors="coerce").to_numpy(dtype=float)
    if not (np.isfinite(times).all() and np.all(np.mod(times, 1) == 0)):
        raise PanelValidationError("time must hold integer periods", column="time")

    outcome = frame["outcome"].to_numpy(dtype=float)
    if not np.isfinite(outcome).all():
        raise PanelValidationError("outcome must be finite", column="outcome")
    if covariate_names:
        cov = frame[list(covariate_names)].to_numpy(dtype=float)
        if not np.isfinite(cov).all():
            raise PanelValidationError("covariates must be finite")

    dup = frame.duplicated(subset=["unit", "time"])
    if dup.any():
        row = frame[dup].iloc[0]
        raise PanelValidationError(
            f"duplicate (unit, time) pair: ({row['unit']!r}, {row['time']!r})",
            unit_id=row["unit"],
        )

    spread = frame.groupby("unit", sort=True)[list(INDICATORS)].nunique()
    varying = spread[(spread > 1).any(axis=1)]
    if len(varying):
        unit_id = varying.index[0]
        col = varying.columns[(varying.iloc[0] > 1).to_numpy()][0]
        raise PanelValidationError(
            f"group membership varies over time for unit {unit_id!r} (column {col!r})",
            unit_id=unit_id,
            column=col,
        )

    overlap = frame[(frame["g"] == 1) & (frame["i"] == 1)]
    if len(overlap):
        unit_id = overlap["unit"].iloc[0]
        raise PanelValidationError(
            f"unit {unit_id!r} is both target (g=1) and interference (i=1)",
            unit_id=unit_id,
        )


def _parse_indicator(raw, column):
    values = raw[column].astype(str).str.strip()
    bad = ~values.isin(["0", "1"])
    if bad.any():
        raise PanelValidationError(
            f"non-binary indicator value {values[bad].iloc[0]!r} in column {column!r}",
            column=column,
        )
    return values.astype(int)


def _parse_real(raw, column):
    try:
        return pd.to_numeric(raw[column].astype(str).str.strip(), errors="raise").astype(float)
    except (ValueError, TypeError):
        raise PanelValidationError(f"column {column!r} is not numeric", column=column)


def _parse_time(raw, column):
    values = _parse_real(raw, column)
    if not np.all(np.mod(values.to_numpy(), 1) == 0):
        raise PanelValidationError(f"column {column!r} must hold integer periods", column=column)
    return values.astype(np.int64)


def load_panel_csv(path, mapping):
    """Load and validate a long-format panel CSV"""
    try:
        logger.info(f"Loading panel from {path}")
        mapping.validate()
        try:
            raw = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
        except FileNotFoundError:
            raise PanelValidationError(f"file not found: {path}")
        missing = [c for c in mapping.columns() if c not in raw.columns]
        if missing:
            raise PanelValidationError(f"missing column: {missing[0]}", column=missing[0])

        frame = pd.DataFrame(
            {
                "unit": raw[mapping.unit].astype(str),
                "time": _parse_time(raw, mapping.time),
                "outcome": _parse_real(raw, mapping.outcome),
                "s": _parse_indicator(raw, mapping.s),
                "g": _parse_indicator(raw, mapping.g),
                "i": _parse_indicator(raw, mapping.i) if mapping.i else 0,
                "cluster": raw[mapping.cluster].astype(str)
                if mapping.cluster
                else raw[mapping.unit].astype(str),
            }
        )
        for name in mapping.covariates:
            frame[name] = _parse_real(raw, name)

        data = PanelDataset.from_frame(
            frame,
            covariate_names=mapping.covariates,
            metadata={
                "source": str(path),
                "post_from": mapping.post_from,
                "has_interference": bool(mapping.i),
            },
        )
        logger.info(
            f"Loaded {data.n_obs} rows, {data.n_units} units, periods {data.time_values}"
        )
        return data
    except PanelValidationError as e:
        logger.error(f"Invalid panel {path}: {str(e)}")
        raise


def save_panel_csv(data, path):
    """Write the canonical long CSV (reloadable with the default mapping)"""
    data.frame.to_csv(path, index=False, encoding="utf-8")
    logger.info(f"Wrote {data.n_obs} rows to {path}")


def validate_partition(data):
    """Count units per cell; flag cells the TD and DTD models need but lack"""
    units = data.unit_frame()
    counts = {}
    for (s, g, i), label in CELL_LABELS.items():
        counts[label] = int(((units["s"] == s) & (units["g"] == g) & (units["i"] == i)).sum())

    rho = {}
    for s in (1, 0):
        interference = counts[f"I{s}"]
        controls = interference + counts[f"C{s}"]
        rho[s] = interference / controls if controls else float("nan")

    td_missing = []
    for s, g in TD_CELLS:
        n = counts[f"T{s}"] if g else counts[f"I{s}"] + counts[f"C{s}"]
        if n == 0:
            td_missing.append(f"T{s}" if g else f"I{s}+C{s}")
    dtd_missing = [label for label, n in counts.items() if n == 0]

    return PartitionSummary(
        counts=counts, rho=rho, td_missing=tuple(td_missing), dtd_missing=tuple(dtd_missing)
    )


Selector = Union[Callable[[int, int, int], bool], Mapping[str, int]]


def _selector_fn(selector):
    if callable(selector):
        return selector
    wanted = dict(selector)
    unknown = set(wanted) - set(INDICATORS)
    if unknown:
        raise PanelValidationError(f"unknown selector keys: {sorted(unknown)}")
    return lambda s, g, i: all({"s": s, "g": g, "i": i}[k] == v for k, v in wanted.items())


def subset(data, selector):
    """Rows whose (s, g, i) cell satisfies the selector

    selector is either a predicate f(s, g, i) -> bool or a mapping such as
    {"i": 0} (target and pure-control cells) or {"g": 0}.
    """
    keep_cell = _selector_fn(selector)
    keep = {cell: bool(keep_cell(*cell)) for cell in CELL_LABELS}
    frame = data.frame
    mask = np.fromiter(
        (keep[(s, g, i)] for s, g, i in zip(frame["s"], frame["g"], frame["i"])),
        dtype=bool,
        count=len(frame),
    )
    if not mask.any():
        raise PanelValidationError("subset is empty: no rows satisfy the cell selector")
    out = frame[mask].reset_index(drop=True)
    return PanelDataset(frame=out, covariate_names=data.covariate_names, metadata=dict(data.metadata))


def to_two_period(data, pre, post):
    """Collapse to t in {0, 1} using within-unit outcome means over each window"""
    pre = sorted(set(int(t) for t in pre))
    post = sorted(set(int(t) for t in post))
    if not pre or not post:
        raise PanelValidationError("pre and post windows must be non-empty")
    if set(pre) & set(post):
        raise PanelValidationError("pre and post windows overlap")

    frame = data.frame
    pre_rows = frame[frame["time"].isin(pre)]
    post_rows = frame[frame["time"].isin(post)]
    if pre_rows.empty or post_rows.empty:
        raise PanelValidationError("no observations fall in the pre or post window")

    pre_mean = pre_rows.groupby("unit", sort=True)["outcome"].mean()
    post_mean = post_rows.groupby("unit", sort=True)["outcome"].mean()
    keep = pre_mean.index.intersection(post_mean.index)
    if len(keep) == 0:
        raise PanelValidationError("no unit is observed in both windows")
    n_dropped = data.n_units - len(keep)
    if n_dropped:
        logger.warning(f"to_two_period dropped {n_dropped} units missing a window")

    # earliest pre-period row carries indicators, cluster and covariates
    first = pre_rows.sort_values(["unit", "time"], kind="mergesort").groupby("unit", sort=True).first()
    first = first.loc[keep]

    parts = []
    for t, means in ((0, pre_mean), (1, post_mean)):
        part = first.drop(columns=["time", "outcome"]).copy()
        part["time"] = np.int64(t)
        part["outcome"] = means.loc[keep].astype(float)
        parts.append(part.reset_index())
    out = pd.concat(parts, ignore_index=True)
    out = out[BASE_COLUMNS + list(data.covariate_names)]
    out = out.sort_values(["unit", "time"], kind="mergesort").reset_index(drop=True)

    metadata = dict(data.metadata)
    metadata.update({"pre_window": pre, "post_window": post, "n_dropped": n_dropped})
    return PanelDataset(frame=out, covariate_names=data.covariate_names, metadata=metadata)


def split_windows(times, post_from, pre_through=None):
    """Pre/post windows around the first treated period"""
    pre = [t for t in times if t < post_from and (pre_through is None or t <= pre_through)]
    post = [t for t in times if t >= post_from]
    return pre, post


def unit_changes(data):
    """Wide per-unit table of a two-period panel: y0, y1, dy, indicators, covariates"""
    times = data.time_values
    if len(times) != 2:
        raise PanelValidationError(
            f"expected exactly two periods, found {len(times)}; use to_two_period first"
        )
    frame = data.frame
    wide = frame.pivot(index="unit", columns="time", values="outcome")
    complete = wide.dropna()
    if len(complete) < len(wide):
        logger.warning(f"{len(wide) - len(complete)} units lack one of the two periods")
    table = data.unit_frame().loc[complete.index].copy()
    table["y0"] = complete[times[0]].astype(float)
    table["y1"] = complete[times[1]].astype(float)
    table["dy"] = table["y1"] - table["y0"]
    return table
