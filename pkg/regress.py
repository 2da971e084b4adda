"""Least squares with cluster-robust covariance, within-unit demeaning,
logistic regression by IRLS and Wald tests."""

from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np
import pandas as pd
from scipy import linalg, stats
from scipy.special import expit

from errors import (
    EstimationError,
    PanelValidationError,
    RankDeficientError,
    SeparationError,
    SingularMatrixError,
)
from logging_config import setup_logging

logger = setup_logging("regress")

PRUNE_TOL = 1e-9
WALD_COND_LIMIT = 1e10


@dataclass(frozen=True)
class DesignMatrix:
    """Named dense regressors"""

    values: np.ndarray
    column_names: Tuple[str, ...]
    pruned: Tuple[str, ...] = ()

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.ndim == 1:
            values = values.reshape(-1, 1)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "column_names", tuple(self.column_names))
        if values.shape[1] != len(self.column_names):
            raise ValueError(
                f"{values.shape[1]} columns but {len(self.column_names)} names"
            )

    @classmethod
    def from_columns(cls, columns):
        """Build from a DataFrame or an ordered mapping name -> vector"""
        if isinstance(columns, pd.DataFrame):
            return cls(columns.to_numpy(dtype=float), tuple(columns.columns))
        names = tuple(columns)
        values = np.column_stack([np.asarray(columns[c], dtype=float) for c in names])
        return cls(values, names)

    @property
    def n_rows(self):
        return self.values.shape[0]

    @property
    def n_cols(self):
        return self.values.shape[1]

    def to_frame(self):
        return pd.DataFrame(self.values, columns=list(self.column_names))

    def prune(self, tol=PRUNE_TOL):
        """Drop columns lying in the span of the columns before them

        Column j is dropped when the diagonal of the unpivoted QR factor is
        below tol times the column norm, so among a collinear set the last
        column in order is the one removed.
        """
        if self.n_cols == 0:
            return self
        norms = np.linalg.norm(self.values, axis=0)
        r = np.linalg.qr(self.values, mode="r")
        diag = np.zeros(self.n_cols)
        m = min(r.shape)
        diag[:m] = np.abs(np.diag(r)[:m])
        keep = (norms > 0) & (diag > tol * norms)
        if keep.all():
            return self
        dropped = tuple(n for n, k in zip(self.column_names, keep) if not k)
        logger.warning(f"Pruned collinear columns: {', '.join(dropped)}")
        return DesignMatrix(
            self.values[:, keep],
            tuple(n for n, k in zip(self.column_names, keep) if k),
            self.pruned + dropped,
        )


@dataclass(frozen=True)
class FitResult:
    coefficients: pd.Series
    vcov: pd.DataFrame
    residuals: np.ndarray
    n_obs: int
    n_clusters: int
    df: int
    pruned_columns: Tuple[str, ...] = ()
    fitted: Optional[np.ndarray] = field(default=None, repr=False)
    n_iter: Optional[int] = None

    def se(self):
        return pd.Series(
            np.sqrt(np.clip(np.diag(self.vcov.to_numpy()), 0.0, None)),
            index=self.coefficients.index,
        )

    def coef(self, name):
        if name not in self.coefficients.index:
            raise EstimationError(f"coefficient {name!r} not in fit (pruned: {self.pruned_columns})")
        return float(self.coefficients[name])

    def stderr(self, name):
        if name not in self.coefficients.index:
            raise EstimationError(f"coefficient {name!r} not in fit (pruned: {self.pruned_columns})")
        return float(np.sqrt(max(self.vcov.loc[name, name], 0.0)))


@dataclass(frozen=True)
class TestResult:
    statistic: float
    df: int
    p_value: float


def _as_design(X):
    if isinstance(X, DesignMatrix):
        return X
    return DesignMatrix.from_columns(X)


def cluster_meat(scores, clusters):
    """Sum over clusters of the outer products of within-cluster score sums"""
    codes, uniques = pd.factorize(np.asarray(clusters), sort=False)
    summed = pd.DataFrame(scores).groupby(codes, sort=True).sum().to_numpy()
    return summed.T @ summed, len(uniques)


def ols_fit(X, y, clusters, cr1=False):
    """OLS by QR with the CR0 cluster sandwich (CR1 when cr1=True)"""
    design = _as_design(X)
    y = np.asarray(y, dtype=float)
    clusters = np.asarray(clusters)
    if design.n_rows != len(y) or len(y) != len(clusters):
        raise EstimationError(
            f"dimension mismatch: X has {design.n_rows} rows, y {len(y)}, clusters {len(clusters)}"
        )

    design = design.prune()
    n, k = design.values.shape
    if k == 0:
        raise RankDeficientError("design has no columns left after pruning")
    if n < k:
        raise RankDeficientError(f"{n} rows for {k} columns")

    n_clusters = int(pd.Series(clusters).nunique())
    if n_clusters < 2:
        raise EstimationError(f"cluster-robust covariance needs at least 2 clusters, got {n_clusters}")

    q, r = linalg.qr(design.values, mode="economic")
    beta = linalg.solve_triangular(r, q.T @ y)
    resid = y - design.values @ beta

    r_inv = linalg.solve_triangular(r, np.eye(k))
    bread = r_inv @ r_inv.T
    meat, n_clusters = cluster_meat(design.values * resid[:, None], clusters)
    vcov = bread @ meat @ bread
    if cr1:
        vcov = vcov * (n_clusters / (n_clusters - 1)) * ((n - 1) / (n - k))
    vcov = (vcov + vcov.T) / 2.0

    names = list(design.column_names)
    return FitResult(
        coefficients=pd.Series(beta, index=names),
        vcov=pd.DataFrame(vcov, index=names, columns=names),
        residuals=resid,
        n_obs=n,
        n_clusters=n_clusters,
        df=n - k,
        pruned_columns=design.pruned,
        fitted=y - resid,
    )


def within_demean(data, columns, units=None):
    """Subtract each unit's mean from the named columns

    data is a PanelDataset or a DataFrame; for a DataFrame the unit labels
    come from `units` or from its "unit" column.
    """
    frame = getattr(data, "frame", data)
    if units is None:
        if "unit" not in frame.columns:
            raise PanelValidationError("no unit labels for demeaning", column="unit")
        units = frame["unit"]
    columns = list(columns)
    unknown = [c for c in columns if c not in frame.columns]
    if unknown:
        raise PanelValidationError(f"unknown column: {unknown[0]}", column=unknown[0])

    block = frame[columns].astype(float)
    keys = np.asarray(units)
    demeaned = block - block.groupby(keys, sort=False).transform("mean")
    return DesignMatrix(demeaned.to_numpy(), tuple(columns))


def _has_intercept(values):
    return any(
        np.all(values[:, j] == values[0, j]) and values[0, j] != 0 for j in range(values.shape[1])
    )


def _loglik(values, y, beta):
    eta = values @ beta
    return float(np.sum(y * eta - np.logaddexp(0.0, eta)))


def logit_fit(X, y, max_iter=100, tol=1e-8, max_norm=1e3):
    """Binary logit by Newton/IRLS with step halving

    Stops when the largest score component is below tol. A coefficient norm
    above max_norm, or fitted probabilities reproducing every label, raises
    SeparationError.
    """
    design = _as_design(X)
    y = np.asarray(y, dtype=float)
    if design.n_rows != len(y):
        raise EstimationError(f"dimension mismatch: X has {design.n_rows} rows, y {len(y)}")
    if not np.isin(y, (0.0, 1.0)).all():
        raise EstimationError("logit outcome must be binary (0/1)")
    if y.min() == y.max():
        raise EstimationError("logit outcome has a single class")
    if not _has_intercept(design.values):
        raise EstimationError("logit design needs an intercept column")

    design = design.prune()
    values = design.values
    n, k = values.shape
    beta = np.zeros(k)
    loglik = _loglik(values, y, beta)

    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        p = expit(values @ beta)
        score = values.T @ (y - p)
        if np.linalg.norm(beta) > max_norm:
            raise SeparationError(
                f"logit coefficients diverged (norm {np.linalg.norm(beta):.3g}); "
                "the covariates separate the classes"
            )
        if np.max(np.abs(score)) < tol:
            break
        w = p * (1.0 - p)
        hessian = values.T @ (values * w[:, None])
        try:
            step = linalg.solve(hessian, score, assume_a="pos")
        except (linalg.LinAlgError, ValueError):
            if np.linalg.norm(beta) > 10.0:
                raise SeparationError("logit information matrix became singular; classes are separated")
            raise EstimationError("logit information matrix is singular")

        t = 1.0
        for _ in range(30):
            candidate = beta + t * step
            new_loglik = _loglik(values, y, candidate)
            if new_loglik >= loglik - 1e-12 * abs(loglik):
                break
            t *= 0.5
        beta, loglik = candidate, new_loglik
    else:
        logger.warning(f"logit did not converge in {max_iter} iterations (max score {np.max(np.abs(score)):.3g})")

    p = expit(values @ beta)
    if np.all(np.abs(y - p) < 1e-6):
        raise SeparationError("logit predicts every label perfectly; the covariates separate the classes")

    w = p * (1.0 - p)
    hessian = values.T @ (values * w[:, None])
    try:
        vcov = linalg.inv(hessian)
    except linalg.LinAlgError:
        raise SeparationError("logit information matrix is singular at the solution")
    vcov = (vcov + vcov.T) / 2.0

    names = list(design.column_names)
    return FitResult(
        coefficients=pd.Series(beta, index=names),
        vcov=pd.DataFrame(vcov, index=names, columns=names),
        residuals=y - p,
        n_obs=n,
        n_clusters=n,
        df=n - k,
        pruned_columns=design.pruned,
        fitted=p,
        n_iter=n_iter,
    )


def joint_wald(fit, coefficient_names):
    """Chi-square Wald test that the named coefficients are jointly zero"""
    names = list(coefficient_names)
    if not names:
        raise EstimationError("joint test needs at least one coefficient")
    missing = [c for c in names if c not in fit.coefficients.index]
    if missing:
        raise EstimationError(f"coefficient {missing[0]!r} not in fit (pruned: {fit.pruned_columns})")

    c = fit.coefficients[names].to_numpy(dtype=float)
    if np.max(np.abs(c)) <= 1e-10:
        return TestResult(statistic=0.0, df=len(names), p_value=1.0)

    v = fit.vcov.loc[names, names].to_numpy(dtype=float)
    if not np.all(np.isfinite(v)) or not np.any(v):
        raise SingularMatrixError(f"covariance block of {names} is singular")
    with np.errstate(divide="ignore", invalid="ignore"):
        cond = np.linalg.cond(v)
    if not np.isfinite(cond) or cond > WALD_COND_LIMIT:
        raise SingularMatrixError(f"covariance block of {names} is singular (condition {cond:.3g})")
    try:
        stat = float(c @ linalg.solve(v, c, assume_a="sym"))
    except linalg.LinAlgError:
        raise SingularMatrixError(f"covariance block of {names} is singular")
    stat = max(stat, 0.0)
    return TestResult(statistic=stat, df=len(names), p_value=float(stats.chi2.sf(stat, len(names))))


def coef_table(fit, names=None):
    """Estimate, standard error, z and two-sided normal p-value per coefficient"""
    names = list(fit.coefficients.index if names is None else names)
    coef = fit.coefficients[names].to_numpy(dtype=float)
    se = fit.se()[names].to_numpy(dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(se > 0, coef / se, np.nan)
    p = np.where(np.isfinite(z), 2.0 * stats.norm.sf(np.abs(z)), np.where(coef == 0, 1.0, 0.0))
    return pd.DataFrame({"term": names, "coef": coef, "se": se, "z": z, "p": p})
