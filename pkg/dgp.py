"""Seeded data-generating processes for the two simulation designs.

sim1: a balanced ten-period panel following a three-way fixed-effects model
with random-walk time effects and optional spillover adders.
sim2: a two-period design whose cell assignment and outcome trends depend on
Kang-Schafer covariates.
"""

from dataclasses import asdict, dataclass, fields, replace
from enum import Enum
from typing import Optional, Tuple

import numpy as np
import pandas as pd

from errors import ConfigError
from logging_config import setup_logging
from paneldata import PanelDataset
from rng import make_rng

logger = setup_logging("dgp")

COVARIATE_NAMES = ("x1", "x2", "x3", "x4")

# assignment order of the four (s, g) cells
SUBGROUP_ORDER = ((0, 0), (0, 1), (1, 0), (1, 1))


class Sim1Scenario(str, Enum):
    SUTVA = "SUTVA"
    S1 = "S1"
    S2 = "S2"
    S2A = "S2A"


class Sim2Scenario(str, Enum):
    SUTVA = "SUTVA"
    SPILL = "SPILL"


def _round_half_up(x):
    return int(np.floor(x + 0.5))


def _from_dict(cls, payload):
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(payload) - known)
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} fields: {', '.join(unknown)}")
    values = {k: tuple(v) if isinstance(v, list) else v for k, v in payload.items()}
    return cls(**values)


@dataclass(frozen=True)
class Sim1Config:
    n_units: int = 2000
    n_periods: int = 10
    treat_from: int = 6
    delta: float = 0.20
    psi1: float = 0.0
    psi2: float = 0.0
    interference_share: float = 0.10
    mu_u: float = 0.90
    sigma_u: float = 1.0
    sigma_t: float = 0.05
    sigma_eps: float = 0.50
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.interference_share < 1.0:
            raise ConfigError(f"interference_share must be in (0, 1), got {self.interference_share}")
        if self.n_units <= 0 or self.n_units % 4:
            raise ConfigError(f"n_units must be a positive multiple of 4, got {self.n_units}")
        if self.n_periods < 2:
            raise ConfigError("n_periods must be at least 2")
        if not 1 < self.treat_from <= self.n_periods:
            raise ConfigError(f"treat_from must lie in 2..{self.n_periods}, got {self.treat_from}")
        if min(self.sigma_u, self.sigma_t, self.sigma_eps) < 0:
            raise ConfigError("standard deviations must be non-negative")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, payload):
        return _from_dict(cls, payload)


@dataclass(frozen=True)
class Sim2Config:
    n_units: int = 2000
    delta: float = 50.0
    psi: float = 25.0
    interference_share: float = 0.5
    gamma00: Tuple[float, ...] = (-1.0, 0.5, -0.25, -0.1)
    gamma01: Tuple[float, ...] = (-0.5, 2.0, 0.5, -0.2)
    gamma10: Tuple[float, ...] = (3.0, -1.5, 0.75, -0.3)
    f11: float = 1.0
    ps_scale_treated: float = 0.05
    ps_scale_placebo: float = 0.2
    beta1: Tuple[float, ...] = (27.4, 13.7, 13.7, 13.7)
    beta0: Optional[Tuple[float, ...]] = None
    seed: int = 0

    def __post_init__(self):
        if self.beta0 is None:
            object.__setattr__(self, "beta0", tuple(0.5 * b for b in self.beta1))
        for name in ("gamma00", "gamma01", "gamma10", "beta1", "beta0"):
            value = tuple(float(v) for v in getattr(self, name))
            if len(value) != len(COVARIATE_NAMES):
                raise ConfigError(f"{name} must have {len(COVARIATE_NAMES)} entries, got {len(value)}")
            object.__setattr__(self, name, value)
        if self.n_units < 8:
            raise ConfigError(f"n_units must be at least 8, got {self.n_units}")
        if not 0.0 < self.interference_share < 1.0:
            raise ConfigError(f"interference_share must be in (0, 1), got {self.interference_share}")

    @property
    def gammas(self):
        return (self.gamma00, self.gamma01, self.gamma10)

    def to_dict(self):
        out = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in out.items()}

    @classmethod
    def from_dict(cls, payload):
        return _from_dict(cls, payload)


@dataclass(frozen=True)
class Truth:
    delta: float
    psi1: float = 0.0
    psi2: float = 0.0

    @property
    def psi(self):
        return self.psi1


@dataclass(frozen=True, eq=False)
class GeneratedPanel:
    data: PanelDataset
    truth: Truth
    scenario: str


@dataclass(frozen=True)
class ScenarioSpec:
    """One named grid point of a simulation study"""

    id: str
    design: str
    scenario: str
    config: object

    def to_dict(self):
        return {
            "id": self.id,
            "design": self.design,
            "scenario": self.scenario,
            "config": self.config.to_dict(),
        }

    @classmethod
    def from_dict(cls, payload):
        try:
            design = payload["design"]
            config_cls = {"sim1": Sim1Config, "sim2": Sim2Config}[design]
            scenario = payload["scenario"]
            (Sim1Scenario if design == "sim1" else Sim2Scenario)(scenario)
            return cls(
                id=str(payload["id"]),
                design=design,
                scenario=scenario,
                config=config_cls.from_dict(payload.get("config", {})),
            )
        except (KeyError, ValueError) as e:
            if isinstance(e, ConfigError):
                raise
            raise ConfigError(f"invalid grid entry {payload!r}: {str(e)}")

    def generate(self, seed):
        config = replace(self.config, seed=seed)
        if self.design == "sim1":
            return gen_sim1(config, self.scenario)
        return gen_sim2(config, self.scenario)


def _random_walk(rng, n_periods, sigma):
    return np.cumsum(rng.normal(0.0, sigma, size=n_periods))


def _pick_interference(rng, candidates, share):
    n_pick = _round_half_up(share * len(candidates))
    return rng.choice(candidates, size=n_pick, replace=False)


def gen_sim1(cfg, scenario=Sim1Scenario.SUTVA):
    """Balanced panel from the three-way fixed-effects DGP plus a spillover scenario"""
    scenario = Sim1Scenario(scenario)
    if scenario == Sim1Scenario.S1 and cfg.psi2 != 0:
        raise ConfigError("scenario S1 requires psi2 = 0")

    rng = make_rng(cfg.seed, "sim1")
    n, n_periods = cfg.n_units, cfg.n_periods
    quarter = n // 4

    order = rng.permutation(n)
    s = np.zeros(n, dtype=np.int64)
    g = np.zeros(n, dtype=np.int64)
    i = np.zeros(n, dtype=np.int64)
    for k, (cell_s, cell_g) in enumerate(((1, 1), (1, 0), (0, 1), (0, 0))):
        members = order[k * quarter : (k + 1) * quarter]
        s[members] = cell_s
        g[members] = cell_g
    for stratum in (1, 0):
        controls = np.flatnonzero((s == stratum) & (g == 0))
        i[_pick_interference(rng, controls, cfg.interference_share)] = 1

    beta_unit = rng.normal(cfg.mu_u, cfg.sigma_u, size=n)
    beta_t = _random_walk(rng, n_periods, cfg.sigma_t)
    beta_gt = _random_walk(rng, n_periods, cfg.sigma_t)
    beta_st = _random_walk(rng, n_periods, cfg.sigma_t)
    eps = rng.normal(0.0, cfg.sigma_eps, size=(n, n_periods))

    periods = np.arange(1, n_periods + 1)
    treated = (periods >= cfg.treat_from).astype(float)
    sf, gf, inf = s[:, None].astype(float), g[:, None].astype(float), i[:, None].astype(float)
    y = (
        beta_unit[:, None]
        + beta_t[None, :]
        + beta_gt[None, :] * gf
        + beta_st[None, :] * sf
        + cfg.delta * sf * gf * treated[None, :]
        + eps
    )

    psi1 = psi2 = 0.0
    if scenario != Sim1Scenario.SUTVA:
        psi1 = cfg.psi1
        y = y + psi1 * sf * inf * treated[None, :]
    if scenario == Sim1Scenario.S2:
        psi2 = cfg.psi2
        y = y + psi2 * (1.0 - sf) * inf * treated[None, :]
    elif scenario == Sim1Scenario.S2A:
        psi2 = cfg.psi2
        y = y + psi2 * (1.0 - sf) * gf * treated[None, :]

    frame = pd.DataFrame(
        {
            "unit": np.repeat(np.arange(n), n_periods),
            "time": np.tile(periods, n),
            "outcome": y.ravel(),
            "s": np.repeat(s, n_periods),
            "g": np.repeat(g, n_periods),
            "i": np.repeat(i, n_periods),
        }
    )
    frame["cluster"] = frame["unit"]
    data = PanelDataset.from_frame(
        frame,
        metadata={"source": "sim1", "scenario": scenario.value, "post_from": cfg.treat_from, "seed": cfg.seed},
    )
    return GeneratedPanel(data=data, truth=Truth(cfg.delta, psi1, psi2), scenario=scenario.value)


def kang_schafer_transform(z):
    """Raw (unstandardized) Kang-Schafer covariates of an n x 4 normal draw"""
    z = np.asarray(z, dtype=float)
    z1, z2, z3, z4 = z.T
    return np.column_stack(
        [
            np.exp(0.5 * z1),
            10.0 + z2 / (1.0 + np.exp(z1)),
            (0.6 + z1 * z3 / 25.0) ** 3,
            (20.0 + z1 + z4) ** 2,
        ]
    )


def kang_schafer_covariates(n, seed):
    """n x 4 Kang-Schafer covariates, standardized over the sample (ddof=1)"""
    if n < 2:
        raise ConfigError("kang_schafer_covariates needs n >= 2")
    z = make_rng(seed, "covariates").standard_normal((n, 4))
    raw = kang_schafer_transform(z)
    return (raw - raw.mean(axis=0)) / raw.std(axis=0, ddof=1)


def subgroup_probabilities(X, gammas=None, f11=1.0, scales=(0.2, 0.2, 0.05)):
    """Softmax cell probabilities in the order (0,0), (0,1), (1,0), (1,1)"""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if gammas is None:
        gammas = Sim2Config().gammas
    predictors = [scale * (X @ np.asarray(gamma, dtype=float)) for scale, gamma in zip(scales, gammas)]
    predictors.append(np.full(X.shape[0], float(f11)))
    f = np.column_stack(predictors)
    f = f - f.max(axis=1, keepdims=True)
    expf = np.exp(f)
    return expf / expf.sum(axis=1, keepdims=True)


def assign_subgroups(X, gammas=None, seed=0, f11=1.0, scales=(0.2, 0.2, 0.05)):
    """(s, g) labels from one uniform draw per unit against cumulative softmax thresholds"""
    probs = subgroup_probabilities(X, gammas, f11, scales)
    u = make_rng(seed, "assignment").uniform(size=probs.shape[0])
    cumulative = np.cumsum(probs, axis=1)[:, :-1]
    index = (u[:, None] >= cumulative).sum(axis=1)
    cells = np.asarray(SUBGROUP_ORDER)[index]
    return cells[:, 0].astype(np.int64), cells[:, 1].astype(np.int64)


def gen_sim2(cfg, scenario=Sim2Scenario.SUTVA):
    """Two-period panel with covariate-driven assignment and trends"""
    scenario = Sim2Scenario(scenario)
    n = cfg.n_units
    X = kang_schafer_covariates(n, cfg.seed)
    s, g = assign_subgroups(
        X,
        cfg.gammas,
        cfg.seed,
        cfg.f11,
        (cfg.ps_scale_placebo, cfg.ps_scale_placebo, cfg.ps_scale_treated),
    )

    rng = make_rng(cfg.seed, "sim2")
    i = np.zeros(n, dtype=np.int64)
    for stratum in (1, 0):
        controls = np.flatnonzero((s == stratum) & (g == 0))
        i[_pick_interference(rng, controls, cfg.interference_share)] = 1

    xb1 = X @ np.asarray(cfg.beta1)
    xb0 = X @ np.asarray(cfg.beta0)
    nu = rng.normal(2010.0 * g + s * g * xb1 + (1 - s) * g * xb0, 1.0)
    eps = rng.standard_normal((n, 2))
    f_reg = 2010.0 + s * xb1 + (1 - s) * xb0

    psi = cfg.psi if scenario == Sim2Scenario.SPILL else 0.0
    y0 = f_reg + nu + eps[:, 0]
    y1 = 2.0 * f_reg + nu + cfg.delta * s * g + psi * s * i + eps[:, 1]

    frame = pd.DataFrame(
        {
            "unit": np.repeat(np.arange(n), 2),
            "time": np.tile([0, 1], n),
            "outcome": np.column_stack([y0, y1]).ravel(),
            "s": np.repeat(s, 2),
            "g": np.repeat(g, 2),
            "i": np.repeat(i, 2),
        }
    )
    frame["cluster"] = frame["unit"]
    for k, name in enumerate(COVARIATE_NAMES):
        frame[name] = np.repeat(X[:, k], 2)
    data = PanelDataset.from_frame(
        frame,
        covariate_names=COVARIATE_NAMES,
        metadata={"source": "sim2", "scenario": scenario.value, "post_from": 1, "seed": cfg.seed},
    )
    return GeneratedPanel(data=data, truth=Truth(cfg.delta, psi, 0.0), scenario=scenario.value)


def table1_scenarios(shares=(0.10, 0.50), n_units=2000):
    """Panel-design grid: SUTVA, 1.0-1.2 (psi1 only) and 2.0/2.1 (psi1, psi2) per share"""
    presets = (
        ("SUTVA", Sim1Scenario.SUTVA, 0.0, 0.0),
        ("1.0", Sim1Scenario.S1, 0.05, 0.0),
        ("1.1", Sim1Scenario.S1, 0.10, 0.0),
        ("1.2", Sim1Scenario.S1, 0.20, 0.0),
        ("2.0", Sim1Scenario.S2, 0.10, -0.10),
        ("2.1", Sim1Scenario.S2, 0.10, 0.10),
    )
    specs = []
    for share in shares:
        for name, scenario, psi1, psi2 in presets:
            config = Sim1Config(n_units=n_units, psi1=psi1, psi2=psi2, interference_share=share)
            specs.append(ScenarioSpec(f"{name}@{round(share * 100)}", "sim1", scenario.value, config))
    return specs


def table2_scenarios(sizes=(2000, 5000, 10000)):
    """Two-period covariate grid: SUTVA and SPILL at each sample size"""
    specs = []
    for n in sizes:
        for scenario in (Sim2Scenario.SUTVA, Sim2Scenario.SPILL):
            specs.append(ScenarioSpec(f"{scenario.value}@N{n}", "sim2", scenario.value, Sim2Config(n_units=n)))
    return specs
