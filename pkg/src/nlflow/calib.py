"""Calibration of microscopic models from recorded leader-follower drives.

A drive record holds the ego vehicle's speed and gap together with the
speeds of up to three leaders and one follower, all sampled uniformly.
The ego acceleration law is one of the three baseline variants (plain
car-following, look-ahead, nudging); its parameters are fit by a genetic
algorithm minimizing the summed relative speed and gap error of a forward
rollout against the recording.

Rollouts treat the leader and follower signals as exogenous inputs held
piecewise-linear between samples and integrate the ego ODE with RK4 at
the recording period.  Fitness evaluation is vectorized across the GA
population, so one generation costs a handful of array operations per
time step.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

__all__ = [
    "DriveRecord",
    "ModelSpec",
    "GAConfig",
    "CalibrationResult",
    "VARIANTS",
    "load_records",
    "rollout",
    "calibration_error",
    "ga_calibrate",
    "default_bounds",
    "parameter_names",
]

VARIANTS = ("car_following", "look_ahead", "nudging")

_BASE_PARAMS = ("alpha0", "beta0", "v_max", "s_st", "s_go")
_EXTRA_PARAMS = {
    "car_following": (),
    "look_ahead": ("beta_m1", "beta_m2"),
    "nudging": ("beta_1",),
}


def parameter_names(variant: str):
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    return _BASE_PARAMS + _EXTRA_PARAMS[variant]


@dataclass(frozen=True)
class DriveRecord:
    """One recorded drive: ego state plus exogenous neighbor speeds."""

    exp_id: str
    t: np.ndarray
    v0: np.ndarray
    s0: np.ndarray
    v_lead: np.ndarray  # (n, 3); columns may be NaN when not recorded
    v_follow: np.ndarray  # (n,); may be NaN when not recorded
    scenario: str

    def __post_init__(self):
        n = self.t.shape[0]
        if n < 2:
            raise ValueError("a record needs at least 2 samples")
        dts = np.diff(self.t)
        if np.any(dts <= 0):
            raise ValueError("timestamps must be strictly increasing")
        if not np.allclose(dts, dts[0], rtol=1e-6, atol=1e-9):
            raise ValueError("sampling must be uniform")
        for name in ("v0", "s0", "v_follow"):
            if getattr(self, name).shape != (n,):
                raise ValueError(f"{name} must match the time axis")
        if self.v_lead.shape != (n, 3):
            raise ValueError("v_lead must have shape (n, 3)")
        if np.any(self.v0 < 0):
            raise ValueError("speeds must be nonnegative")
        if np.any(self.s0 <= 0):
            raise ValueError("gaps must be positive")

    @property
    def dt(self) -> float:
        return float(self.t[1] - self.t[0])

    def __len__(self) -> int:
        return self.t.shape[0]


@dataclass(frozen=True)
class ModelSpec:
    """A model variant with a concrete parameter assignment."""

    variant: str
    params: dict

    def __post_init__(self):
        names = parameter_names(self.variant)
        missing = [n for n in names if n not in self.params]
        extra = [n for n in self.params if n not in names]
        if missing or extra:
            raise ValueError(
                f"variant {self.variant!r} expects parameters {names}; "
                f"missing {missing}, unexpected {extra}"
            )
        for n, v in self.params.items():
            if not np.isfinite(v):
                raise ValueError(f"parameter {n} must be finite")
        # the optimal-velocity branch needs a nonempty linear region
        if self.params["s_go"] <= self.params["s_st"]:
            raise ValueError("s_go must exceed s_st")

    def vector(self) -> np.ndarray:
        return np.array([self.params[n] for n in parameter_names(self.variant)])

    def to_json(self) -> str:
        return json.dumps(
            {"variant": self.variant, "params": dict(self.params)},
            indent=2, sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "ModelSpec":
        obj = json.loads(text)
        return cls(variant=obj["variant"], params=dict(obj["params"]))

    @classmethod
    def from_vector(cls, variant: str, vec) -> "ModelSpec":
        names = parameter_names(variant)
        vec = np.asarray(vec, float)
        if vec.shape != (len(names),):
            raise ValueError("parameter vector length mismatch")
        return cls(variant=variant, params=dict(zip(names, vec.tolist())))


_CSV_COLUMNS = ("exp_id", "t", "v0", "s0", "v_l1", "v_l2", "v_l3", "v_f1",
                "scenario")
_REQUIRED_COLUMNS = ("exp_id", "t", "v0", "s0", "scenario")
_SCENARIOS = ("normal", "nudging", "lookahead")


def load_records(path) -> list:
    """Read drive records from CSV, strictly validating the schema.

    Columns: ``exp_id,t,v0,s0,v_l1,v_l2,v_l3,v_f1,scenario``; the leader
    and follower speed columns may be absent or NaN where a scenario does
    not use them.  Malformed rows raise with their file row numbers
    (header = row 1).
    """
    try:
        df = pd.read_csv(path)
    except pd.errors.EmptyDataError:
        warnings.warn(f"{path}: empty file, no records")
        return []
    unknown = [c for c in df.columns if c not in _CSV_COLUMNS]
    missing = [c for c in _REQUIRED_COLUMNS if c not in df.columns]
    if unknown or missing:
        raise ValueError(
            f"{path}: schema mismatch; missing {missing}, unknown {unknown}"
        )
    if len(df) == 0:
        warnings.warn(f"{path}: no data rows, no records")
        return []
    for col in ("v_l1", "v_l2", "v_l3", "v_f1"):
        if col not in df.columns:
            df[col] = np.nan

    # file row number of each frame row: header is line 1
    rownum = df.index.to_numpy() + 2
    bad = (
        df["t"].isna() | df["v0"].isna() | df["s0"].isna()
        | df["exp_id"].isna() | ~df["scenario"].isin(_SCENARIOS)
        | (df["v0"] < 0) | (df["s0"] <= 0)
    )
    if bad.any():
        rows = ", ".join(str(r) for r in rownum[bad.to_numpy()][:20])
        raise ValueError(f"{path}: malformed rows: {rows}")

    records = []
    for exp_id, group in df.groupby("exp_id", sort=False):
        scenarios = group["scenario"].unique()
        if len(scenarios) != 1:
            raise ValueError(f"{path}: experiment {exp_id!r} mixes scenarios")
        if len(group) < 2:
            raise ValueError(
                f"{path}: experiment {exp_id!r} needs at least 2 samples"
            )
        t = group["t"].to_numpy(float)
        if np.any(np.diff(t) <= 0):
            raise ValueError(
                f"{path}: experiment {exp_id!r} has non-monotone timestamps"
            )
        records.append(DriveRecord(
            exp_id=str(exp_id),
            t=t,
            v0=group["v0"].to_numpy(float),
            s0=group["s0"].to_numpy(float),
            v_lead=group[["v_l1", "v_l2", "v_l3"]].to_numpy(float),
            v_follow=group["v_f1"].to_numpy(float),
            scenario=str(scenarios[0]),
        ))
    return records


def _exogenous_stages(y: np.ndarray):
    """Sample a piecewise-linear signal at step start, midpoint, and end."""
    y0 = y[:-1]
    y1 = y[1:]
    return y0, 0.5 * (y0 + y1), y1


def _accel_population(theta: np.ndarray, variant: str, v, s, vl1, vl2, vl3,
                      vf1):
    """Ego acceleration for a (pop, d) parameter block at one stage.

    ``v`` and ``s`` are (pop,) states; the exogenous speeds are scalars.
    """
    alpha0 = theta[:, 0]
    beta0 = theta[:, 1]
    vopt = theta[:, 2] * np.clip(
        (s - theta[:, 3]) / (theta[:, 4] - theta[:, 3]), 0.0, 1.0
    )
    a = alpha0 * (vopt - v) + beta0 * (vl1 - v)
    if variant == "look_ahead":
        a = a + theta[:, 5] * (vl2 - v) + theta[:, 6] * (vl3 - v)
    elif variant == "nudging":
        a = a + theta[:, 5] * (vf1 - v) * (vf1 > v)
    return a


def _rollout_population(theta: np.ndarray, variant: str,
                        record: DriveRecord):
    """RK4 rollout of (pop,) ego states against one record.

    Returns (v_hat, s_hat) of shape (pop, n).  Speeds clamp at zero after
    each step, matching the ring simulator's no-reversing rule.
    """
    pop = theta.shape[0]
    n = len(record)
    dt = record.dt
    vl = np.nan_to_num(record.v_lead, nan=0.0)
    vf = np.nan_to_num(record.v_follow, nan=0.0)
    l1a, l1b, l1c = _exogenous_stages(vl[:, 0])
    l2a, l2b, l2c = _exogenous_stages(vl[:, 1])
    l3a, l3b, l3c = _exogenous_stages(vl[:, 2])
    f1a, f1b, f1c = _exogenous_stages(vf)

    v_hat = np.empty((pop, n))
    s_hat = np.empty((pop, n))
    v = np.full(pop, record.v0[0])
    s = np.full(pop, record.s0[0])
    v_hat[:, 0] = v
    s_hat[:, 0] = s
    for k in range(n - 1):
        kv1 = _accel_population(theta, variant, v, s, l1a[k], l2a[k], l3a[k], f1a[k])
        ks1 = l1a[k] - v
        v2 = v + 0.5 * dt * kv1
        s2 = s + 0.5 * dt * ks1
        kv2 = _accel_population(theta, variant, v2, s2, l1b[k], l2b[k], l3b[k], f1b[k])
        ks2 = l1b[k] - v2
        v3 = v + 0.5 * dt * kv2
        s3 = s + 0.5 * dt * ks2
        kv3 = _accel_population(theta, variant, v3, s3, l1b[k], l2b[k], l3b[k], f1b[k])
        ks3 = l1b[k] - v3
        v4 = v + dt * kv3
        s4 = s + dt * ks3
        kv4 = _accel_population(theta, variant, v4, s4, l1c[k], l2c[k], l3c[k], f1c[k])
        ks4 = l1c[k] - v4
        v = v + dt / 6.0 * (kv1 + 2.0 * kv2 + 2.0 * kv3 + kv4)
        s = s + dt / 6.0 * (ks1 + 2.0 * ks2 + 2.0 * ks3 + ks4)
        np.maximum(v, 0.0, out=v)
        v_hat[:, k + 1] = v
        s_hat[:, k + 1] = s
    return v_hat, s_hat


def rollout(spec: ModelSpec, record: DriveRecord):
    """Predicted (v0, s0) series for one record under one model."""
    theta = spec.vector()[None, :]
    v_hat, s_hat = _rollout_population(theta, spec.variant, record)
    return v_hat[0], s_hat[0]


def _error_population(theta: np.ndarray, variant: str, records) -> np.ndarray:
    err = np.zeros(theta.shape[0])
    for rec in records:
        v_hat, s_hat = _rollout_population(theta, variant, rec)
        dv = (v_hat - rec.v0) / np.maximum(np.abs(rec.v0), 0.1)
        ds = (s_hat - rec.s0) / np.maximum(np.abs(rec.s0), 0.1)
        err += (dv * dv).sum(axis=1) + (ds * ds).sum(axis=1)
    return err


def calibration_error(spec: ModelSpec, records) -> float:
    """Summed squared relative speed and gap error over all records.

    Denominators below 0.1 (m/s or m) are floored at 0.1 to keep
    near-standstill samples from dominating.
    """
    return float(_error_population(spec.vector()[None, :], spec.variant,
                                   records)[0])


def default_bounds(variant: str) -> dict:
    bounds = {
        "alpha0": (0.001, 2.0),
        "beta0": (0.0, 2.0),
        "v_max": (1.0, 40.0),
        "s_st": (0.1, 10.0),
        "s_go": (5.0, 60.0),
    }
    for name in _EXTRA_PARAMS[variant]:
        bounds[name] = (0.0, 1.0)
    return bounds


@dataclass(frozen=True)
class GAConfig:
    population: int = 64
    generations: int = 200
    tournament: int = 3
    crossover_eta: float = 15.0
    mutation_rate: float = 0.1
    mutation_eta: float = 20.0
    elitism: int = 2
    seed: int = 0
    polish: bool = True

    def __post_init__(self):
        if self.population < 2 or self.population % 2:
            raise ValueError("population must be an even number >= 2")
        if self.elitism >= self.population:
            raise ValueError("elitism must leave room for offspring")


@dataclass(frozen=True)
class CalibrationResult:
    spec: ModelSpec
    error: float
    improved: bool  # better than the best initial-population individual
    history: np.ndarray = field(repr=False)  # best error per generation

    def to_json(self) -> str:
        return json.dumps({
            "variant": self.spec.variant,
            "params": dict(self.spec.params),
            "error": self.error,
            "improved": self.improved,
        }, indent=2, sort_keys=True)


def _repair(theta: np.ndarray, lo: np.ndarray, hi: np.ndarray,
            i_sst: int, i_sgo: int) -> np.ndarray:
    np.clip(theta, lo, hi, out=theta)
    # keep the optimal-velocity linear region nonempty
    gap = theta[:, i_sgo] - theta[:, i_sst]
    bad = gap < 0.5
    theta[bad, i_sgo] = theta[bad, i_sst] + 0.5
    return theta


def _sbx_pairs(parents: np.ndarray, eta: float, rng) -> np.ndarray:
    """Simulated binary crossover on consecutive parent pairs."""
    pop, d = parents.shape
    u = rng.random((pop // 2, d))
    beta = np.where(
        u <= 0.5,
        (2.0 * u) ** (1.0 / (eta + 1.0)),
        (0.5 / (1.0 - u)) ** (1.0 / (eta + 1.0)),
    )
    p1 = parents[0::2]
    p2 = parents[1::2]
    c1 = 0.5 * ((1.0 + beta) * p1 + (1.0 - beta) * p2)
    c2 = 0.5 * ((1.0 - beta) * p1 + (1.0 + beta) * p2)
    children = np.empty_like(parents)
    children[0::2] = c1
    children[1::2] = c2
    return children


def _polynomial_mutation(theta: np.ndarray, lo: np.ndarray, hi: np.ndarray,
                         rate: float, eta: float, rng) -> np.ndarray:
    mask = rng.random(theta.shape) < rate
    u = rng.random(theta.shape)
    span = hi - lo
    delta = np.where(
        u < 0.5,
        (2.0 * u) ** (1.0 / (eta + 1.0)) - 1.0,
        1.0 - (2.0 * (1.0 - u)) ** (1.0 / (eta + 1.0)),
    )
    return np.where(mask, theta + delta * span, theta)


def ga_calibrate(variant: str, records, config: GAConfig = GAConfig(),
                 bounds: dict | None = None) -> CalibrationResult:
    """Fit a model variant to records by tournament-GA with SBX crossover.

    Deterministic for a fixed seed.  ``improved`` is False when no
    offspring ever beat the best individual of the initial population.
    An optional simplex polish refines the GA winner inside the bounds.
    """
    if not records:
        raise ValueError("need at least one record")
    names = parameter_names(variant)
    bounds = dict(default_bounds(variant) if bounds is None else bounds)
    missing = [n for n in names if n not in bounds]
    if missing:
        raise ValueError(f"bounds missing for {missing}")
    lo = np.array([bounds[n][0] for n in names])
    hi = np.array([bounds[n][1] for n in names])
    i_sst = names.index("s_st")
    i_sgo = names.index("s_go")
    rng = np.random.default_rng(config.seed)

    pop = _repair(lo + (hi - lo) * rng.random((config.population, len(names))),
                  lo, hi, i_sst, i_sgo)
    fitness = _error_population(pop, variant, records)
    initial_best = float(fitness.min())
    history = [initial_best]

    for _ in range(config.generations):
        order = np.argsort(fitness, kind="stable")
        elite = pop[order[:config.elitism]].copy()
        # tournament selection: smallest fitness among k random picks
        picks = rng.integers(0, config.population,
                             (config.population, config.tournament))
        winners = picks[np.arange(config.population),
                        np.argmin(fitness[picks], axis=1)]
        parents = pop[winners]
        children = _sbx_pairs(parents, config.crossover_eta, rng)
        children = _polynomial_mutation(children, lo, hi,
                                        config.mutation_rate,
                                        config.mutation_eta, rng)
        children = _repair(children, lo, hi, i_sst, i_sgo)
        children[:config.elitism] = elite
        pop = children
        fitness = _error_population(pop, variant, records)
        history.append(float(fitness.min()))

    best_idx = int(np.argmin(fitness))
    best = pop[best_idx].copy()
    best_err = float(fitness[best_idx])

    if config.polish:
        from scipy.optimize import minimize

        def objective(x):
            x = _repair(x[None, :].copy(), lo, hi, i_sst, i_sgo)
            return float(_error_population(x, variant, records)[0])

        res = minimize(objective, best, method="Nelder-Mead",
                       bounds=list(zip(lo, hi)),
                       options={"maxiter": 400, "xatol": 1e-6,
                                "fatol": 1e-10})
        cand = _repair(res.x[None, :].copy(), lo, hi, i_sst, i_sgo)[0]
        cand_err = float(_error_population(cand[None, :], variant,
                                           records)[0])
        if cand_err < best_err:
            best, best_err = cand, cand_err

    spec = ModelSpec.from_vector(variant, best)
    return CalibrationResult(
        spec=spec,
        error=best_err,
        improved=best_err < initial_best,
        history=np.asarray(history),
    )
