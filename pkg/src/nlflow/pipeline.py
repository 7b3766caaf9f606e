"""End-to-end experiment orchestration with a hashed artifact manifest.

A run walks the stages simulate -> reconstruct -> train -> report inside
one output directory.  Every artifact lands in the manifest with its
sha256; a stage failure is recorded there and the remaining stages are
skipped, so a run directory always tells the full story.  Reports carry
no timestamps or timings: re-running a config with the same seed must
produce byte-identical metrics.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import baselines
from .macrorecon import (MacroField, field_to_csv, reconstruct,
                         select_observations)
from .metrics import (estimation_error, fd_scatter_width, kernel_mass_within,
                      kernel_mean)
from .microsim import (ControllerParams, FleetSpec, Perturbation, RingConfig,
                       simulate, trajectories_to_csv)
from .nlpinn import predict_density, predict_fd, save_model, stencil_indices
from .train import TrainConfig, history_to_csv, train

__all__ = [
    "ExperimentConfig",
    "PipelineError",
    "STAGES",
    "SWEEP_AXES",
    "run_pipeline",
    "sweep",
    "apply_axis",
    "controller_params_for",
]

STAGES = ("simulate", "reconstruct", "train", "report")

_GAIN_AXES = ("alpha0", "beta0", "alpha_m1", "beta_m1", "alpha1", "beta1")
_VOPT_AXES = ("v_max", "s_st", "s_go")
SWEEP_AXES = _GAIN_AXES + _VOPT_AXES + ("penetration", "eta_a", "eta_b",
                                        "c_d", "h")

SCHEMA_VERSION = 1


class PipelineError(RuntimeError):
    """A stage failed; the manifest records which one and why."""


@dataclass(frozen=True)
class ExperimentConfig:
    """Declarative description of one full experiment run.

    Defaults are desk scale: four ring cases on L = 260 m observed for
    300 s, a short warmup of data-only epochs, and a joint training budget
    that keeps a full behavior-model study within a CPU half hour.
    """

    schema_version: int = SCHEMA_VERSION
    behavior: str = "car_following"
    gain_overrides: dict = field(default_factory=dict)
    vopt_overrides: dict = field(default_factory=dict)
    penetration: float = 1.0
    L: float = 260.0
    T: float = 300.0
    dt: float = 0.05
    vehicle_counts: tuple = (10, 13, 16, 19)
    perturbation_magnitude: float = 0.2
    perturbation_duration: float = 2.0
    h: float = 6.0
    dx: float = 1.0
    dt_grid: float = 1.0
    n_detectors: int = 5
    eta_a: float = 30.0
    eta_b: float = 0.0
    c_d: float = 0.1
    p_omega: float = 1e6
    p_v: float = 1e6
    epochs: int = 400
    warmup_epochs: int = 2000
    lr: float = 1e-3
    lr_final: float | None = None
    warmup_lr: float = 1e-2
    collocation_dt: float = 5.0
    feature_scales: tuple | None = (25.0, 70.0)
    seed: int = 0

    def __post_init__(self):
        if self.schema_version != SCHEMA_VERSION:
            raise ValueError(
                f"config schema_version {self.schema_version} unsupported "
                f"(expected {SCHEMA_VERSION})"
            )
        if self.behavior not in baselines.BASELINE_MODELS:
            raise ValueError(f"unknown behavior model {self.behavior!r}")
        for key in self.gain_overrides:
            if key not in _GAIN_AXES:
                raise ValueError(f"unknown gain override {key!r}")
        for key in self.vopt_overrides:
            if key not in _VOPT_AXES:
                raise ValueError(f"unknown optimal-velocity override {key!r}")
        if not 0.0 <= self.penetration <= 1.0:
            raise ValueError("penetration must be in [0, 1]")
        if not self.vehicle_counts:
            raise ValueError("need at least one case")

    def to_json(self) -> str:
        obj = dataclasses.asdict(self)
        obj["vehicle_counts"] = list(self.vehicle_counts)
        if self.feature_scales is not None:
            obj["feature_scales"] = list(self.feature_scales)
        return json.dumps(obj, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        obj = json.loads(text)
        if not isinstance(obj, dict):
            raise ValueError("config must be a JSON object")
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(obj) - names)
        if unknown:
            raise ValueError(f"unknown config keys: {unknown}")
        if "vehicle_counts" in obj:
            obj["vehicle_counts"] = tuple(obj["vehicle_counts"])
        if obj.get("feature_scales") is not None:
            obj["feature_scales"] = tuple(obj["feature_scales"])
        return cls(**obj)


_GAIN_KEY = {
    "alpha0": ("alpha", 0), "beta0": ("beta", 0),
    "alpha_m1": ("alpha", -1), "beta_m1": ("beta", -1),
    "alpha1": ("alpha", 1), "beta1": ("beta", 1),
}


def controller_params_for(config: ExperimentConfig) -> ControllerParams:
    """Behavior-model gains with the config's overrides applied."""
    base = baselines.baseline_params(config.behavior)
    alpha = dict(base.alpha)
    beta = dict(base.beta)
    for key, val in config.gain_overrides.items():
        kind, j = _GAIN_KEY[key]
        if kind == "alpha":
            alpha[j] = float(val)
        else:
            beta[j] = float(val)
    vopt = dataclasses.replace(base.vopt, **{
        k: float(v) for k, v in config.vopt_overrides.items()
    })
    indices = list(alpha) + list(beta)
    return ControllerParams(
        alpha=alpha, beta=beta, vopt=vopt,
        lookahead_count=max(0, -min(indices)),
        lookbehind_count=max(0, max(indices)),
        nudging_indicator=base.nudging_indicator or any(
            j > 0 for j in indices
        ),
    )


def _fleet_for(config: ExperimentConfig) -> FleetSpec:
    cav = controller_params_for(config)
    if config.penetration >= 1.0:
        return FleetSpec.homogeneous(cav)
    hv = baselines.car_following_params()
    return FleetSpec(hv_params=hv, cav_params=cav,
                     penetration=config.penetration)


def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


class _Manifest:
    def __init__(self, out_dir: Path):
        self.out_dir = out_dir
        self.data = {"schema_version": SCHEMA_VERSION, "stages": {}}

    def stage(self, name: str) -> dict:
        return self.data["stages"].setdefault(
            name, {"status": "pending", "artifacts": {}}
        )

    def add_artifact(self, stage: str, path: Path) -> None:
        rel = str(path.relative_to(self.out_dir))
        self.stage(stage)["artifacts"][rel] = _sha256(path)

    def finish(self, stage: str) -> None:
        self.stage(stage)["status"] = "ok"

    def fail(self, stage: str, exc: BaseException) -> None:
        entry = self.stage(stage)
        entry["status"] = "failed"
        entry["error"] = f"{type(exc).__name__}: {exc}"

    def skip(self, stage: str) -> None:
        self.stage(stage)["status"] = "skipped"

    def write(self) -> None:
        path = self.out_dir / "manifest.json"
        path.write_text(json.dumps(self.data, indent=2, sort_keys=True))


def _nonlocal_field(rho: np.ndarray, omega: np.ndarray, n_a: int,
                    n_b: int) -> np.ndarray:
    """Kernel-weighted density, column by column over the time axis."""
    idx = stencil_indices(rho.shape[0], n_a, n_b)
    return np.einsum("ikt,k->it", rho[idx, :], omega)


def _train_config(config: ExperimentConfig, local: bool) -> TrainConfig:
    return TrainConfig(
        eta_a=config.eta_a, eta_b=config.eta_b, dx=config.dx,
        c_d=config.c_d, p_omega=config.p_omega, p_v=config.p_v,
        lr=config.lr, lr_final=config.lr_final, epochs=config.epochs,
        warmup_epochs=config.warmup_epochs, warmup_lr=config.warmup_lr,
        collocation_dt=config.collocation_dt, local_physics=local,
        feature_scales=config.feature_scales,
        seed=config.seed,
    )


def run_pipeline(config: ExperimentConfig, out_dir,
                 until: str = "report") -> dict | None:
    """Run the stages up to ``until`` and write artifacts plus manifest.

    Returns the report dict when the report stage runs, else None.  A
    stage failure writes the manifest (failed stage recorded, downstream
    skipped) and raises PipelineError.
    """
    if until not in STAGES:
        raise ValueError(f"unknown stage {until!r}; expected one of {STAGES}")
    last = STAGES.index(until)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(config.to_json())
    manifest = _Manifest(out)

    fleet = _fleet_for(config)
    trajectories = {}
    fields = {}
    observations = {}
    results = {}
    report = None

    def stage_simulate():
        for n_veh in config.vehicle_counts:
            ring = RingConfig(
                L=config.L, N=n_veh, dt=config.dt, T=config.T,
                seed=config.seed,
                perturbation=Perturbation(
                    kind="speed_pulse",
                    magnitude=config.perturbation_magnitude,
                    duration=config.perturbation_duration,
                ),
            )
            traj = simulate(ring, fleet)
            if traj.collided:
                raise PipelineError(
                    f"case N={n_veh} collided at t={traj.collision_time:.2f}"
                )
            trajectories[n_veh] = traj
            case_dir = out / f"case_N{n_veh}"
            case_dir.mkdir(exist_ok=True)
            path = case_dir / "trajectories.csv"
            trajectories_to_csv(traj, path)
            manifest.add_artifact("simulate", path)

    def stage_reconstruct():
        for n_veh, traj in trajectories.items():
            fld = reconstruct(traj, h=config.h, dx=config.dx,
                              dt_grid=config.dt_grid)
            obs = select_observations(fld, n_detectors=config.n_detectors)
            fields[n_veh] = fld
            observations[n_veh] = obs
            case_dir = out / f"case_N{n_veh}"
            csv_path = case_dir / "field.csv"
            meta_path = case_dir / "field_meta.json"
            field_to_csv(fld, csv_path, meta_path)
            manifest.add_artifact("reconstruct", csv_path)
            manifest.add_artifact("reconstruct", meta_path)
            obs_path = case_dir / "observations.csv"
            with open(obs_path, "w") as fh:
                fh.write("x_idx,t_idx,rho\n")
                for i, j, r in zip(obs.x_idx, obs.t_idx, obs.rho):
                    fh.write(f"{i},{j},{r!r}\n")
            manifest.add_artifact("reconstruct", obs_path)

    def stage_train():
        cases = [(fields[n], observations[n])
                 for n in config.vehicle_counts]
        for tag, local in (("nonlocal", False), ("local", True)):
            result = train(cases, _train_config(config, local))
            results[tag] = result
            model_path = out / f"model_{tag}.json"
            save_model(result.state, model_path)
            manifest.add_artifact("train", model_path)
            hist_path = out / f"history_{tag}.csv"
            history_to_csv(result.history, hist_path)
            manifest.add_artifact("train", hist_path)

    def stage_report():
        nonlocal report
        state_nl = results["nonlocal"].state
        state_loc = results["local"].state
        omega = results["nonlocal"].omega_hat
        n_a = state_nl.kernel.n_a
        n_b = state_nl.kernel.n_b

        case_rows = []
        rho_all, rho_eta_all, v_all = [], [], []
        for k, n_veh in enumerate(config.vehicle_counts):
            fld = fields[n_veh]
            err_nl = estimation_error(fld.rho, predict_density(state_nl, k))
            err_loc = estimation_error(fld.rho, predict_density(state_loc, k))
            case_rows.append({
                "N": int(n_veh),
                "error_nonlocal_pct": err_nl,
                "error_local_pct": err_loc,
            })
            rho_eta = _nonlocal_field(fld.rho, omega, n_a, n_b)
            rho_all.append(fld.rho.ravel())
            rho_eta_all.append(rho_eta.ravel())
            v_all.append(fld.v.ravel())
        rho_cat = np.concatenate(rho_all)
        rho_eta_cat = np.concatenate(rho_eta_all)
        v_cat = np.concatenate(v_all)

        scatter_path = out / "fd_scatter.csv"
        with open(scatter_path, "w") as fh:
            fh.write("rho,rho_eta,v\n")
            for r, re_, vv in zip(rho_cat, rho_eta_cat, v_cat):
                fh.write(f"{r!r},{re_!r},{vv!r}\n")
        manifest.add_artifact("report", scatter_path)

        rho_grid = np.linspace(0.0, state_nl.rho_scale, 101)
        v_nl = predict_fd(state_nl, rho_grid)
        v_loc = predict_fd(state_loc, rho_grid)

        report = {
            "schema_version": SCHEMA_VERSION,
            "behavior": config.behavior,
            "config": json.loads(config.to_json()),
            "cases": case_rows,
            "error_mean_nonlocal_pct": float(
                np.mean([c["error_nonlocal_pct"] for c in case_rows])
            ),
            "error_mean_local_pct": float(
                np.mean([c["error_local_pct"] for c in case_rows])
            ),
            "kernel": {
                "eta_a": config.eta_a,
                "eta_b": config.eta_b,
                "dx": config.dx,
                "omega_hat": omega.tolist(),
                "mean_m": kernel_mean(omega, dx=config.dx, n_b=n_b),
                "mass_within_5m": kernel_mass_within(
                    omega, 5.0, dx=config.dx, n_b=n_b
                ),
            },
            "scatter": {
                "local_width": fd_scatter_width(rho_cat, v_cat),
                "nonlocal_width": fd_scatter_width(rho_eta_cat, v_cat),
            },
            "fd": {
                "rho": rho_grid.tolist(),
                "v_nonlocal": v_nl.tolist(),
                "v_local": v_loc.tolist(),
            },
        }
        report_path = out / "report.json"
        report_path.write_text(json.dumps(report, indent=2, sort_keys=True))
        manifest.add_artifact("report", report_path)

    runners = {
        "simulate": stage_simulate,
        "reconstruct": stage_reconstruct,
        "train": stage_train,
        "report": stage_report,
    }
    failed = None
    for pos, name in enumerate(STAGES):
        if pos > last:
            break
        if failed is not None:
            manifest.skip(name)
            continue
        try:
            runners[name]()
            manifest.finish(name)
        except Exception as exc:  # recorded, then surfaced after the walk
            manifest.fail(name, exc)
            failed = (name, exc)
    manifest.write()
    if failed is not None:
        name, exc = failed
        raise PipelineError(f"stage {name!r} failed: {exc}") from exc
    return report


def apply_axis(config: ExperimentConfig, axis: str,
               value: float) -> ExperimentConfig:
    """Return a copy of the config with one sweep axis set to ``value``."""
    if axis not in SWEEP_AXES:
        raise ValueError(
            f"unknown sweep axis {axis!r}; expected one of {SWEEP_AXES}"
        )
    if axis in _GAIN_AXES:
        overrides = dict(config.gain_overrides)
        overrides[axis] = float(value)
        return dataclasses.replace(config, gain_overrides=overrides)
    if axis in _VOPT_AXES:
        overrides = dict(config.vopt_overrides)
        overrides[axis] = float(value)
        return dataclasses.replace(config, vopt_overrides=overrides)
    return dataclasses.replace(config, **{axis: float(value)})


def sweep(config: ExperimentConfig, axis: str, values, out_root) -> list:
    """One full pipeline run per axis value plus a collated CSV.

    Each value runs independently under ``out_root/<axis>=<value>``; a
    failing point is recorded in the collated table and does not stop the
    remaining points.
    """
    values = [float(v) for v in values]
    if not values:
        raise ValueError("sweep needs at least one value")
    out_root = Path(out_root)
    out_root.mkdir(parents=True, exist_ok=True)
    rows = []
    for value in values:
        cfg = apply_axis(config, axis, value)
        run_dir = out_root / f"{axis}={value:g}"
        try:
            report = run_pipeline(cfg, run_dir)
            rows.append({
                "axis": axis,
                "value": value,
                "status": "ok",
                "error_nonlocal_pct": report["error_mean_nonlocal_pct"],
                "error_local_pct": report["error_mean_local_pct"],
                "kernel_mean_m": report["kernel"]["mean_m"],
                "kernel_mass_within_5m": report["kernel"]["mass_within_5m"],
                "scatter_local_width": report["scatter"]["local_width"],
                "scatter_nonlocal_width": report["scatter"]["nonlocal_width"],
            })
        except PipelineError as exc:
            rows.append({
                "axis": axis, "value": value, "status": f"failed: {exc}",
                "error_nonlocal_pct": float("nan"),
                "error_local_pct": float("nan"),
                "kernel_mean_m": float("nan"),
                "kernel_mass_within_5m": float("nan"),
                "scatter_local_width": float("nan"),
                "scatter_nonlocal_width": float("nan"),
            })
    columns = list(rows[0].keys())
    with open(out_root / "collated.csv", "w") as fh:
        fh.write(",".join(columns) + "\n")
        for row in rows:
            fh.write(",".join(
                repr(row[c]) if isinstance(row[c], float) else str(row[c])
                for c in columns
            ) + "\n")
    return rows
