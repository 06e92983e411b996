"""Declarative planning scenarios, experiment runners, and data export.

A scenario JSON file names the robot model, the start configuration and
goal position, the covariances and GP spectral density, the obstacles,
and the solver settings.  The runners reproduce the experiment designs:
a single planning run, a prior/baseline/singularity-aware comparison with
normalized manipulability profiles, and a sweep over the number of
interpolated cost states.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

import numpy as np
from jsonschema import validate as _validate_schema

from . import factor_graph as fg
from . import gp_prior as gp
from .collision import SdfGrid, build_workspace_sdf, sphere_clearances
from .kinematics import KinematicChain, forward_kinematics, geometric_jacobian, load_chain
from .manipulability import ellipsoid, estimate_lambda_max

__all__ = [
    "GOAL_TOLERANCE",
    "BoxObstacle",
    "Scenario",
    "LambdaStats",
    "RunResult",
    "ComparisonResult",
    "SweepResult",
    "load_scenario",
    "scenario_from_dict",
    "builtin_scenario_path",
    "run_scenario",
    "run_comparison",
    "run_interp_sweep",
]

# A converged run must place the end-effector this close to the goal (m).
GOAL_TOLERANCE = 1e-3

# Dense lambda-profile sampling used for reports and sweep statistics,
# independent of the number of interpolated cost states.
PROFILE_POINTS_PER_SEGMENT = 10


@dataclass(frozen=True)
class BoxObstacle:
    center: np.ndarray
    half_extents: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "center", np.asarray(self.center, dtype=float).reshape(3))
        object.__setattr__(self, "half_extents", np.asarray(self.half_extents, dtype=float).reshape(3))
        if np.any(self.half_extents <= 0.0):
            raise ValueError("obstacle half extents must be positive")


@dataclass
class Scenario:
    """One planning problem; see ``data/scenario.schema.json`` for the file format."""

    robot: str
    start_config: np.ndarray
    goal_position: np.ndarray
    name: str = "scenario"
    horizon: float = 5.0
    num_support: int = 10
    n_interp: int = 0
    sigma_sbar: float = 1e-4
    sigma_obs: float = 1e-3
    qc_scale: float = 1e3
    sigma_goal: float = 1e-8
    sigma_start: float = 1e-8
    epsilon: float = 0.1
    obstacles: tuple[BoxObstacle, ...] = ()
    lambda_max: float | None = None
    solver: fg.SolverSettings = field(default_factory=fg.SolverSettings)
    enable_singularity_factors: bool = True
    task_dim: int = 6
    sdf_cell_size: float = 0.02
    sdf_extent: float = 2.4
    _chain: KinematicChain | None = field(default=None, init=False, repr=False, compare=False)
    _sdf: SdfGrid | None = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        self.start_config = np.asarray(self.start_config, dtype=float).reshape(-1)
        self.goal_position = np.asarray(self.goal_position, dtype=float).reshape(3)
        self.obstacles = tuple(self.obstacles)
        for value, label in (
            (self.sigma_sbar, "sigma_sbar"),
            (self.sigma_obs, "sigma_obs"),
            (self.qc_scale, "qc_scale"),
            (self.sigma_goal, "sigma_goal"),
            (self.sigma_start, "sigma_start"),
        ):
            if value <= 0.0:
                raise ValueError(f"{label} must be positive")
        if self.num_support < 2:
            raise ValueError("num_support must be at least 2")
        if self.n_interp < 0:
            raise ValueError("n_interp cannot be negative")
        if self.horizon <= 0.0:
            raise ValueError("horizon must be positive")
        if self.task_dim not in (2, 3, 6):
            raise ValueError("task_dim must be 2, 3, or 6")
        if self.epsilon < 0.0:
            raise ValueError("epsilon cannot be negative")

    def load_chain(self) -> KinematicChain:
        if self._chain is None:
            chain = load_chain(self.robot)
            if self.start_config.shape != (chain.n,):
                raise ValueError(
                    f"start_config has {self.start_config.shape[0]} entries, robot has {chain.n} joints"
                )
            base = chain.base_pose.position
            if float(np.linalg.norm(self.goal_position - base)) > 2.0:
                raise ValueError("goal_position lies more than 2 m from the robot base")
            self._chain = chain
        return self._chain

    def build_sdf(self) -> SdfGrid | None:
        if not self.obstacles:
            return None
        if self._sdf is None:
            chain = self.load_chain()
            half = self.sdf_extent / 2.0
            origin = chain.base_pose.position - half
            cells = int(round(self.sdf_extent / self.sdf_cell_size)) + 1
            self._sdf = build_workspace_sdf(
                [(box.center, box.half_extents) for box in self.obstacles],
                origin=origin,
                cell_size=self.sdf_cell_size,
                dims=(cells, cells, cells),
            )
        return self._sdf

    def resolve_lambda_max(self, chain: KinematicChain | None = None) -> float:
        """Scenario override, else the model-file cache, else a fresh estimate."""
        if self.lambda_max is not None:
            return self.lambda_max
        chain = chain or self.load_chain()
        if chain.lambda_max is not None:
            return chain.lambda_max
        return estimate_lambda_max(chain, task_dim=self.task_dim)


def _schema() -> dict:
    text = resources.files("manipplan").joinpath("data", "scenario.schema.json").read_text()
    return json.loads(text)


def scenario_from_dict(data: dict, base_dir: Path | None = None) -> Scenario:
    """Build a validated scenario from parsed JSON.

    ``robot`` may be a built-in model name or a path, resolved relative
    to ``base_dir`` (the scenario file's directory).
    """
    _validate_schema(instance=data, schema=_schema())
    robot = str(data["robot"])
    robot_path = Path(robot)
    if robot_path.suffix:
        if not robot_path.is_absolute() and base_dir is not None:
            candidate = base_dir / robot_path
            if candidate.is_file():
                robot = str(candidate)
    obstacles = tuple(
        BoxObstacle(center=box["center"], half_extents=box["half_extents"])
        for box in data.get("obstacles", ())
    )
    sdf_spec = data.get("sdf", {})
    solver = fg.SolverSettings.from_dict(data.get("solver", {}))
    return Scenario(
        robot=robot,
        start_config=np.array(data["start_config"], dtype=float),
        goal_position=np.array(data["goal_position"], dtype=float),
        name=str(data.get("name", "scenario")),
        horizon=float(data.get("horizon", 5.0)),
        num_support=int(data.get("num_support", 10)),
        n_interp=int(data.get("n_interp", 0)),
        sigma_sbar=float(data.get("sigma_sbar", 1e-4)),
        sigma_obs=float(data.get("sigma_obs", 1e-3)),
        qc_scale=float(data.get("qc_scale", 1e3)),
        sigma_goal=float(data.get("sigma_goal", 1e-8)),
        sigma_start=float(data.get("sigma_start", 1e-8)),
        epsilon=float(data.get("epsilon", 0.1)),
        obstacles=obstacles,
        lambda_max=data.get("lambda_max"),
        solver=solver,
        enable_singularity_factors=bool(data.get("enable_singularity_factors", True)),
        task_dim=int(data.get("task_dim", 6)),
        sdf_cell_size=float(sdf_spec.get("cell_size", 0.02)),
        sdf_extent=float(sdf_spec.get("extent", 2.4)),
    )


def builtin_scenario_path(name: str) -> Path:
    path = Path(str(resources.files("manipplan").joinpath("data", "scenarios", f"{name}.json")))
    if not path.is_file():
        raise FileNotFoundError(f"no built-in scenario named {name!r}")
    return path


def load_scenario(source: str | Path) -> Scenario:
    """Load a scenario from a JSON file path or a built-in scenario name."""
    path = Path(source)
    if not path.is_file() and not path.suffix:
        path = builtin_scenario_path(str(source))
    data = json.loads(path.read_text())
    return scenario_from_dict(data, base_dir=path.parent)


# ---------------------------------------------------------------------------
# Trajectory evaluation and export
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LambdaStats:
    mean: float
    minimum: float
    maximum: float

    def as_dict(self) -> dict:
        return {"mean": self.mean, "min": self.minimum, "max": self.maximum}


def _sampled_states(
    trajectory: gp.SupportTrajectory,
    gp_params: gp.GpPriorParams,
    per_segment: int,
) -> list[gp.TrajectoryState]:
    """Support states plus ``per_segment`` interpolated states per segment,
    in time order."""
    out: list[gp.TrajectoryState] = []
    states = trajectory.states
    for i in range(len(states) - 1):
        out.append(states[i])
        for tau in fg.segment_taus(states[i].time, states[i + 1].time, per_segment):
            state, _, _ = gp.interpolate(states[i], states[i + 1], tau, gp_params)
            out.append(state)
    out.append(states[-1])
    return out


@dataclass
class EvaluatedProfile:
    """Per-sample diagnostics along a trajectory."""

    times: np.ndarray
    positions: np.ndarray  # (rows, n)
    velocities: np.ndarray  # (rows, n)
    lambdas: np.ndarray
    sigma_mins: np.ndarray  # smallest task-velocity axis, a high-lambda blind spot
    ee_positions: np.ndarray  # (rows, 3)
    clearances: np.ndarray | None  # (rows, num_spheres) when obstacles exist

    @property
    def stats(self) -> LambdaStats:
        return LambdaStats(
            mean=float(self.lambdas.mean()),
            minimum=float(self.lambdas.min()),
            maximum=float(self.lambdas.max()),
        )

    @property
    def min_clearance(self) -> float | None:
        if self.clearances is None:
            return None
        return float(self.clearances.min())


def _evaluate_states(
    chain: KinematicChain,
    task_dim: int,
    states: list[gp.TrajectoryState],
    grid: SdfGrid | None,
) -> EvaluatedProfile:
    rows = len(states)
    n = chain.n
    times = np.empty(rows)
    positions = np.empty((rows, n))
    velocities = np.empty((rows, n))
    lambdas = np.empty(rows)
    sigma_mins = np.empty(rows)
    ee = np.empty((rows, 3))
    clearances = np.empty((rows, len(chain.body_spheres))) if grid is not None else None
    for k, state in enumerate(states):
        times[k] = state.time
        positions[k] = state.position
        velocities[k] = state.velocity
        ell = ellipsoid(geometric_jacobian(chain, state.position, task_dim))
        lambdas[k] = ell.volume_measure
        sigma_mins[k] = ell.singular_values[-1]
        ee[k] = forward_kinematics(chain, state.position)[-1].position
        if clearances is not None:
            clearances[k] = sphere_clearances(chain, state.position, grid)
    return EvaluatedProfile(
        times=times,
        positions=positions,
        velocities=velocities,
        lambdas=lambdas,
        sigma_mins=sigma_mins,
        ee_positions=ee,
        clearances=clearances,
    )


def _fmt(value: float) -> str:
    """Full round-trip precision so consumers can recompute exactly."""
    return repr(float(value))


def _write_csv(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def _write_trajectory_csv(path: Path, profile: EvaluatedProfile) -> None:
    n = profile.positions.shape[1]
    header = ["time"] + [f"q{i + 1}" for i in range(n)] + [f"v{i + 1}" for i in range(n)] + ["lambda"]
    rows = (
        [profile.times[k], *profile.positions[k], *profile.velocities[k], profile.lambdas[k]]
        for k in range(profile.times.shape[0])
    )
    _write_csv(path, header, rows)


def _write_profile_csv(path: Path, profile: EvaluatedProfile) -> None:
    header = ["time", "lambda", "sigma_min", "ee_x", "ee_y", "ee_z"]
    if profile.clearances is not None:
        header += [f"clearance_{i}" for i in range(profile.clearances.shape[1])]
    def rows():
        for k in range(profile.times.shape[0]):
            row = [profile.times[k], profile.lambdas[k], profile.sigma_mins[k], *profile.ee_positions[k]]
            if profile.clearances is not None:
                row += list(profile.clearances[k])
            yield row
    _write_csv(path, header, rows())


@dataclass
class RunResult:
    scenario_name: str
    trajectory: gp.SupportTrajectory
    report: fg.OptimizeReport | None  # None for the unoptimized prior
    factor_profile: EvaluatedProfile  # support + interpolated cost states
    dense_profile: EvaluatedProfile  # fixed dense grid used for statistics
    goal_error: float
    collision_free: bool | None
    out_dir: Path | None = None

    @property
    def stats(self) -> LambdaStats:
        return self.dense_profile.stats

    @property
    def converged(self) -> bool:
        return self.report is None or self.report.converged

    @property
    def success(self) -> bool:
        ok = self.converged and self.goal_error <= GOAL_TOLERANCE
        if self.collision_free is not None:
            ok = ok and self.collision_free
        return ok

    def report_dict(self) -> dict:
        out = {
            "scenario": self.scenario_name,
            "convergence": None if self.report is None else self.report.as_dict(),
            "goal_error_m": self.goal_error,
            "goal_reached": bool(self.goal_error <= GOAL_TOLERANCE),
            "collision_free": self.collision_free,
            "min_clearance_m": self.dense_profile.min_clearance,
            "lambda": self.stats.as_dict(),
            "success": self.success,
        }
        return out


def _finalize_run(
    scenario: Scenario,
    chain: KinematicChain,
    grid: SdfGrid | None,
    trajectory: gp.SupportTrajectory,
    report: fg.OptimizeReport | None,
    out_dir: Path | None,
) -> RunResult:
    gp_params = gp.GpPriorParams.isotropic(chain.n, scenario.qc_scale)
    factor_states = _sampled_states(trajectory, gp_params, scenario.n_interp)
    dense_states = _sampled_states(trajectory, gp_params, PROFILE_POINTS_PER_SEGMENT)
    factor_profile = _evaluate_states(chain, scenario.task_dim, factor_states, grid)
    dense_profile = _evaluate_states(chain, scenario.task_dim, dense_states, grid)
    goal_error = float(np.linalg.norm(dense_profile.ee_positions[-1] - scenario.goal_position))
    collision_free = None
    if grid is not None:
        collision_free = bool(dense_profile.clearances.min() >= 0.0 and factor_profile.clearances.min() >= 0.0)
    result = RunResult(
        scenario_name=scenario.name,
        trajectory=trajectory,
        report=report,
        factor_profile=factor_profile,
        dense_profile=dense_profile,
        goal_error=goal_error,
        collision_free=collision_free,
        out_dir=out_dir,
    )
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        _write_trajectory_csv(out_dir / "trajectory.csv", factor_profile)
        _write_profile_csv(out_dir / "lambda_profile.csv", dense_profile)
        (out_dir / "report.json").write_text(json.dumps(result.report_dict(), indent=2, sort_keys=True) + "\n")
    return result


def _execute(scenario: Scenario, out_dir: Path | None, optimize: bool, grid: SdfGrid | None) -> RunResult:
    chain = scenario.load_chain()
    if grid is None:
        grid = scenario.build_sdf()
    trajectory = gp.init_trajectory(
        scenario.start_config, scenario.horizon, scenario.num_support, scenario.n_interp
    )
    report = None
    if optimize:
        graph = fg.build_graph(scenario, trajectory)
        trajectory, report = fg.optimize(graph, trajectory, scenario.solver)
    return _finalize_run(scenario, chain, grid, trajectory, report, out_dir)


def run_scenario(scenario: Scenario, out_dir: str | Path | None = None) -> RunResult:
    """Plan one scenario and export ``trajectory.csv``, ``lambda_profile.csv``
    and ``report.json`` into ``out_dir`` (when given)."""
    out = Path(out_dir) if out_dir is not None else None
    return _execute(scenario, out, optimize=True, grid=None)


@dataclass
class ComparisonResult:
    prior: RunResult
    baseline: RunResult
    aware: RunResult
    normalization: float  # max lambda observed across the three runs
    out_dir: Path | None

    def report_dict(self) -> dict:
        return {
            "normalization": self.normalization,
            "prior": self.prior.report_dict(),
            "baseline": self.baseline.report_dict(),
            "singularity_aware": self.aware.report_dict(),
        }


def run_comparison(scenario: Scenario, out_dir: str | Path | None = None) -> ComparisonResult:
    """Run the prior (no optimization), the baseline (no singularity
    factors), and the singularity-aware planner on one scenario.

    Exports per-run artifacts plus ``comparison.csv`` with the aligned
    manipulability profiles normalized to the maximum observed value.
    """
    out = Path(out_dir) if out_dir is not None else None
    grid = scenario.build_sdf()
    prior = _execute(scenario, None if out is None else out / "prior", optimize=False, grid=grid)
    baseline_scenario = replace(scenario, enable_singularity_factors=False)
    baseline = _execute(baseline_scenario, None if out is None else out / "baseline", optimize=True, grid=grid)
    aware_scenario = replace(scenario, enable_singularity_factors=True)
    aware = _execute(aware_scenario, None if out is None else out / "aware", optimize=True, grid=grid)

    normalization = max(run.dense_profile.lambdas.max() for run in (prior, baseline, aware))
    result = ComparisonResult(prior=prior, baseline=baseline, aware=aware, normalization=normalization, out_dir=out)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        header = [
            "time",
            "lambda_prior",
            "lambda_baseline",
            "lambda_aware",
            "norm_lambda_prior",
            "norm_lambda_baseline",
            "norm_lambda_aware",
        ]
        times = prior.dense_profile.times
        def rows():
            for k in range(times.shape[0]):
                lp = prior.dense_profile.lambdas[k]
                lb = baseline.dense_profile.lambdas[k]
                la = aware.dense_profile.lambdas[k]
                yield [times[k], lp, lb, la, lp / normalization, lb / normalization, la / normalization]
        _write_csv(out / "comparison.csv", header, rows())
        (out / "comparison_report.json").write_text(json.dumps(result.report_dict(), indent=2, sort_keys=True) + "\n")
    return result


@dataclass
class SweepResult:
    counts: list[int]
    runs: list[RunResult]
    prior: RunResult
    out_dir: Path | None

    def report_dict(self) -> dict:
        return {
            "prior": self.prior.report_dict(),
            "runs": [
                {"n_interp": c, **run.report_dict()} for c, run in zip(self.counts, self.runs)
            ],
        }


def run_interp_sweep(
    scenario: Scenario, interp_counts, out_dir: str | Path | None = None
) -> SweepResult:
    """Re-plan the scenario for each interpolated-state count and report
    the manipulability statistics per count (plus the prior's)."""
    counts = [int(c) for c in interp_counts]
    if not counts:
        raise ValueError("interp_counts must not be empty")
    out = Path(out_dir) if out_dir is not None else None
    grid = scenario.build_sdf()
    prior = _execute(scenario, None, optimize=False, grid=grid)
    runs = []
    for count in counts:
        sub = None if out is None else out / f"interp_{count}"
        runs.append(_execute(replace(scenario, n_interp=count), sub, optimize=True, grid=grid))
    result = SweepResult(counts=counts, runs=runs, prior=prior, out_dir=out)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        header = ["n_interp", "lambda_mean", "lambda_min", "final_cost", "converged", "iterations"]
        def rows():
            for count, run in zip(counts, runs):
                yield [
                    count,
                    run.stats.mean,
                    run.stats.minimum,
                    run.report.final_cost,
                    int(run.report.converged),
                    run.report.iterations,
                ]
        _write_csv(out / "sweep.csv", header, rows())
        (out / "sweep_report.json").write_text(json.dumps(result.report_dict(), indent=2, sort_keys=True) + "\n")
    return result
