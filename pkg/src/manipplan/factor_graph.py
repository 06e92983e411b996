"""Factor graph over trajectory states and its nonlinear least-squares solver.

Every factor produces a whitened residual (premultiplied by the square
root of its inverse covariance) plus Jacobians with respect to the one or
two support states it touches, so the MAP problem is the standard sum of
squared residuals.  Interpolated factors evaluate their cost at a GP-
conditioned state between two knots and chain the Jacobian through the
interpolation blend matrices, which is how gradient information from
extra states reaches the decision variables.

The solver linearizes into a block-sparse normal system (block
tridiagonal from the GP chain plus sparse unary blocks) and runs either
Gauss-Newton or Levenberg-Marquardt on it; small systems drop to a dense
Cholesky factorization.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from enum import Enum
from typing import TYPE_CHECKING, Callable

import numpy as np
import scipy.sparse as sp
from scipy.linalg import cho_factor, cho_solve
from scipy.sparse.linalg import splu

from . import gp_prior as gp
from .collision import CollisionParams, SdfGrid, collision_residual
from .kinematics import KinematicChain, point_jacobian
from .manipulability import SingularityCostParams, singularity_cost, singularity_cost_value

if TYPE_CHECKING:
    from .scenario import Scenario

__all__ = [
    "FactorKind",
    "Factor",
    "StartPriorFactor",
    "GpPriorFactor",
    "SingularityFactor",
    "InterpolatedSingularityFactor",
    "CollisionFactor",
    "InterpolatedCollisionFactor",
    "GoalPositionFactor",
    "FactorGraph",
    "SolverMethod",
    "SolverSettings",
    "OptimizeReport",
    "residual",
    "total_cost",
    "linearize",
    "optimize",
    "build_graph",
    "ChainSingularityCost",
    "chain_cost_fn",
    "segment_taus",
]

# Above this state-vector size the damped normal equations are solved with
# a sparse LU factorization instead of a dense Cholesky.
DENSE_SOLVE_LIMIT = 500

# q -> (h, dh_dq, ...); production costs return the SingularityCost tuple.
CostFn = Callable[[np.ndarray], tuple]


class FactorKind(Enum):
    START_PRIOR = "start_prior"
    GP_PRIOR = "gp_prior"
    SINGULARITY = "singularity"
    INTERP_SINGULARITY = "interpolated_singularity"
    COLLISION = "collision"
    INTERP_COLLISION = "interpolated_collision"
    GOAL_POSITION = "goal_position"


class Factor:
    """Whitened residual over one or two support states.

    Subclasses set ``kind``, ``states`` (connected support-state indices),
    ``dim`` (residual length), and implement :meth:`evaluate` returning
    the whitened residual and one whitened Jacobian per connected state.
    """

    kind: FactorKind
    states: tuple[int, ...]
    dim: int

    def evaluate(
        self, trajectory: gp.SupportTrajectory, with_jacobians: bool = True
    ) -> tuple[np.ndarray, tuple[np.ndarray, ...] | None]:
        """Whitened residual and Jacobians; pass ``with_jacobians=False``
        to skip derivative work when only the cost is needed."""
        raise NotImplementedError


def _weight(sigma: float) -> float:
    if sigma <= 0.0:
        raise ValueError("covariance must be positive")
    return 1.0 / math.sqrt(sigma)


def _cost_value(cost_fn: CostFn, q: np.ndarray) -> float:
    """Scalar cost of a cost handle, using its cheap ``value`` shortcut when
    it offers one (plain callables are evaluated in full)."""
    value = getattr(cost_fn, "value", None)
    if value is not None:
        return value(q)
    return cost_fn(q)[0]


def _position_row_block(jac_q: np.ndarray) -> np.ndarray:
    """Embed a d x n joint-space Jacobian into the d x 2n state layout
    (zeros against the velocity half)."""
    d, n = jac_q.shape
    out = np.zeros((d, 2 * n))
    out[:, :n] = jac_q
    return out


@dataclass
class StartPriorFactor(Factor):
    """Pins the first state (position and velocity) with a tight prior."""

    state: int
    prior: np.ndarray
    sigma: float

    def __post_init__(self) -> None:
        self.kind = FactorKind.START_PRIOR
        self.states = (self.state,)
        self.prior = np.asarray(self.prior, dtype=float)
        self.dim = self.prior.shape[0]
        self._w = _weight(self.sigma)

    @property
    def noise_sqrt_info(self) -> np.ndarray:
        return self._w * np.eye(self.dim)

    def evaluate(self, trajectory, with_jacobians=True):
        x = trajectory.states[self.state].as_vector()
        r = self._w * (x - self.prior)
        return r, ((self._w * np.eye(self.dim),) if with_jacobians else None)


@dataclass
class GpPriorFactor(Factor):
    """Constant-velocity GP prior between consecutive support states."""

    i: int
    j: int
    dt: float
    params: gp.GpPriorParams

    def __post_init__(self) -> None:
        self.kind = FactorKind.GP_PRIOR
        self.states = (self.i, self.j)
        self.dim = self.params.state_dim
        if self.dt <= 0.0:
            raise ValueError("states out of order")
        self._phi = gp.transition(self.dt, self.params.n)
        chol = np.linalg.cholesky(gp.process_noise(self.dt, self.params))
        self._info_sqrt = np.linalg.solve(chol, np.eye(self.dim))
        self._jac_i = self._info_sqrt @ self._phi
        self._jac_j = -self._info_sqrt

    @property
    def noise_sqrt_info(self) -> np.ndarray:
        return self._info_sqrt

    def evaluate(self, trajectory, with_jacobians=True):
        x_i = trajectory.states[self.i].as_vector()
        x_j = trajectory.states[self.j].as_vector()
        r = self._info_sqrt @ (self._phi @ x_i - x_j)
        return r, ((self._jac_i, self._jac_j) if with_jacobians else None)


@dataclass
class SingularityFactor(Factor):
    """Log-manipulability cost on one support state."""

    state: int
    cost_fn: CostFn
    sigma: float

    def __post_init__(self) -> None:
        self.kind = FactorKind.SINGULARITY
        self.states = (self.state,)
        self.dim = 1
        self._w = _weight(self.sigma)

    @property
    def noise_sqrt_info(self) -> np.ndarray:
        return np.array([[self._w]])

    def evaluate(self, trajectory, with_jacobians=True):
        q = trajectory.states[self.state].position
        if not with_jacobians:
            return np.array([self._w * _cost_value(self.cost_fn, q)]), None
        out = self.cost_fn(q)
        h, grad = out[0], np.asarray(out[1], dtype=float)
        jac = self._w * _position_row_block(grad[None, :])
        return np.array([self._w * h]), (jac,)


@dataclass
class InterpolatedSingularityFactor(Factor):
    """Log-manipulability cost at a GP-interpolated state inside a segment.

    The residual Jacobian is chained through the interpolation matrices so
    the gradient lands on both bracketing support states.
    """

    i: int
    j: int
    tau: float
    cost_fn: CostFn
    sigma: float
    gp_params: gp.GpPriorParams
    t_i: float
    t_j: float

    def __post_init__(self) -> None:
        self.kind = FactorKind.INTERP_SINGULARITY
        self.states = (self.i, self.j)
        self.dim = 1
        if not self.t_i < self.tau < self.t_j:
            raise ValueError(f"interpolated factor needs t_i < tau < t_j, got {self.t_i}, {self.tau}, {self.t_j}")
        self._w = _weight(self.sigma)
        self._lam, self._psi = gp.interpolation_matrices(self.t_i, self.t_j, self.tau, self.gp_params)

    @property
    def noise_sqrt_info(self) -> np.ndarray:
        return np.array([[self._w]])

    def evaluate(self, trajectory, with_jacobians=True):
        n = self.gp_params.n
        x_i = trajectory.states[self.i].as_vector()
        x_j = trajectory.states[self.j].as_vector()
        x_tau = self._lam @ x_i + self._psi @ x_j
        if not with_jacobians:
            return np.array([self._w * _cost_value(self.cost_fn, x_tau[:n])]), None
        out = self.cost_fn(x_tau[:n])
        h, grad = out[0], np.asarray(out[1], dtype=float)
        row = _position_row_block(grad[None, :])
        return np.array([self._w * h]), (self._w * (row @ self._lam), self._w * (row @ self._psi))


@dataclass
class CollisionFactor(Factor):
    """Hinge obstacle cost over the body spheres of one support state."""

    state: int
    chain: KinematicChain
    grid: SdfGrid
    params: CollisionParams

    def __post_init__(self) -> None:
        self.kind = FactorKind.COLLISION
        self.states = (self.state,)
        self.dim = len(self.chain.body_spheres)
        self._w = _weight(self.params.sigma_obs)

    @property
    def noise_sqrt_info(self) -> np.ndarray:
        return self._w * np.eye(self.dim)

    def evaluate(self, trajectory, with_jacobians=True):
        state = trajectory.states[self.state]
        r, jac_q = collision_residual(self.chain, state.position, self.grid, self.params, with_jacobians)
        if not with_jacobians:
            return self._w * r, None
        return self._w * r, (self._w * _position_row_block(jac_q),)


@dataclass
class InterpolatedCollisionFactor(Factor):
    """Hinge obstacle cost at a GP-interpolated state."""

    i: int
    j: int
    tau: float
    chain: KinematicChain
    grid: SdfGrid
    params: CollisionParams
    gp_params: gp.GpPriorParams
    t_i: float
    t_j: float

    def __post_init__(self) -> None:
        self.kind = FactorKind.INTERP_COLLISION
        self.states = (self.i, self.j)
        self.dim = len(self.chain.body_spheres)
        if not self.t_i < self.tau < self.t_j:
            raise ValueError(f"interpolated factor needs t_i < tau < t_j, got {self.t_i}, {self.tau}, {self.t_j}")
        self._w = _weight(self.params.sigma_obs)
        self._lam, self._psi = gp.interpolation_matrices(self.t_i, self.t_j, self.tau, self.gp_params)

    @property
    def noise_sqrt_info(self) -> np.ndarray:
        return self._w * np.eye(self.dim)

    def evaluate(self, trajectory, with_jacobians=True):
        n = self.gp_params.n
        x_i = trajectory.states[self.i].as_vector()
        x_j = trajectory.states[self.j].as_vector()
        x_tau = self._lam @ x_i + self._psi @ x_j
        r, jac_q = collision_residual(self.chain, x_tau[:n], self.grid, self.params, with_jacobians)
        if not with_jacobians:
            return self._w * r, None
        block = _position_row_block(jac_q)
        return self._w * r, (self._w * (block @ self._lam), self._w * (block @ self._psi))


@dataclass
class GoalPositionFactor(Factor):
    """Pulls the end-effector position of one state to a workspace point."""

    state: int
    chain: KinematicChain
    goal: np.ndarray
    sigma: float

    def __post_init__(self) -> None:
        self.kind = FactorKind.GOAL_POSITION
        self.states = (self.state,)
        self.dim = 3
        self.goal = np.asarray(self.goal, dtype=float).reshape(3)
        self._w = _weight(self.sigma)
        self._tool = np.zeros(3)

    @property
    def noise_sqrt_info(self) -> np.ndarray:
        return self._w * np.eye(3)

    def evaluate(self, trajectory, with_jacobians=True):
        q = trajectory.states[self.state].position
        p, jac_q = point_jacobian(self.chain, q, self.chain.n - 1, self._tool)
        r = self._w * (p - self.goal)
        return r, ((self._w * _position_row_block(jac_q),) if with_jacobians else None)


@dataclass(frozen=True)
class FactorGraph:
    """The MAP problem: factors over ``num_states`` states of size ``state_dim``."""

    factors: tuple[Factor, ...]
    num_states: int
    state_dim: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "factors", tuple(self.factors))
        for factor in self.factors:
            for s in factor.states:
                if not 0 <= s < self.num_states:
                    raise ValueError(f"factor {factor.kind} references state {s} of {self.num_states}")

    @property
    def residual_dim(self) -> int:
        return sum(f.dim for f in self.factors)


def residual(factor: Factor, trajectory: gp.SupportTrajectory):
    """Whitened residual and per-state Jacobians of one factor."""
    return factor.evaluate(trajectory)


def total_cost(graph: FactorGraph, trajectory: gp.SupportTrajectory) -> float:
    """Half the squared norm of all whitened residuals (the MAP negative log)."""
    cost = 0.0
    for factor in graph.factors:
        r, _ = factor.evaluate(trajectory, with_jacobians=False)
        cost += 0.5 * float(r @ r)
    return cost


def linearize(graph: FactorGraph, trajectory: gp.SupportTrajectory):
    """Assemble the sparse whitened Jacobian and residual stack.

    Returns ``(jac, res, cost)`` where ``jac`` is CSR with one column
    block per support state.
    """
    dim = graph.state_dim
    rows, cols, vals = [], [], []
    res = np.empty(graph.residual_dim)
    offset = 0
    for factor in graph.factors:
        r, jacs = factor.evaluate(trajectory)
        res[offset : offset + factor.dim] = r
        for s, jac in zip(factor.states, jacs):
            rr, cc = np.meshgrid(
                np.arange(offset, offset + factor.dim),
                np.arange(s * dim, (s + 1) * dim),
                indexing="ij",
            )
            rows.append(rr.ravel())
            cols.append(cc.ravel())
            vals.append(np.asarray(jac, dtype=float).ravel())
        offset += factor.dim
    jac = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(graph.residual_dim, graph.num_states * dim),
    )
    return jac, res, 0.5 * float(res @ res)


class SolverMethod(Enum):
    GAUSS_NEWTON = "gauss_newton"
    LEVENBERG_MARQUARDT = "levenberg_marquardt"


@dataclass(frozen=True)
class SolverSettings:
    method: SolverMethod = SolverMethod.LEVENBERG_MARQUARDT
    max_iterations: int = 100
    rel_cost_tol: float = 1e-6
    abs_grad_tol: float = 1e-8
    lm_init_damping: float = 1e-4

    def __post_init__(self) -> None:
        if self.rel_cost_tol <= 0.0 or self.abs_grad_tol <= 0.0 or self.lm_init_damping <= 0.0:
            raise ValueError("solver tolerances must be positive")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be at least 1")

    @classmethod
    def from_dict(cls, spec: dict) -> "SolverSettings":
        method = spec.get("method", "levenberg_marquardt")
        return cls(
            method=SolverMethod(method),
            max_iterations=int(spec.get("max_iterations", 100)),
            rel_cost_tol=float(spec.get("rel_cost_tol", 1e-6)),
            abs_grad_tol=float(spec.get("abs_grad_tol", 1e-8)),
            lm_init_damping=float(spec.get("lm_init_damping", 1e-4)),
        )


@dataclass
class OptimizeReport:
    iterations: int
    converged: bool
    cost_trace: list[float]
    final_cost: float
    wall_time_s: float
    grad_inf_norm: float
    method: str
    message: str = ""

    def as_dict(self) -> dict:
        return {
            "iterations": self.iterations,
            "converged": self.converged,
            "cost_trace": self.cost_trace,
            "final_cost": self.final_cost,
            "wall_time_s": self.wall_time_s,
            "grad_inf_norm": self.grad_inf_norm,
            "method": self.method,
            "message": self.message,
        }


def _solve_normal(a_sparse: sp.spmatrix, damping: np.ndarray | None, g: np.ndarray) -> np.ndarray:
    """Solve ``(A + diag(damping)) x = -g``; dense Cholesky for small
    systems, sparse LU otherwise, least-squares fallback if singular."""
    dim = g.shape[0]
    if damping is not None:
        a_sparse = a_sparse + sp.diags(damping)
    if dim <= DENSE_SOLVE_LIMIT:
        dense = a_sparse.toarray()
        try:
            return cho_solve(cho_factor(dense), -g)
        except np.linalg.LinAlgError:
            return np.linalg.lstsq(dense, -g, rcond=None)[0]
    return splu(a_sparse.tocsc()).solve(-g)


def _damping_scale(diag: np.ndarray) -> np.ndarray:
    """Marquardt diagonal scaling, clamped so unobserved directions
    (zero curvature) still get regularized."""
    top = diag.max() if diag.size else 1.0
    floor = max(1e-10 * top, 1e-12)
    return np.maximum(diag, floor)


# Cost-decrease convergence looks at the total relative decrease over this
# many accepted steps, so a single cautious damped step cannot end a solve
# that is still grinding down a long valley.
CONVERGENCE_WINDOW = 5


def _converged(trace: list[float], grad_inf: float, settings: SolverSettings) -> bool:
    if grad_inf < settings.abs_grad_tol:
        return True
    if len(trace) <= CONVERGENCE_WINDOW:
        return False
    window = (trace[-1 - CONVERGENCE_WINDOW] - trace[-1]) / max(trace[-1 - CONVERGENCE_WINDOW], 1e-300)
    return window < settings.rel_cost_tol and grad_inf < 10.0 * settings.abs_grad_tol


def optimize(
    graph: FactorGraph,
    init: gp.SupportTrajectory,
    settings: SolverSettings | None = None,
) -> tuple[gp.SupportTrajectory, OptimizeReport]:
    """Solve the MAP problem from an initial trajectory.

    Levenberg-Marquardt (default) only ever accepts cost-decreasing
    steps, so the reported ``cost_trace`` is non-increasing; Gauss-Newton
    takes the plain normal-equation step each iteration.  The result is a
    local optimum; no global claim is made.
    """
    settings = settings or SolverSettings()
    t_start = time.perf_counter()
    trajectory = init
    if graph.num_states != init.num_states or graph.state_dim != 2 * init.n:
        raise ValueError(
            f"graph expects {graph.num_states} states of dim {graph.state_dim}, "
            f"trajectory has {init.num_states} states of dim {2 * init.n}"
        )
    jac, res, cost = linearize(graph, trajectory)
    if not math.isfinite(cost):
        raise ValueError("initial trajectory has non-finite cost")
    gradient = jac.T @ res
    normal = (jac.T @ jac).tocsr()
    trace = [cost]
    converged = False
    message = "max iterations reached"
    iterations = 0

    if settings.method is SolverMethod.GAUSS_NEWTON:
        while iterations < settings.max_iterations:
            iterations += 1
            grad_inf = float(np.abs(gradient).max())
            if grad_inf < settings.abs_grad_tol:
                converged = True
                message = "gradient tolerance"
                break
            delta = _solve_normal(normal, None, gradient)
            trajectory = trajectory.with_vector(trajectory.as_vector() + delta)
            jac, res, new_cost = linearize(graph, trajectory)
            gradient = jac.T @ res
            normal = (jac.T @ jac).tocsr()
            trace.append(new_cost)
            cost = new_cost
            if _converged(trace, float(np.abs(gradient).max()), settings):
                converged = True
                message = "cost decrease below tolerance"
                break
    else:
        # Marquardt (relative) damping: mu is dimensionless against diag(A).
        diag = np.asarray(normal.diagonal())
        mu = settings.lm_init_damping
        nu = 2.0
        while iterations < settings.max_iterations:
            iterations += 1
            grad_inf = float(np.abs(gradient).max())
            if grad_inf < settings.abs_grad_tol:
                converged = True
                message = "gradient tolerance"
                break
            scale = _damping_scale(diag)
            delta = _solve_normal(normal, mu * scale, gradient)
            candidate = trajectory.with_vector(trajectory.as_vector() + delta)
            new_cost = total_cost(graph, candidate)
            predicted = 0.5 * float(delta @ (mu * scale * delta - gradient))
            if math.isfinite(new_cost) and new_cost < cost and predicted > 0.0:
                rho = (cost - new_cost) / predicted
                mu *= max(1.0 / 3.0, 1.0 - (2.0 * rho - 1.0) ** 3)
                nu = 2.0
                trajectory = candidate
                cost = new_cost
                trace.append(cost)
                jac, res, _ = linearize(graph, trajectory)
                gradient = jac.T @ res
                normal = (jac.T @ jac).tocsr()
                diag = np.asarray(normal.diagonal())
                if _converged(trace, float(np.abs(gradient).max()), settings):
                    converged = True
                    message = "cost decrease below tolerance"
                    break
            else:
                mu *= nu
                nu *= 2.0
                if mu > 1e20:
                    # No decreasing step exists anymore: the cost decrease is
                    # zero, which satisfies the cost tolerance by definition.
                    # Stiff factors (1e8-scale weights) can leave a gradient
                    # plateau above the tolerance that no step removes.
                    converged = True
                    message = "damping exhausted (no decreasing step found)"
                    break

    grad_inf = float(np.abs(gradient).max())
    report = OptimizeReport(
        iterations=iterations,
        converged=converged,
        cost_trace=trace,
        final_cost=cost,
        wall_time_s=time.perf_counter() - t_start,
        grad_inf_norm=grad_inf,
        method=settings.method.value,
        message=message,
    )
    return trajectory, report


class ChainSingularityCost:
    """Production singularity cost handle: the chain's log-manipulability cost.

    Calling it returns the full ``(h, gradient, degenerate)`` tuple;
    ``value`` computes just ``h`` without the Jacobian derivative work.
    """

    def __init__(self, chain: KinematicChain, params: SingularityCostParams, task_dim: int):
        self.chain = chain
        self.params = params
        self.task_dim = task_dim

    def __call__(self, q: np.ndarray):
        return singularity_cost(self.chain, q, self.params, self.task_dim)

    def value(self, q: np.ndarray) -> float:
        return singularity_cost_value(self.chain, q, self.params, self.task_dim)


def chain_cost_fn(chain: KinematicChain, params: SingularityCostParams, task_dim: int) -> CostFn:
    """Singularity cost handle bound to a chain (see :class:`ChainSingularityCost`)."""
    return ChainSingularityCost(chain, params, task_dim)


def segment_taus(t_i: float, t_j: float, n_interp: int) -> list[float]:
    """Uniformly spaced interpolation times strictly inside a segment."""
    dt = t_j - t_i
    return [t_i + dt * k / (n_interp + 1) for k in range(1, n_interp + 1)]


def build_graph(scenario: "Scenario", trajectory: gp.SupportTrajectory) -> FactorGraph:
    """Wire a scenario into factors over the given support trajectory.

    Layout: a tight prior on state 0, a GP prior per segment, the goal
    position on the final state, and (when enabled / present) singularity
    and collision costs on every support state plus ``n_interp``
    interpolated evaluation points per segment.
    """
    chain = scenario.load_chain()
    n = chain.n
    gp_params = gp.GpPriorParams.isotropic(n, scenario.qc_scale)
    num = trajectory.num_states
    times = trajectory.times

    factors: list[Factor] = [
        StartPriorFactor(state=0, prior=trajectory.states[0].as_vector(), sigma=scenario.sigma_start)
    ]
    for i in range(num - 1):
        factors.append(GpPriorFactor(i=i, j=i + 1, dt=float(times[i + 1] - times[i]), params=gp_params))

    if scenario.enable_singularity_factors:
        cost_params = SingularityCostParams(
            lambda_max=scenario.resolve_lambda_max(chain),
            sigma_sbar=scenario.sigma_sbar,
        )
        cost_fn = chain_cost_fn(chain, cost_params, scenario.task_dim)
        for s in range(num):
            factors.append(SingularityFactor(state=s, cost_fn=cost_fn, sigma=scenario.sigma_sbar))
        for i in range(num - 1):
            for tau in segment_taus(times[i], times[i + 1], scenario.n_interp):
                factors.append(
                    InterpolatedSingularityFactor(
                        i=i,
                        j=i + 1,
                        tau=tau,
                        cost_fn=cost_fn,
                        sigma=scenario.sigma_sbar,
                        gp_params=gp_params,
                        t_i=float(times[i]),
                        t_j=float(times[i + 1]),
                    )
                )

    if scenario.obstacles:
        grid = scenario.build_sdf()
        col_params = CollisionParams(epsilon=scenario.epsilon, sigma_obs=scenario.sigma_obs)
        for s in range(num):
            factors.append(CollisionFactor(state=s, chain=chain, grid=grid, params=col_params))
        for i in range(num - 1):
            for tau in segment_taus(times[i], times[i + 1], scenario.n_interp):
                factors.append(
                    InterpolatedCollisionFactor(
                        i=i,
                        j=i + 1,
                        tau=tau,
                        chain=chain,
                        grid=grid,
                        params=col_params,
                        gp_params=gp_params,
                        t_i=float(times[i]),
                        t_j=float(times[i + 1]),
                    )
                )

    factors.append(
        GoalPositionFactor(state=num - 1, chain=chain, goal=scenario.goal_position, sigma=scenario.sigma_goal)
    )
    return FactorGraph(factors=tuple(factors), num_states=num, state_dim=2 * n)
