"""Manipulability measure, ellipsoid, and the singularity-avoidance cost.

The measure is ``lambda = sqrt(det(J J^T))``, the product of the singular
values of the task Jacobian; it is proportional to the volume of the
velocity ellipsoid traced by unit joint rates.  The avoidance cost is the
log-ratio ``ln(lambda_max / lambda)`` whose Jacobian, conveniently, drops
the leading ``lambda`` factor of the raw gradient and therefore stays
well scaled across the orders of magnitude lambda spans on a trajectory.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import NamedTuple

import numpy as np

from .kinematics import KinematicChain, geometric_jacobian, jacobian_partials

__all__ = [
    "SIGMA_MIN",
    "LAMBDA_FLOOR",
    "ManipulabilityEllipsoid",
    "SingularityCostParams",
    "Classification",
    "ManipulabilityGradient",
    "SingularityCost",
    "manipulability",
    "ellipsoid",
    "manipulability_gradient",
    "singularity_cost",
    "singularity_cost_value",
    "classify_configuration",
    "likelihood",
    "estimate_lambda_max",
]

# Singular values are clamped at SIGMA_MIN inside (J J^T)^-1 and lambda at
# LAMBDA_FLOOR inside the log, so cost and gradient stay finite at (and
# can pull away from) exact singularities.
SIGMA_MIN = 1e-6
LAMBDA_FLOOR = 1e-9


@dataclass(frozen=True)
class ManipulabilityEllipsoid:
    """Principal axes of the task-velocity ellipsoid at one configuration."""

    singular_values: np.ndarray  # descending, >= 0
    axes: np.ndarray  # m x m, columns are the principal directions
    volume_measure: float  # product of singular values


class Classification(Enum):
    NEARLY_SINGULAR = "S"
    NOT_NEARLY_SINGULAR = "S_bar"


@dataclass(frozen=True)
class SingularityCostParams:
    """Parameters of the log-ratio avoidance cost.

    ``sigma_sbar`` is the variance of the scalar residual (a covariance,
    not a standard deviation).  ``near_singular_threshold`` defaults to
    1% of ``lambda_max`` and only feeds the diagnostic classifier, never
    the optimization.
    """

    lambda_max: float
    sigma_sbar: float
    lambda_floor: float = LAMBDA_FLOOR
    near_singular_threshold: float | None = None

    def __post_init__(self) -> None:
        if self.lambda_max <= 0.0:
            raise ValueError("lambda_max must be positive")
        if self.sigma_sbar <= 0.0:
            raise ValueError("sigma_sbar must be positive")
        if self.near_singular_threshold is None:
            object.__setattr__(self, "near_singular_threshold", 0.01 * self.lambda_max)
        if not self.lambda_floor < self.near_singular_threshold < self.lambda_max:
            raise ValueError("require lambda_floor < near_singular_threshold < lambda_max")


class ManipulabilityGradient(NamedTuple):
    values: np.ndarray  # d lambda / d theta, length n
    degenerate: bool  # True when singular values were clamped


class SingularityCost(NamedTuple):
    h: float
    gradient: np.ndarray  # d h / d theta, length n
    degenerate: bool


def _checked(J) -> np.ndarray:
    J = np.asarray(J, dtype=float)
    if J.ndim != 2:
        raise ValueError(f"Jacobian must be a matrix, got shape {J.shape}")
    m, n = J.shape
    if m > n:
        raise ValueError(f"task dimension {m} exceeds joint count {n}; JJ^T would be rank deficient by construction")
    if not np.all(np.isfinite(J)):
        raise ValueError("Jacobian contains non-finite values")
    return J


def manipulability(J) -> float:
    """Yoshikawa measure ``sqrt(det(J J^T))`` of an m x n Jacobian, m <= n.

    Computed as the product of singular values (never through the
    determinant of the Gram matrix, which underflows near singularities).
    Returns 0 for rank-deficient ``J``.
    """
    J = _checked(J)
    s = np.linalg.svd(J, compute_uv=False)
    return float(np.prod(s))


def ellipsoid(J) -> ManipulabilityEllipsoid:
    """Manipulability ellipsoid of ``J`` from its singular value decomposition."""
    J = _checked(J)
    u, s, _ = np.linalg.svd(J, full_matrices=False)
    return ManipulabilityEllipsoid(singular_values=s, axes=u, volume_measure=float(np.prod(s)))


def _gram_terms(chain: KinematicChain, q, task_dim: int):
    """SVD-side quantities shared by the gradient and the log cost.

    Returns ``(lam, traces, degenerate)`` where ``traces[j]`` is
    ``Tr((JJ^T)^-1 (dJ_j J^T + J dJ_j^T))`` with singular values clamped
    at ``SIGMA_MIN`` inside the inverse.
    """
    jset = jacobian_partials(chain, q, task_dim)
    J = jset.jacobian
    u, s, _ = np.linalg.svd(J, full_matrices=False)
    lam = float(np.prod(s))
    degenerate = bool(s[-1] < SIGMA_MIN)
    inv_gram = (u / np.maximum(s, SIGMA_MIN) ** 2) @ u.T
    traces = np.empty(chain.n)
    for j, dJ in enumerate(jset.partials):
        sym = dJ @ J.T
        sym = sym + sym.T
        traces[j] = float(np.sum(inv_gram * sym))  # Tr of symmetric product
    return lam, traces, degenerate


def manipulability_gradient(chain: KinematicChain, q, task_dim: int = 6) -> ManipulabilityGradient:
    """Analytic gradient of the manipulability measure.

    Per joint j: ``(lambda/2) Tr((JJ^T)^-1 (dJ_j J^T + J dJ_j^T))``, with
    the Jacobian derivatives from :func:`jacobian_partials`.  Near a
    singularity the clamped inverse keeps the value finite and the result
    is flagged degenerate.
    """
    lam, traces, degenerate = _gram_terms(chain, q, task_dim)
    return ManipulabilityGradient(values=0.5 * lam * traces, degenerate=degenerate)


def singularity_cost(
    chain: KinematicChain,
    q,
    params: SingularityCostParams,
    task_dim: int = 6,
) -> SingularityCost:
    """Log-ratio avoidance cost ``h = ln(lambda_max / lambda)`` and its gradient.

    The gradient is ``-(1/2) Tr((JJ^T)^-1 (dJ_j J^T + J dJ_j^T))``: the
    ``lambda`` of the raw manipulability gradient cancels against the
    ``1/lambda`` of the log, so it is never multiplied in.  ``lambda`` is
    clamped at ``params.lambda_floor`` inside the log.
    """
    lam, traces, degenerate = _gram_terms(chain, q, task_dim)
    h = math.log(params.lambda_max / max(lam, params.lambda_floor))
    return SingularityCost(h=h, gradient=-0.5 * traces, degenerate=degenerate)


def singularity_cost_value(
    chain: KinematicChain,
    q,
    params: SingularityCostParams,
    task_dim: int = 6,
) -> float:
    """The scalar cost of :func:`singularity_cost` without its gradient
    (skips the Jacobian joint derivatives; used in solver line searches)."""
    lam = manipulability(geometric_jacobian(chain, q, task_dim))
    return math.log(params.lambda_max / max(lam, params.lambda_floor))


def classify_configuration(lam: float, params: SingularityCostParams) -> Classification:
    """Diagnostic label: nearly singular iff lambda is strictly below the threshold."""
    if lam < 0.0:
        raise ValueError("manipulability cannot be negative")
    if lam < params.near_singular_threshold:
        return Classification.NEARLY_SINGULAR
    return Classification.NOT_NEARLY_SINGULAR


def likelihood(h: float, sigma_sbar: float) -> float:
    """Gaussian-shaped likelihood ``exp(-h^2 / (2 sigma))`` of not being nearly singular."""
    if sigma_sbar <= 0.0:
        raise ValueError("sigma_sbar must be positive")
    return math.exp(-0.5 * h * h / sigma_sbar)


def estimate_lambda_max(
    chain: KinematicChain,
    task_dim: int = 6,
    num_samples: int = 100_000,
    seed: int = 0,
    joint_range: tuple[float, float] = (-math.pi, math.pi),
) -> float:
    """Estimate the robot's manipulability ceiling by uniform sampling.

    Draws ``num_samples`` configurations uniformly in ``joint_range`` and
    returns the largest measure seen.  Model files cache the result so
    planning runs never pay for it.
    """
    rng = np.random.default_rng(seed)
    lo, hi = joint_range
    best = 0.0
    for _ in range(num_samples):
        q = rng.uniform(lo, hi, chain.n)
        best = max(best, manipulability(geometric_jacobian(chain, q, task_dim)))
    return best
