"""Workspace obstacles as a voxelized signed distance field, plus the
hinge-loss collision cost evaluated at the robot's body spheres."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .kinematics import KinematicChain, body_sphere_states

__all__ = [
    "SdfGrid",
    "CollisionParams",
    "SdfQuery",
    "sdf_query",
    "hinge_cost",
    "collision_residual",
    "sphere_clearances",
    "box_distance",
    "build_box_sdf",
    "build_workspace_sdf",
    "save_sdf",
    "load_sdf",
]


@dataclass(frozen=True)
class SdfGrid:
    """Signed distances (negative inside obstacles) sampled on a regular grid.

    ``data[i, j, k]`` is the distance at ``origin + cell_size * (i, j, k)``.
    """

    origin: np.ndarray
    cell_size: float
    data: np.ndarray

    def __post_init__(self) -> None:
        origin = np.asarray(self.origin, dtype=float).reshape(3)
        data = np.asarray(self.data, dtype=float)
        if self.cell_size <= 0.0:
            raise ValueError("cell_size must be positive")
        if data.ndim != 3:
            raise ValueError(f"SDF data must be a 3-d array, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("SDF data contains non-finite values")
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "data", data)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape

    @property
    def upper(self) -> np.ndarray:
        """Position of the last grid node."""
        return self.origin + self.cell_size * (np.array(self.dims) - 1)


@dataclass(frozen=True)
class CollisionParams:
    """Safety margin epsilon (meters) and residual variance sigma_obs."""

    epsilon: float = 0.1
    sigma_obs: float = 1e-3

    def __post_init__(self) -> None:
        if self.epsilon < 0.0:
            raise ValueError("epsilon cannot be negative")
        if self.sigma_obs <= 0.0:
            raise ValueError("sigma_obs must be positive")


class SdfQuery(NamedTuple):
    distance: float
    gradient: np.ndarray
    clamped: bool  # True when the query point was outside the grid


def _interpolate_many(grid: SdfGrid, points: np.ndarray) -> np.ndarray:
    """Trilinear interpolation at points already clamped into the grid; (k,3) -> (k,)."""
    rel = (points - grid.origin) / grid.cell_size
    dims = np.array(grid.dims)
    idx = np.clip(np.floor(rel).astype(int), 0, dims - 2)
    f = rel - idx
    i, j, k = idx[:, 0], idx[:, 1], idx[:, 2]
    fx, fy, fz = f[:, 0], f[:, 1], f[:, 2]
    d = grid.data
    c00 = d[i, j, k] * (1 - fx) + d[i + 1, j, k] * fx
    c10 = d[i, j + 1, k] * (1 - fx) + d[i + 1, j + 1, k] * fx
    c01 = d[i, j, k + 1] * (1 - fx) + d[i + 1, j, k + 1] * fx
    c11 = d[i, j + 1, k + 1] * (1 - fx) + d[i + 1, j + 1, k + 1] * fx
    c0 = c00 * (1 - fy) + c10 * fy
    c1 = c01 * (1 - fy) + c11 * fy
    return c0 * (1 - fz) + c1 * fz


def sdf_query(grid: SdfGrid, point) -> SdfQuery:
    """Interpolated distance and gradient at a workspace point.

    Out-of-bounds queries are clamped to the border and flagged.  The
    gradient is the exact derivative of the trilinear interpolant inside
    the enclosing cell, so it agrees with finite differences of the
    distance to rounding (a one-cell smoothed stencil would disagree by
    O(cell) near box edges and break the cost Jacobian contract).
    """
    point = np.asarray(point, dtype=float).reshape(3)
    lo = grid.origin
    hi = grid.upper
    clamped = bool(np.any(point < lo) or np.any(point > hi))
    p = np.clip(point, lo, hi)
    rel = (p - grid.origin) / grid.cell_size
    dims = np.array(grid.dims)
    idx = np.clip(np.floor(rel).astype(int), 0, dims - 2)
    fx, fy, fz = rel - idx
    i, j, k = idx
    c = grid.data[i : i + 2, j : j + 2, k : k + 2]
    wx = np.array([1.0 - fx, fx])
    wy = np.array([1.0 - fy, fy])
    wz = np.array([1.0 - fz, fz])
    dist = np.einsum("ijk,i,j,k->", c, wx, wy, wz)
    diff = np.array([-1.0, 1.0])
    gradient = np.array(
        [
            np.einsum("ijk,i,j,k->", c, diff, wy, wz),
            np.einsum("ijk,i,j,k->", c, wx, diff, wz),
            np.einsum("ijk,i,j,k->", c, wx, wy, diff),
        ]
    ) / grid.cell_size
    return SdfQuery(distance=float(dist), gradient=gradient, clamped=clamped)


def hinge_cost(distance: float, epsilon: float) -> tuple[float, float]:
    """Hinge penalty on clearance: ``epsilon - d`` inside the margin, else 0.

    Returns ``(cost, d cost / d distance)``; the slope is -1 on the
    penalized side (including exactly at the margin) and 0 outside.
    """
    if distance <= epsilon:
        return epsilon - distance, -1.0
    return 0.0, 0.0


def collision_residual(
    chain: KinematicChain,
    q,
    grid: SdfGrid,
    params: CollisionParams,
    with_jacobian: bool = True,
) -> tuple[np.ndarray, np.ndarray | None]:
    """Hinge costs of every body sphere and their joint-space Jacobian.

    Each sphere contributes ``hinge(sdf(center) - radius, epsilon)``; the
    Jacobian row chains the hinge slope, the field gradient, and the
    linear Jacobian of the sphere center.  Gradient stencils are only
    evaluated for spheres inside the margin.
    """
    spheres = chain.body_spheres
    centers, center_jacs = body_sphere_states(chain, q)
    residual = np.zeros(len(spheres))
    if len(spheres) == 0:
        return residual, (np.zeros((0, chain.n)) if with_jacobian else None)
    clamped = np.clip(centers, grid.origin, grid.upper)
    distances = _interpolate_many(grid, clamped)
    jac = np.zeros((len(spheres), chain.n)) if with_jacobian else None
    for row, sphere in enumerate(spheres):
        cost, slope = hinge_cost(float(distances[row]) - sphere.radius, params.epsilon)
        residual[row] = cost
        if with_jacobian and slope != 0.0:
            gradient = sdf_query(grid, centers[row]).gradient
            jac[row] = slope * (gradient @ center_jacs[row])
    return residual, jac


def sphere_clearances(chain: KinematicChain, q, grid: SdfGrid) -> np.ndarray:
    """Signed clearance ``sdf(center) - radius`` of every body sphere."""
    centers, _ = body_sphere_states(chain, q)
    radii = np.array([s.radius for s in chain.body_spheres])
    clamped = np.clip(centers, grid.origin, grid.upper)
    return _interpolate_many(grid, clamped) - radii


def box_distance(points, center, half_extents) -> np.ndarray:
    """Exact signed distance from points to an axis-aligned box."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    delta = np.abs(points - np.asarray(center, dtype=float)) - np.asarray(half_extents, dtype=float)
    outside = np.linalg.norm(np.maximum(delta, 0.0), axis=-1)
    inside = np.minimum(np.max(delta, axis=-1), 0.0)
    return outside + inside


def build_box_sdf(center, half_extents, origin, cell_size: float, dims) -> SdfGrid:
    """Sample the analytic distance of one axis-aligned box onto a grid."""
    return build_workspace_sdf([(center, half_extents)], origin, cell_size, dims)


def build_workspace_sdf(boxes, origin, cell_size: float, dims) -> SdfGrid:
    """SDF of a union of axis-aligned boxes (pointwise minimum of distances)."""
    if not boxes:
        raise ValueError("need at least one obstacle box")
    origin = np.asarray(origin, dtype=float).reshape(3)
    dims = tuple(int(d) for d in dims)
    axes = [origin[i] + cell_size * np.arange(dims[i]) for i in range(3)]
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    points = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)
    data = np.full(points.shape[0], np.inf)
    for center, half_extents in boxes:
        if np.any(np.asarray(half_extents, dtype=float) <= 0.0):
            raise ValueError("box half extents must be positive")
        data = np.minimum(data, box_distance(points, center, half_extents))
    return SdfGrid(origin=origin, cell_size=float(cell_size), data=data.reshape(dims))


def save_sdf(grid: SdfGrid, path: str | Path) -> None:
    """Write a grid: one JSON header line, then little-endian float64 data
    in C order (x index slowest)."""
    header = {
        "origin": [float(v) for v in grid.origin],
        "cell_size": grid.cell_size,
        "dims": [int(d) for d in grid.dims],
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header).encode("ascii") + b"\n")
        fh.write(np.ascontiguousarray(grid.data, dtype="<f8").tobytes())


def load_sdf(path: str | Path) -> SdfGrid:
    """Read a grid written by :func:`save_sdf`."""
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode("ascii"))
        raw = fh.read()
    dims = tuple(int(d) for d in header["dims"])
    count = dims[0] * dims[1] * dims[2]
    data = np.frombuffer(raw, dtype="<f8", count=count).reshape(dims)
    return SdfGrid(origin=np.array(header["origin"], dtype=float), cell_size=float(header["cell_size"]), data=data.copy())
