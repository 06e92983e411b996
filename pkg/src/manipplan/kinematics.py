"""Serial-chain robot models and differential kinematics.

Robots are described by standard (distal) Denavit-Hartenberg parameters:
the transform of link ``i`` at joint angle ``q`` is
``Rz(q + theta_offset) @ Tz(d) @ Tx(a) @ Rx(alpha)``.  Only revolute
joints are supported.  On top of the plain forward kinematics this module
provides the geometric Jacobian and its analytic derivative with respect
to every joint angle, which downstream cost functions need.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

__all__ = [
    "ModelError",
    "DhLink",
    "BodySphere",
    "Pose",
    "KinematicChain",
    "JacobianSet",
    "forward_kinematics",
    "geometric_jacobian",
    "jacobian_partials",
    "point_jacobian",
    "planar_chain",
    "chain_from_dict",
    "load_chain",
    "builtin_model_path",
]

# Orthonormality tolerance for rotation matrices.
ROTATION_TOL = 1e-9

# Task dimensions: 2 = planar (x, y rows), 3 = position, 6 = full twist.
TASK_DIMS = (2, 3, 6)


class ModelError(ValueError):
    """Invalid robot model or joint configuration."""


@dataclass(frozen=True)
class DhLink:
    """One standard-DH link: ``Rz(q + theta_offset) Tz(d) Tx(a) Rx(alpha)``."""

    a: float
    alpha: float
    d: float
    theta_offset: float = 0.0
    joint_kind: str = "revolute"

    def __post_init__(self) -> None:
        values = (self.a, self.alpha, self.d, self.theta_offset)
        if not all(math.isfinite(v) for v in values):
            raise ModelError(f"non-finite DH parameter in {values}")
        if self.joint_kind != "revolute":
            raise ModelError(f"unsupported joint kind {self.joint_kind!r}; only revolute joints are modeled")

    def transform(self, q: float) -> np.ndarray:
        """4x4 homogeneous transform of this link at joint angle ``q``."""
        th = q + self.theta_offset
        ct, st = math.cos(th), math.sin(th)
        ca, sa = math.cos(self.alpha), math.sin(self.alpha)
        return np.array(
            [
                [ct, -st * ca, st * sa, self.a * ct],
                [st, ct * ca, -ct * sa, self.a * st],
                [0.0, sa, ca, self.d],
                [0.0, 0.0, 0.0, 1.0],
            ]
        )


@dataclass(frozen=True)
class BodySphere:
    """Collision sphere rigidly attached to a link frame.

    ``link_index`` is 0-based: sphere ``i`` rides on the frame reached
    after link ``i`` (so it moves with joints ``0..i``).  ``offset`` is
    expressed in that link frame, meters.
    """

    link_index: int
    offset: np.ndarray
    radius: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "offset", np.asarray(self.offset, dtype=float).reshape(3))
        if self.radius <= 0.0:
            raise ModelError(f"sphere radius must be positive, got {self.radius}")


@dataclass(frozen=True)
class Pose:
    """Rigid transform: 3x3 rotation plus translation in meters."""

    rotation: np.ndarray
    position: np.ndarray

    def __post_init__(self) -> None:
        rot = np.asarray(self.rotation, dtype=float)
        pos = np.asarray(self.position, dtype=float).reshape(3)
        if rot.shape != (3, 3):
            raise ModelError(f"rotation must be 3x3, got {rot.shape}")
        if np.abs(rot.T @ rot - np.eye(3)).max() > ROTATION_TOL:
            raise ModelError("rotation matrix is not orthonormal")
        if abs(np.linalg.det(rot) - 1.0) > ROTATION_TOL:
            raise ModelError("rotation matrix must be proper (det +1)")
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "position", pos)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_rpy_xyz(cls, rpy, xyz) -> "Pose":
        """Pose from roll-pitch-yaw (extrinsic x-y-z, i.e. Rz@Ry@Rx) and translation."""
        roll, pitch, yaw = (float(v) for v in rpy)
        cr, sr = math.cos(roll), math.sin(roll)
        cp, sp = math.cos(pitch), math.sin(pitch)
        cy, sy = math.cos(yaw), math.sin(yaw)
        rx = np.array([[1, 0, 0], [0, cr, -sr], [0, sr, cr]])
        ry = np.array([[cp, 0, sp], [0, 1, 0], [-sp, 0, cp]])
        rz = np.array([[cy, -sy, 0], [sy, cy, 0], [0, 0, 1]])
        return cls(rz @ ry @ rx, np.asarray(xyz, dtype=float))

    def as_matrix(self) -> np.ndarray:
        out = np.eye(4)
        out[:3, :3] = self.rotation
        out[:3, 3] = self.position
        return out

    def transform_point(self, point) -> np.ndarray:
        return self.rotation @ np.asarray(point, dtype=float) + self.position


@dataclass(frozen=True)
class KinematicChain:
    """Serial manipulator: DH links, base pose, and attached collision spheres.

    ``lambda_max`` optionally caches the robot's manipulability ceiling
    (see :func:`manipplan.manipulability.estimate_lambda_max`); model
    files ship it precomputed.
    """

    links: tuple[DhLink, ...]
    base_pose: Pose = field(default_factory=Pose.identity)
    body_spheres: tuple[BodySphere, ...] = ()
    name: str = ""
    lambda_max: float | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "links", tuple(self.links))
        object.__setattr__(self, "body_spheres", tuple(self.body_spheres))
        if len(self.links) < 1:
            raise ModelError("chain needs at least one link")
        for sphere in self.body_spheres:
            if not 0 <= sphere.link_index < self.n:
                raise ModelError(f"sphere link index {sphere.link_index} out of range for {self.n} links")

    @property
    def n(self) -> int:
        """Number of joints (= number of links)."""
        return len(self.links)


@dataclass(frozen=True)
class JacobianSet:
    """Geometric Jacobian together with its joint-angle derivatives.

    ``partials[k]`` is the elementwise derivative of ``jacobian`` with
    respect to joint ``k``; every entry has the same m x n shape.
    """

    jacobian: np.ndarray
    partials: tuple[np.ndarray, ...]


def _as_config(chain: KinematicChain, q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    if q.shape != (chain.n,):
        raise ModelError(f"configuration has shape {q.shape}, expected ({chain.n},)")
    if not np.all(np.isfinite(q)):
        raise ModelError("configuration contains non-finite values")
    return q


def _check_task_dim(task_dim: int) -> None:
    if task_dim not in TASK_DIMS:
        raise ModelError(f"task_dim must be one of {TASK_DIMS}, got {task_dim}")


def _fk_matrices(chain: KinematicChain, q: np.ndarray) -> np.ndarray:
    """Stacked 4x4 frames: index 0 is the base, index n the end-effector."""
    out = np.empty((chain.n + 1, 4, 4))
    out[0] = chain.base_pose.as_matrix()
    for k, link in enumerate(chain.links):
        out[k + 1] = out[k] @ link.transform(q[k])
    return out


def forward_kinematics(chain: KinematicChain, q) -> list[Pose]:
    """Poses of all link frames at configuration ``q``.

    Returns n+1 poses: entry 0 is the base frame, entry k the frame after
    link k, and the last entry the end-effector frame.
    """
    q = _as_config(chain, q)
    frames = _fk_matrices(chain, q)
    return [Pose(T[:3, :3], T[:3, 3]) for T in frames]


def _jacobian_from_frames(frames: np.ndarray, target: np.ndarray, last_joint: int) -> np.ndarray:
    """6 x n geometric Jacobian of ``target`` (a point on the frame after
    ``last_joint``); columns for joints beyond ``last_joint`` are zero."""
    n = frames.shape[0] - 1
    axes = frames[:-1, :3, 2]
    origins = frames[:-1, :3, 3]
    jac = np.zeros((6, n))
    m = last_joint + 1
    jac[:3, :m] = np.cross(axes[:m], target - origins[:m]).T
    jac[3:, :m] = axes[:m].T
    return jac


def geometric_jacobian(chain: KinematicChain, q, task_dim: int = 6) -> np.ndarray:
    """Geometric Jacobian mapping joint rates to end-effector velocity.

    Column j is ``[z_j x (p_e - o_j); z_j]`` for revolute joints, rows
    restricted by ``task_dim`` (6 full twist, 3 linear velocity, 2 planar
    x-y velocity).
    """
    q = _as_config(chain, q)
    _check_task_dim(task_dim)
    frames = _fk_matrices(chain, q)
    full = _jacobian_from_frames(frames, frames[-1, :3, 3], chain.n - 1)
    return full[:task_dim] if task_dim != 6 else full


def jacobian_partials(chain: KinematicChain, q, task_dim: int = 6) -> JacobianSet:
    """Jacobian plus analytic derivatives with respect to each joint.

    Uses the geometric identities of a revolute chain: rotating joint k
    turns every downstream axis (``d z_j / d theta_k = z_k x z_j`` for
    j > k) and sweeps every downstream point about the joint k axis line;
    the linear rows follow by the product rule.
    """
    q = _as_config(chain, q)
    _check_task_dim(task_dim)
    n = chain.n
    frames = _fk_matrices(chain, q)
    axes = frames[:-1, :3, 2]
    origins = frames[:-1, :3, 3]
    p_e = frames[-1, :3, 3]
    rel = p_e - origins
    dpe = np.cross(axes, rel)  # row k = d p_e / d theta_k

    jac = np.zeros((6, n))
    jac[:3] = dpe.T
    jac[3:] = axes.T

    rows = slice(0, task_dim)
    partials = []
    for k in range(n):
        a_k = axes[k]
        d_jac = np.zeros((6, n))
        # Joints j <= k sit upstream of joint k: their axis and origin do
        # not move, only the end-effector point does.
        d_jac[:3, : k + 1] = np.cross(axes[: k + 1], dpe[k]).T
        if k + 1 < n:
            d_axes = np.cross(a_k, axes[k + 1 :])
            d_jac[3:, k + 1 :] = d_axes.T
            d_jac[:3, k + 1 :] = (
                np.cross(d_axes, rel[k + 1 :]) + np.cross(axes[k + 1 :], np.cross(a_k, rel[k + 1 :]))
            ).T
        partials.append(d_jac[rows].copy())
    return JacobianSet(jacobian=jac[rows].copy(), partials=tuple(partials))


def point_jacobian(chain: KinematicChain, q, link_index: int, offset) -> tuple[np.ndarray, np.ndarray]:
    """Position and 3 x n linear Jacobian of a point fixed in a link frame.

    The point is ``offset`` expressed in the frame after link
    ``link_index``; columns of joints that cannot move it are zero.
    """
    q = _as_config(chain, q)
    if not 0 <= link_index < chain.n:
        raise ModelError(f"link index {link_index} out of range")
    frames = _fk_matrices(chain, q)
    frame = frames[link_index + 1]
    point = frame[:3, :3] @ np.asarray(offset, dtype=float) + frame[:3, 3]
    jac = _jacobian_from_frames(frames, point, link_index)
    return point, jac[:3]


def body_sphere_states(chain: KinematicChain, q) -> tuple[np.ndarray, np.ndarray]:
    """Centers and linear Jacobians of all body spheres from one FK pass.

    Returns ``(centers, jacobians)`` with shapes (K, 3) and (K, 3, n).
    """
    q = _as_config(chain, q)
    frames = _fk_matrices(chain, q)
    k = len(chain.body_spheres)
    centers = np.empty((k, 3))
    jacs = np.zeros((k, 3, chain.n))
    for row, sphere in enumerate(chain.body_spheres):
        frame = frames[sphere.link_index + 1]
        center = frame[:3, :3] @ sphere.offset + frame[:3, 3]
        centers[row] = center
        m = sphere.link_index + 1
        axes = frames[:m, :3, 2]
        origins = frames[:m, :3, 3]
        jacs[row, :, :m] = np.cross(axes, center - origins).T
    return centers, jacs


def planar_chain(lengths, name: str = "planar") -> KinematicChain:
    """All-revolute planar arm in the x-y plane with the given link lengths."""
    links = tuple(DhLink(a=float(l), alpha=0.0, d=0.0) for l in lengths)
    return KinematicChain(links=links, name=name)


# ---------------------------------------------------------------------------
# Model files
# ---------------------------------------------------------------------------

def chain_from_dict(spec: dict) -> KinematicChain:
    """Build a chain from the JSON model schema.

    Schema: ``{name, dh: [{a, alpha, d, theta_offset}], base_pose: {rpy,
    xyz}, body_spheres: [{link, offset, radius}], lambda_max?}``; angles
    in radians, lengths in meters.
    """
    try:
        links = tuple(
            DhLink(
                a=float(row["a"]),
                alpha=float(row["alpha"]),
                d=float(row["d"]),
                theta_offset=float(row.get("theta_offset", 0.0)),
            )
            for row in spec["dh"]
        )
    except KeyError as exc:
        raise ModelError(f"model is missing DH field {exc}") from exc
    base = spec.get("base_pose", {})
    base_pose = Pose.from_rpy_xyz(base.get("rpy", (0, 0, 0)), base.get("xyz", (0, 0, 0)))
    spheres = tuple(
        BodySphere(link_index=int(row["link"]), offset=row["offset"], radius=float(row["radius"]))
        for row in spec.get("body_spheres", ())
    )
    lam_max = spec.get("lambda_max")
    return KinematicChain(
        links=links,
        base_pose=base_pose,
        body_spheres=spheres,
        name=str(spec.get("name", "")),
        lambda_max=None if lam_max is None else float(lam_max),
    )


def builtin_model_path(name: str) -> Path:
    """Path of a model file shipped with the package (e.g. ``ur10``)."""
    root = resources.files("manipplan").joinpath("data", "models", f"{name}.json")
    path = Path(str(root))
    if not path.is_file():
        raise ModelError(f"no built-in robot model named {name!r}")
    return path


def load_chain(source: str | Path) -> KinematicChain:
    """Load a robot model from a JSON file path or a built-in model name."""
    path = Path(source)
    if not path.is_file() and not path.suffix:
        path = builtin_model_path(str(source))
    try:
        spec = json.loads(path.read_text())
    except OSError as exc:
        raise ModelError(f"cannot read robot model {source!r}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ModelError(f"robot model {source!r} is not valid JSON: {exc}") from exc
    return chain_from_dict(spec)
