"""Confidence-weighted robust multi-view triangulation.

Each joint is solved independently by minimizing

    sum_c huber(w_c * ||project(X, cam_c) - uv_c||)

with Gauss-Newton / IRLS, initialized from a linear (DLT) estimate.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DegenerateGeometry, DegenerateProjection, NonFinite
from .geometry import DEPTH_EPS, CameraParams, Pose2D, Pose3D, camera_map

MAX_HALVINGS = 20
RANK_TOL = 1e-12


@dataclass(frozen=True)
class TriangulationConfig:
    huber_delta: float = 10.0
    max_iterations: int = 50
    tolerance: float = 1e-6
    min_cameras: int = 2

    def __post_init__(self):
        if not self.huber_delta > 0:
            raise ValueError("huber_delta must be > 0")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if not self.tolerance > 0:
            raise ValueError("tolerance must be > 0")
        if self.min_cameras < 2:
            raise ValueError("min_cameras must be >= 2")


@dataclass(frozen=True)
class JointObservation:
    camera: int
    uv: tuple
    weight: float = 1.0

    def __post_init__(self):
        uv = tuple(float(x) for x in np.asarray(self.uv, dtype=np.float64).reshape(2))
        if not all(np.isfinite(uv)):
            raise ValueError("observation must be finite")
        if not 0.0 <= self.weight <= 1.0:
            raise ValueError("weight must lie in [0, 1]")
        object.__setattr__(self, "uv", uv)
        object.__setattr__(self, "weight", float(self.weight))


def huber(r, delta):
    """Huber loss: ``r**2/2`` up to ``delta``, linear beyond it."""
    r = np.asarray(r, dtype=np.float64)
    out = np.where(r <= delta, 0.5 * r * r, delta * (r - 0.5 * delta))
    return float(out) if out.ndim == 0 else out


def huber_grad(r, delta):
    r = np.asarray(r, dtype=np.float64)
    out = np.where(r <= delta, r, delta)
    return float(out) if out.ndim == 0 else out


def _canonical(obs: Sequence[JointObservation]) -> list:
    # fixed summation order makes the result independent of input ordering
    return sorted(obs, key=lambda o: (o.camera, o.uv, o.weight))


def dlt_triangulate(obs: Sequence[JointObservation], cams) -> np.ndarray:
    """Linear triangulation from the stacked cross-product constraints.

    Each observation contributes the rows ``u*P3 - P1`` and ``v*P3 - P2``,
    normalized to unit length and scaled by its confidence; zero-confidence
    views therefore drop out.
    """
    cams = camera_map(cams)
    rows = []
    used = set()
    for o in _canonical(obs):
        if o.weight <= 0.0:
            continue
        P = cams[o.camera].P
        u, v = o.uv
        for row in (u * P[2] - P[0], v * P[2] - P[1]):
            # unit rows first so the confidence alone sets the relative weight
            rows.append(o.weight * row / np.linalg.norm(row))
        used.add(o.camera)
    if len(used) < 2:
        raise DegenerateGeometry("need weighted observations from at least two cameras")
    A = np.array(rows)
    _, s, vt = np.linalg.svd(A)
    if s[2] <= RANK_TOL * s[0]:
        raise DegenerateGeometry("design matrix is rank deficient (collinear rays)")
    Xh = vt[-1]
    if abs(Xh[3]) < DEPTH_EPS * np.linalg.norm(Xh):
        raise DegenerateGeometry("solution lies at infinity")
    return Xh[:3] / Xh[3]


def _residuals(X, Ps, uvs):
    h = Ps[:, :, :3] @ X + Ps[:, :, 3]
    depth = h[:, 2]
    if np.any(np.abs(depth) < DEPTH_EPS):
        raise DegenerateProjection("iterate on a camera principal plane")
    proj = h[:, :2] / depth[:, None]
    return proj - uvs, proj, depth


def _cost(X, Ps, uvs, w, delta):
    try:
        r, _, depth = _residuals(X, Ps, uvs)
    except DegenerateProjection:
        return np.inf
    if np.any(depth <= 0):
        # behind a camera that observed the joint
        return np.inf
    s = w * np.sqrt(np.sum(r * r, axis=1))
    return float(np.sum(huber(s, delta)))


def _solve(X0, Ps, uvs, w, cfg: TriangulationConfig):
    delta = cfg.huber_delta
    X = X0.copy()
    cost = _cost(X, Ps, uvs, w, delta)
    if not np.isfinite(cost):
        raise NonFinite("initial estimate projects onto a principal plane")
    for _ in range(cfg.max_iterations):
        r, proj, depth = _residuals(X, Ps, uvs)
        norms = np.sqrt(np.sum(r * r, axis=1))
        s = w * norms
        irls = np.where(s <= delta, 1.0, delta / np.maximum(s, 1e-300))
        lam = irls * w * w
        # d(proj)/dX = (P_row[:3] - proj * P3[:3]) / depth
        J = (Ps[:, :2, :3] - proj[:, :, None] * Ps[:, 2:3, :3]) / depth[:, None, None]
        H = np.einsum("c,cij,cik->jk", lam, J, J)
        g = np.einsum("c,cij,ci->j", lam, J, r)
        try:
            step = -np.linalg.solve(H, g)
        except np.linalg.LinAlgError:
            break
        if not np.all(np.isfinite(step)):
            raise NonFinite("non-finite Gauss-Newton step")
        t = 1.0
        accepted = False
        for _ in range(MAX_HALVINGS + 1):
            cand = X + t * step
            c = _cost(cand, Ps, uvs, w, delta)
            if c <= cost:
                accepted = True
                break
            t *= 0.5
        if not accepted:
            break
        X, cost = cand, c
        if t * np.linalg.norm(step) < cfg.tolerance:
            break
    if not (np.all(np.isfinite(X)) and np.isfinite(cost)):
        raise NonFinite("triangulation produced non-finite values")
    return X, cost


def _stack(obs, cams):
    cams = camera_map(cams)
    obs = _canonical(obs)
    Ps = np.stack([cams[o.camera].P for o in obs])
    uvs = np.array([o.uv for o in obs])
    w = np.array([o.weight for o in obs])
    return obs, Ps, uvs, w


def reprojection_cost(X, obs, cams, delta) -> float:
    """Value of the weighted Huber objective at ``X``."""
    _, Ps, uvs, w = _stack(obs, cams)
    return _cost(np.asarray(X, dtype=np.float64), Ps, uvs, w, delta)


def triangulate_joint(obs: Sequence[JointObservation], cams, cfg: TriangulationConfig = TriangulationConfig()):
    """Robustly triangulate one joint.

    Returns
    -------
    (X, cost)
        World position in mm and the objective value at that point. The cost
        is never above the cost of the DLT initializer.
    """
    if len(obs) < cfg.min_cameras:
        raise DegenerateGeometry(f"need at least {cfg.min_cameras} observations, got {len(obs)}")
    obs, Ps, uvs, w = _stack(obs, cams)
    X0 = dlt_triangulate(obs, cams)
    return _solve(X0, Ps, uvs, w, cfg)


def gather_observations(frame: Sequence[Pose2D], joint: int) -> list:
    return [
        JointObservation(p.camera, p.joints[joint], p.confidence[joint])
        for p in frame
        if p.visible[joint]
    ]


def triangulate_pose(frame: Sequence[Pose2D], cams, cfg: TriangulationConfig = TriangulationConfig()) -> Pose3D:
    """Triangulate every joint of a multi-view frame.

    Joints seen in fewer than ``cfg.min_cameras`` views, or whose solve fails,
    are marked absent.
    """
    cams = camera_map(cams)
    n = frame[0].num_joints if frame else 0
    joints = np.zeros((n, 3))
    present = np.zeros(n, dtype=bool)
    for j in range(n):
        obs = gather_observations(frame, j)
        if len(obs) < cfg.min_cameras:
            continue
        try:
            X, _ = triangulate_joint(obs, cams, cfg)
        except (DegenerateGeometry, NonFinite, DegenerateProjection):
            continue
        joints[j] = X
        present[j] = True
    return Pose3D(joints, present)
