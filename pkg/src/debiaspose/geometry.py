"""Pinhole cameras, pose containers and the pose-normalization preprocessing.

Cameras are stored as a single 3x4 projection matrix ``P`` mapping homogeneous
world millimetres to homogeneous pixels. Poses are plain arrays plus a boolean
mask over the joint set.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import DegenerateProjection, DegenerateSpine, MissingPelvis

DEPTH_EPS = 1e-12
SPINE_EPS = 1e-6


@dataclass(frozen=True, eq=False)
class CameraParams:
    id: int
    P: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        P = np.array(self.P, dtype=np.float64).reshape(3, 4)
        if not np.all(np.isfinite(P)):
            raise ValueError("projection matrix must be finite")
        if np.linalg.matrix_rank(P) != 3:
            raise ValueError("projection matrix must have rank 3")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image width and height must be positive")
        P.setflags(write=False)
        object.__setattr__(self, "P", P)

    @classmethod
    def from_krt(cls, id, K, R, t, width, height):
        """Compose ``P = K [R | t]``."""
        K = np.asarray(K, dtype=np.float64)
        Rt = np.hstack([np.asarray(R, dtype=np.float64), np.asarray(t, dtype=np.float64).reshape(3, 1)])
        return cls(id=int(id), P=K @ Rt, width=int(width), height=int(height))

    @property
    def scale(self) -> float:
        """Pixel normalization factor, ``min(width, height)``."""
        return float(min(self.width, self.height))

    @property
    def center(self) -> np.ndarray:
        """Camera centre in world coordinates (right null vector of P)."""
        M = self.P[:, :3]
        return -np.linalg.solve(M, self.P[:, 3])

    @property
    def optical_axis(self) -> np.ndarray:
        """Unit viewing direction (towards positive depth)."""
        M = self.P[:, :3]
        axis = M[2] * np.sign(np.linalg.det(M))
        return axis / np.linalg.norm(axis)

    def to_dict(self) -> dict:
        return {
            "id": int(self.id),
            "P": [float(x) for x in self.P.ravel()],
            "width": int(self.width),
            "height": int(self.height),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "CameraParams":
        if len(d["P"]) != 12:
            raise ValueError("camera P must have 12 entries")
        return cls(id=int(d["id"]), P=np.array(d["P"], dtype=np.float64), width=int(d["width"]), height=int(d["height"]))


@dataclass(eq=False)
class Pose3D:
    joints: np.ndarray
    present: np.ndarray

    def __post_init__(self):
        self.joints = np.array(self.joints, dtype=np.float64).reshape(-1, 3)
        self.present = np.array(self.present, dtype=bool).reshape(-1)
        if self.present.shape[0] != self.joints.shape[0]:
            raise ValueError("mask length does not match joint count")
        if not np.all(np.isfinite(self.joints[self.present])):
            raise ValueError("present joints must be finite")

    @classmethod
    def full(cls, joints) -> "Pose3D":
        joints = np.asarray(joints, dtype=np.float64).reshape(-1, 3)
        return cls(joints, np.ones(len(joints), dtype=bool))

    @property
    def num_joints(self) -> int:
        return self.joints.shape[0]

    def copy(self) -> "Pose3D":
        return Pose3D(self.joints.copy(), self.present.copy())


@dataclass(eq=False)
class Pose2D:
    camera: int
    joints: np.ndarray
    confidence: np.ndarray
    visible: np.ndarray

    def __post_init__(self):
        self.camera = int(self.camera)
        self.joints = np.array(self.joints, dtype=np.float64).reshape(-1, 2)
        n = self.joints.shape[0]
        self.confidence = np.array(self.confidence, dtype=np.float64).reshape(-1)
        self.visible = np.array(self.visible, dtype=bool).reshape(-1)
        if self.confidence.shape[0] != n or self.visible.shape[0] != n:
            raise ValueError("confidence/visibility length does not match joint count")
        vis = self.visible
        if not np.all(np.isfinite(self.joints[vis])):
            raise ValueError("visible joints must be finite")
        c = self.confidence[vis]
        if np.any(c < 0) or np.any(c > 1):
            raise ValueError("confidences must lie in [0, 1]")

    @classmethod
    def full(cls, camera, joints, confidence=None) -> "Pose2D":
        joints = np.asarray(joints, dtype=np.float64).reshape(-1, 2)
        n = len(joints)
        if confidence is None:
            confidence = np.ones(n)
        return cls(camera, joints, confidence, np.ones(n, dtype=bool))

    @property
    def num_joints(self) -> int:
        return self.joints.shape[0]

    def copy(self) -> "Pose2D":
        return Pose2D(self.camera, self.joints.copy(), self.confidence.copy(), self.visible.copy())


@dataclass
class Skeleton:
    joint_names: list
    pelvis: int
    spine_top: int
    spine_bottom: int
    bones: list = field(default_factory=list)

    def __post_init__(self):
        self.joint_names = [str(n) for n in self.joint_names]
        self.bones = [(int(p), int(c)) for p, c in self.bones]
        n = len(self.joint_names)
        idx = (self.pelvis, self.spine_top, self.spine_bottom)
        if any(not (0 <= i < n) for i in idx):
            raise ValueError("pelvis/spine indices out of range")
        if len(set(idx)) != 3:
            raise ValueError("pelvis, spine_top and spine_bottom must be distinct")
        if len(set(self.joint_names)) != n:
            raise ValueError("joint names must be unique")
        _check_tree(n, self.bones)

    @property
    def num_joints(self) -> int:
        return len(self.joint_names)

    def parents(self) -> np.ndarray:
        """Parent index per joint in the tree rooted at the pelvis (-1 at the root)."""
        adj = {j: [] for j in range(self.num_joints)}
        for a, b in self.bones:
            adj[a].append(b)
            adj[b].append(a)
        parent = np.full(self.num_joints, -1, dtype=int)
        seen = {self.pelvis}
        stack = [self.pelvis]
        while stack:
            j = stack.pop()
            for k in adj[j]:
                if k not in seen:
                    seen.add(k)
                    parent[k] = j
                    stack.append(k)
        return parent

    def index(self, names: Iterable[str]) -> list:
        lookup = {n: i for i, n in enumerate(self.joint_names)}
        try:
            return [lookup[n] for n in names]
        except KeyError as exc:
            raise ValueError(f"unknown joint name {exc.args[0]!r}") from None

    def to_dict(self) -> dict:
        return {
            "joint_names": list(self.joint_names),
            "pelvis": self.pelvis,
            "spine_top": self.spine_top,
            "spine_bottom": self.spine_bottom,
            "bones": [list(b) for b in self.bones],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "Skeleton":
        return cls(
            joint_names=list(d["joint_names"]),
            pelvis=int(d["pelvis"]),
            spine_top=int(d["spine_top"]),
            spine_bottom=int(d["spine_bottom"]),
            bones=[tuple(b) for b in d["bones"]],
        )

    def digest(self) -> str:
        """Stable SHA-256 of the canonical JSON form."""
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def _check_tree(n: int, bones: Sequence) -> None:
    if len(bones) != n - 1:
        raise ValueError("bones must form a tree spanning all joints")
    root = list(range(n))

    def find(i):
        while root[i] != i:
            root[i] = root[root[i]]
            i = root[i]
        return i

    for a, b in bones:
        if not (0 <= a < n and 0 <= b < n) or a == b:
            raise ValueError(f"invalid bone ({a}, {b})")
        ra, rb = find(a), find(b)
        if ra == rb:
            raise ValueError("bones contain a cycle")
        root[ra] = rb


def h36m_skeleton() -> Skeleton:
    """The 17-joint layout commonly used for Human3.6M evaluation."""
    names = [
        "pelvis", "r_hip", "r_knee", "r_ankle", "l_hip", "l_knee", "l_ankle",
        "spine", "thorax", "neck", "head",
        "l_shoulder", "l_elbow", "l_wrist", "r_shoulder", "r_elbow", "r_wrist",
    ]
    parents = [-1, 0, 1, 2, 0, 4, 5, 0, 7, 8, 9, 8, 11, 12, 8, 14, 15]
    bones = [(p, c) for c, p in enumerate(parents) if p >= 0]
    return Skeleton(names, pelvis=0, spine_top=8, spine_bottom=7, bones=bones)


def camera_map(cams) -> dict:
    """Accept a mapping or a sequence of cameras and key them by id."""
    if isinstance(cams, Mapping):
        return dict(cams)
    return {c.id: c for c in cams}


def project(point, cam: CameraParams) -> np.ndarray:
    """Perspective projection of one world point (mm) to pixels."""
    X = np.asarray(point, dtype=np.float64).reshape(3)
    h = cam.P[:, :3] @ X + cam.P[:, 3]
    if abs(h[2]) < DEPTH_EPS:
        raise DegenerateProjection("point lies on the camera principal plane")
    return h[:2] / h[2]


def project_points(points, cam: CameraParams) -> np.ndarray:
    """Vectorized :func:`project` over an ``(N, 3)`` array."""
    X = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    h = X @ cam.P[:, :3].T + cam.P[:, 3]
    if np.any(np.abs(h[:, 2]) < DEPTH_EPS):
        raise DegenerateProjection("point lies on the camera principal plane")
    return h[:, :2] / h[:, 2:3]


def center_on_pelvis_3d(pose: Pose3D, skel: Skeleton) -> Pose3D:
    if not pose.present[skel.pelvis]:
        raise MissingPelvis("pelvis not present in 3D pose")
    joints = pose.joints.copy()
    joints[pose.present] -= pose.joints[skel.pelvis]
    return Pose3D(joints, pose.present.copy())


def center_on_pelvis_2d(pose: Pose2D, skel: Skeleton) -> Pose2D:
    if not pose.visible[skel.pelvis]:
        raise MissingPelvis(f"pelvis not visible in camera {pose.camera}")
    joints = pose.joints.copy()
    joints[pose.visible] -= pose.joints[skel.pelvis]
    return Pose2D(pose.camera, joints, pose.confidence.copy(), pose.visible.copy())


def normalize_2d(pose: Pose2D, cam: CameraParams) -> Pose2D:
    joints = pose.joints.copy()
    joints[pose.visible] /= cam.scale
    return Pose2D(pose.camera, joints, pose.confidence.copy(), pose.visible.copy())


def spine_length(pose: Pose3D, skel: Skeleton) -> float:
    if not (pose.present[skel.spine_top] and pose.present[skel.spine_bottom]):
        raise DegenerateSpine("spine joints not present")
    return float(np.linalg.norm(pose.joints[skel.spine_top] - pose.joints[skel.spine_bottom]))


def normalize_3d(pose: Pose3D, skel: Skeleton) -> Pose3D:
    length = spine_length(pose, skel)
    if length < SPINE_EPS:
        raise DegenerateSpine(f"spine length {length:g} mm is degenerate")
    joints = pose.joints.copy()
    joints[pose.present] /= length / 3.0
    return Pose3D(joints, pose.present.copy())


def load_cameras(path) -> list:
    with open(path) as fh:
        data = json.load(fh)
    return [CameraParams.from_dict(d) for d in data]


def save_cameras(path, cams) -> None:
    Path(path).write_text(json.dumps([c.to_dict() for c in camera_map(cams).values()], indent=1) + "\n")


def load_skeleton(path) -> Skeleton:
    with open(path) as fh:
        return Skeleton.from_dict(json.load(fh))


def save_skeleton(path, skel: Skeleton) -> None:
    Path(path).write_text(json.dumps(skel.to_dict(), indent=1) + "\n")
