"""Synthetic multi-view scenes with a known, parametric 2D annotation bias.

A canonical standing skeleton is animated with smooth per-bone rotations
(bone lengths are preserved exactly), viewed by a ring of calibrated
cameras, and observed as::

    obs = project(gt) + bias(gt, camera) * min(width, height) + noise

Every applied offset is recorded so tests can check recovered biases against
the generator's own bookkeeping.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .geometry import CameraParams, Pose2D, Pose3D, Skeleton, h36m_skeleton, project_points

FORMAT = "debiaspose-dataset/1"

# child offset from parent (mm, z up) for the 17-joint layout of h36m_skeleton
_H36M_OFFSETS = {
    1: (-130.0, 0.0, -10.0), 2: (0.0, 10.0, -440.0), 3: (0.0, -20.0, -430.0),
    4: (130.0, 0.0, -10.0), 5: (0.0, 10.0, -440.0), 6: (0.0, -20.0, -430.0),
    7: (0.0, 10.0, 230.0), 8: (0.0, 0.0, 250.0), 9: (0.0, 40.0, 110.0), 10: (0.0, -10.0, 120.0),
    11: (170.0, 0.0, -20.0), 12: (30.0, 30.0, -270.0), 13: (10.0, 80.0, -240.0),
    14: (-170.0, 0.0, -20.0), 15: (-30.0, 30.0, -270.0), 16: (-10.0, 80.0, -240.0),
}
PELVIS_HEIGHT = 900.0


@dataclass
class SceneConfig:
    num_cameras: int = 4
    camera_radius: float = 3000.0
    image_size: tuple = (1000, 1000)
    num_frames: int = 300
    skeleton: Skeleton = field(default_factory=h36m_skeleton)
    motion_amplitude: float = 150.0
    noise_sigma: float = 1.0
    seed: int = 0
    focal_length: float = 1000.0
    camera_height_jitter: float = 400.0
    visibility_dropout: float = 0.0

    def __post_init__(self):
        self.image_size = tuple(int(x) for x in self.image_size)
        if self.num_cameras < 2:
            raise ValueError("num_cameras must be ≥ 2")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be ≥ 0")
        if self.num_frames < 1:
            raise ValueError("num_frames must be ≥ 1")
        if self.camera_radius <= 0:
            raise ValueError("camera_radius must be > 0")
        if len(self.image_size) != 2 or min(self.image_size) <= 0:
            raise ValueError("image_size must be two positive integers")
        if self.motion_amplitude < 0:
            raise ValueError("motion_amplitude must be ≥ 0")
        if not 0.0 <= self.visibility_dropout < 1.0:
            raise ValueError("visibility_dropout must lie in [0, 1)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["skeleton"] = self.skeleton.to_dict()
        d["image_size"] = list(self.image_size)
        return d


@dataclass
class BiasField:
    """Parametric perceptual bias in normalized image units.

    For joint ``j`` with parent ``p`` seen by a camera:

    * a per-joint constant image offset,
    * ``view_coupling * cos(angle(optical axis, bone p->j))`` along the
      projected bone direction,
    * ``pose_coupling * projected bone length / min(w, h)`` perpendicular to
      the projected bone.

    The total is clipped to norm ``cap``. The root joint only gets its constant.
    """

    constants: np.ndarray
    view_coupling: float = 0.0
    pose_coupling: float = 0.0
    cap: float = 0.08

    def __post_init__(self):
        self.constants = np.asarray(self.constants, dtype=np.float64).reshape(-1, 2)
        if self.cap <= 0:
            raise ValueError("cap must be > 0")

    @classmethod
    def zero(cls, num_joints: int) -> "BiasField":
        return cls(np.zeros((num_joints, 2)))

    @classmethod
    def random(cls, num_joints, max_constant=0.03, view_coupling=0.01, pose_coupling=0.05, cap=0.08, seed=0):
        rng = np.random.default_rng(seed)
        const = rng.uniform(-max_constant, max_constant, size=(num_joints, 2))
        return cls(const, view_coupling, pose_coupling, cap)

    def __call__(self, pose: Pose3D, cam: CameraParams, parents: np.ndarray) -> np.ndarray:
        X = pose.joints
        uv = project_points(X, cam)
        axis = cam.optical_axis
        out = self.constants.copy()
        for j, p in enumerate(parents):
            if p < 0:
                continue
            bone = X[j] - X[p]
            cos_view = float(bone @ axis / np.linalg.norm(bone))
            b2 = uv[j] - uv[p]
            length = float(np.hypot(b2[0], b2[1]))
            if length < 1e-9:
                continue
            e = b2 / length
            out[j] += self.view_coupling * cos_view * e
            out[j] += self.pose_coupling * (length / cam.scale) * np.array([-e[1], e[0]])
        norms = np.linalg.norm(out, axis=1, keepdims=True)
        return np.where(norms > self.cap, out * (self.cap / np.maximum(norms, 1e-300)), out)

    def to_dict(self) -> dict:
        return {
            "constants": self.constants.tolist(),
            "view_coupling": self.view_coupling,
            "pose_coupling": self.pose_coupling,
            "cap": self.cap,
        }

    @classmethod
    def from_dict(cls, d) -> "BiasField":
        return cls(np.array(d["constants"]), d["view_coupling"], d["pose_coupling"], d["cap"])


@dataclass
class SyntheticFrame:
    frame_id: int
    gt3d: Pose3D
    views: list
    applied_bias: np.ndarray  # (C, J, 2) pixels
    applied_noise: np.ndarray  # (C, J, 2) pixels
    split: str = ""


@dataclass
class SyntheticDataset:
    cameras: list
    skeleton: Skeleton
    frames: list
    bias_field: BiasField = None
    config: dict = field(default_factory=dict)

    @property
    def camera_map(self) -> dict:
        return {c.id: c for c in self.cameras}

    def subset(self, frames) -> "SyntheticDataset":
        return SyntheticDataset(self.cameras, self.skeleton, list(frames), self.bias_field, self.config)

    def pairs(self) -> list:
        """``(views, gt3d)`` per frame, the input format of the training-set builder."""
        return [(f.views, f.gt3d) for f in self.frames]


def canonical_pose(skel: Skeleton | None = None) -> np.ndarray:
    """Standing pose for the 17-joint layout, pelvis above the origin."""
    skel = skel or h36m_skeleton()
    if skel.to_dict() != h36m_skeleton().to_dict():
        raise ValueError("canonical pose is only defined for the 17-joint layout")
    parents = skel.parents()
    X = np.zeros((skel.num_joints, 3))
    X[skel.pelvis] = (0.0, 0.0, PELVIS_HEIGHT)
    for j in _topological(parents):
        if parents[j] >= 0:
            X[j] = X[parents[j]] + _H36M_OFFSETS[j]
    return X


def _topological(parents) -> list:
    order, done = [], set()
    while len(order) < len(parents):
        for j, p in enumerate(parents):
            if j not in done and (p < 0 or p in done):
                order.append(j)
                done.add(j)
    return order


def _rotation(axis, angle) -> np.ndarray:
    K = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + np.sin(angle) * K + (1.0 - np.cos(angle)) * K @ K


def look_at_camera(cam_id, position, target, focal, width, height) -> CameraParams:
    position = np.asarray(position, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - position
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, [0.0, 0.0, 1.0])
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd])
    K = np.array([[focal, 0.0, width / 2.0], [0.0, focal, height / 2.0], [0.0, 0.0, 1.0]])
    return CameraParams.from_krt(cam_id, K, R, -R @ position, width, height)


def _seeds(seed: int):
    motion, render = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(motion), np.random.default_rng(render)


def generate_scene(cfg: SceneConfig):
    """Camera ring plus ground-truth 3D frames.

    Returns ``(cameras, frames)`` with frames as full :class:`Pose3D`.
    """
    skel = cfg.skeleton
    base = canonical_pose(skel)
    parents = skel.parents()
    w, h = cfg.image_size
    target = np.array([0.0, 0.0, PELVIS_HEIGHT])
    cameras = []
    for c in range(cfg.num_cameras):
        ang = 2.0 * np.pi * c / cfg.num_cameras + np.pi / 4.0
        z = PELVIS_HEIGHT + cfg.camera_height_jitter * (1 if c % 2 == 0 else -0.5)
        pos = (cfg.camera_radius * np.cos(ang), cfg.camera_radius * np.sin(ang), z)
        cameras.append(look_at_camera(c, pos, target, cfg.focal_length, w, h))

    rng, _ = _seeds(cfg.seed)
    n = skel.num_joints
    axes = rng.normal(size=(n, 3))
    axes /= np.linalg.norm(axes, axis=1, keepdims=True)
    freqs = rng.uniform(0.01, 0.05, size=n)
    phases = rng.uniform(0.0, 2.0 * np.pi, size=n)
    root_freq = rng.uniform(0.005, 0.02, size=2)
    root_phase = rng.uniform(0.0, 2.0 * np.pi, size=2)
    offsets = base - np.where(parents[:, None] >= 0, base[np.maximum(parents, 0)], 0.0)
    lengths = np.linalg.norm(offsets, axis=1)
    amp = np.where(lengths > 0, np.minimum(cfg.motion_amplitude / np.maximum(lengths, 1e-9), 0.6), 0.0)
    order = _topological(parents)

    frames = []
    for t in range(cfg.num_frames):
        X = np.zeros_like(base)
        shift = 0.5 * cfg.motion_amplitude * np.sin(2.0 * np.pi * root_freq * t + root_phase)
        X[skel.pelvis] = base[skel.pelvis] + np.array([shift[0], shift[1], 0.0])
        for j in order:
            p = parents[j]
            if p < 0:
                continue
            angle = amp[j] * np.sin(2.0 * np.pi * freqs[j] * t + phases[j])
            X[j] = X[p] + _rotation(axes[j], angle) @ offsets[j]
        frames.append(Pose3D.full(X))
    return cameras, frames


def render_observations(frames: Sequence[Pose3D], cameras: Sequence[CameraParams], bias: BiasField,
                        noise_sigma: float, seed, skel: Skeleton, visibility_dropout: float = 0.0,
                        confidence_range=(0.6, 1.0)) -> SyntheticDataset:
    """Corrupt exact projections with the bias field and Gaussian noise.

    ``seed`` may be an int or a ``numpy.random.Generator``. Random draws happen
    per frame, per camera (ascending id), in the order noise, confidence,
    visibility, regardless of which of them are active.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    parents = skel.parents()
    cams = sorted(cameras, key=lambda c: c.id)
    lo, hi = confidence_range
    n = skel.num_joints
    out = []
    for t, gt in enumerate(frames):
        views, biases, noises = [], [], []
        for cam in cams:
            proj = project_points(gt.joints, cam)
            b = bias(gt, cam, parents) * cam.scale
            noise = rng.normal(0.0, 1.0, size=(n, 2)) * noise_sigma
            conf = rng.uniform(lo, hi, size=n)
            visible = rng.random(n) >= visibility_dropout
            visible &= gt.present
            views.append(Pose2D(cam.id, proj + b + noise, conf, visible))
            biases.append(b)
            noises.append(noise)
        out.append(SyntheticFrame(t, gt, views, np.array(biases), np.array(noises)))
    return SyntheticDataset(list(cams), skel, out, bias)


@dataclass
class BiasConfig:
    enabled: bool = True
    max_constant: float = 0.03
    view_coupling: float = 0.01
    pose_coupling: float = 0.05
    cap: float = 0.08
    seed: int = 0

    def build(self, num_joints: int) -> BiasField:
        if not self.enabled:
            return BiasField.zero(num_joints)
        return BiasField.random(num_joints, self.max_constant, self.view_coupling,
                                self.pose_coupling, self.cap, self.seed)


def generate_dataset(scene: SceneConfig = None, bias: BiasConfig = None) -> SyntheticDataset:
    """Scene generation plus rendering with seeds derived from the configs."""
    scene = scene or SceneConfig()
    bias = bias or BiasConfig()
    cameras, frames = generate_scene(scene)
    field_ = bias.build(scene.skeleton.num_joints)
    _, render_rng = _seeds(scene.seed)
    ds = render_observations(frames, cameras, field_, scene.noise_sigma, render_rng, scene.skeleton,
                             scene.visibility_dropout)
    ds.config = {"scene": scene.to_dict(), "bias": asdict(bias)}
    return ds


def split_dataset(ds: SyntheticDataset, train_fraction: float, seed: int = 0):
    """Seeded frame-level split into ``(train, held_out)`` datasets."""
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must lie in (0, 1)")
    n = len(ds.frames)
    n_train = int(round(train_fraction * n))
    perm = np.random.default_rng(seed).permutation(n)
    train_idx = set(perm[:n_train].tolist())
    train, held = [], []
    for i, f in enumerate(ds.frames):
        if i in train_idx:
            f.split = "train"
            train.append(f)
        else:
            f.split = "held_out"
            held.append(f)
    return ds.subset(train), ds.subset(held)


def _arr(a) -> list:
    return np.asarray(a, dtype=np.float64).tolist()


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def save_dataset(path, ds: SyntheticDataset, extra_header: dict | None = None) -> None:
    """JSON Lines: one header line, then one line per frame.

    Floats are written with Python's shortest round-trip repr, so loading
    reproduces every value bit-exactly.
    """
    header = {
        "format": FORMAT,
        "config": ds.config,
        "seeds": {
            "scene": ds.config.get("scene", {}).get("seed"),
            "bias": ds.config.get("bias", {}).get("seed"),
        },
        "skeleton": ds.skeleton.to_dict(),
        "cameras": [c.to_dict() for c in ds.cameras],
        "bias_field": ds.bias_field.to_dict() if ds.bias_field is not None else None,
    }
    if extra_header:
        header.update(extra_header)
    lines = [json.dumps(header, sort_keys=True)]
    for f in ds.frames:
        rec = {
            "frame_id": f.frame_id,
            "split": f.split,
            "gt3d": _arr(f.gt3d.joints),
            "present": f.gt3d.present.tolist(),
            "views": [
                {"camera": v.camera, "uv": _arr(v.joints), "confidence": _arr(v.confidence),
                 "visible": v.visible.tolist()}
                for v in f.views
            ],
            "applied_bias": _arr(f.applied_bias),
            "applied_noise": _arr(f.applied_noise),
        }
        lines.append(json.dumps(rec, sort_keys=True))
    Path(path).write_text("\n".join(lines) + "\n")


def load_dataset(path):
    """Read a dataset file. Returns ``(dataset, header)``."""
    with open(path) as fh:
        header = json.loads(fh.readline())
        if header.get("format") != FORMAT:
            raise ValueError(f"{path}: not a {FORMAT} file")
        frames = []
        for line in fh:
            if not line.strip():
                continue
            r = json.loads(line)
            views = [Pose2D(v["camera"], v["uv"], v["confidence"], v["visible"]) for v in r["views"]]
            frames.append(SyntheticFrame(
                r["frame_id"], Pose3D(r["gt3d"], r["present"]), views,
                np.array(r["applied_bias"]), np.array(r["applied_noise"]), r.get("split", ""),
            ))
    bf = header.get("bias_field")
    ds = SyntheticDataset(
        [CameraParams.from_dict(c) for c in header["cameras"]],
        Skeleton.from_dict(header["skeleton"]),
        frames,
        BiasField.from_dict(bf) if bf else None,
        header.get("config", {}),
    )
    return ds, header
