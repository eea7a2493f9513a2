"""Bias targets, network inputs, bias prediction and 2D de-biasing.

Sign convention used throughout: the bias of an observation is
``obs - project(gt)``, and de-biasing subtracts the predicted bias, so a
perfect prediction maps observations onto the ground-truth projections.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import (
    DegenerateProjection,
    DegenerateSpine,
    DimensionMismatch,
    EmptyDataset,
    MissingPelvis,
    NoPrediction,
    SkeletonMismatch,
)
from .geometry import (
    CameraParams,
    Pose2D,
    Pose3D,
    Skeleton,
    camera_map,
    center_on_pelvis_2d,
    center_on_pelvis_3d,
    normalize_2d,
    normalize_3d,
    project,
)
from .neuralnet import MlpModel, TrainConfig, forward, load_checkpoint, save_checkpoint, train_epochs
from .triangulation import TriangulationConfig, triangulate_pose

NORMALIZATION = "2d: pelvis-centred / min(width, height); 3d: pelvis-centred / (spine length / 3)"
SIGN_CONVENTION = "bias = observed - projected; debiased = observed - predicted"


@dataclass
class BiasSample:
    input: np.ndarray
    target: np.ndarray
    camera: int
    frame: int
    valid_mask: np.ndarray

    @property
    def target_mask(self) -> np.ndarray:
        """Per-entry mask matching ``target`` (two entries per joint)."""
        return np.repeat(self.valid_mask, 2)


@dataclass
class BiasPrediction:
    bias: np.ndarray  # (J, 2), normalized 2D units
    camera: int
    valid: np.ndarray = None

    def __post_init__(self):
        self.bias = np.asarray(self.bias, dtype=np.float64).reshape(-1, 2)
        if self.valid is None:
            self.valid = np.ones(len(self.bias), dtype=bool)
        if not np.all(np.isfinite(self.bias)):
            raise ValueError("bias prediction must be finite")


def input_dim(num_joints: int) -> int:
    return 5 * num_joints


def compute_target_bias(obs2d: Pose2D, gt3d: Pose3D, cam: CameraParams):
    """Per-joint pixel bias ``obs - project(gt)`` and the mask of joints where it is defined."""
    n = obs2d.num_joints
    bias = np.zeros((n, 2))
    mask = np.zeros(n, dtype=bool)
    for j in np.flatnonzero(obs2d.visible & gt3d.present):
        try:
            bias[j] = obs2d.joints[j] - project(gt3d.joints[j], cam)
        except DegenerateProjection:
            continue
        mask[j] = True
    return bias, mask


def assemble_input(est3d: Pose3D, obs2d: Pose2D, cam: CameraParams, skel: Skeleton):
    """Feature vector ``[x0,y0,z0, x1,... , u0,v0, u1,...]`` and joint validity.

    A joint is valid when it is present in 3D and visible in 2D; every entry
    of an invalid joint is zero.
    """
    n = skel.num_joints
    if est3d.num_joints != n or obs2d.num_joints != n:
        raise DimensionMismatch(f"poses do not match the {n}-joint skeleton")
    p3 = normalize_3d(center_on_pelvis_3d(est3d, skel), skel)
    p2 = normalize_2d(center_on_pelvis_2d(obs2d, skel), cam)
    valid = est3d.present & obs2d.visible
    x3 = np.where(valid[:, None], p3.joints, 0.0)
    x2 = np.where(valid[:, None], p2.joints, 0.0)
    return np.concatenate([x3.ravel(), x2.ravel()]), valid


def predict_bias(model: MlpModel, est3d: Pose3D, obs2d: Pose2D, cam: CameraParams, skel: Skeleton) -> BiasPrediction:
    n = skel.num_joints
    if model.input_dim != input_dim(n) or model.output_dim != 2 * n:
        raise DimensionMismatch("model dimensions do not match the skeleton")
    try:
        x, valid = assemble_input(est3d, obs2d, cam, skel)
    except (MissingPelvis, DegenerateSpine) as exc:
        raise NoPrediction(str(exc)) from exc
    out, _ = forward(model, x[None, :], "eval")
    bias = np.where(valid[:, None], out.reshape(n, 2), 0.0)
    if not np.all(np.isfinite(bias)):
        raise NoPrediction("network produced non-finite output")
    return BiasPrediction(bias, obs2d.camera, valid)


def debias(obs2d: Pose2D, pred: BiasPrediction, cam: CameraParams) -> Pose2D:
    """Subtract the predicted bias (converted to pixels) from visible joints."""
    if pred.camera != obs2d.camera:
        raise ValueError(f"prediction for camera {pred.camera} applied to camera {obs2d.camera}")
    joints = obs2d.joints.copy()
    vis = obs2d.visible
    joints[vis] -= pred.bias[vis] * cam.scale
    return Pose2D(obs2d.camera, joints, obs2d.confidence.copy(), obs2d.visible.copy())


def build_training_set(frames: Sequence, cams, skel: Skeleton, initial3d_source: str = "gt",
                       tri_cfg: TriangulationConfig = TriangulationConfig(), frame_ids=None) -> list:
    """One sample per surviving (frame, camera) pair.

    ``frames`` holds ``(views, gt3d)`` pairs. The 3D part of the input is the
    ground truth (``"gt"``) or the triangulation of the views
    (``"triangulated"``); targets are always measured against ground truth.
    """
    if initial3d_source not in ("gt", "triangulated"):
        raise ValueError(f"unknown initial3d_source {initial3d_source!r}")
    cams = camera_map(cams)
    samples = []
    for k, (views, gt3d) in enumerate(frames):
        fid = k if frame_ids is None else frame_ids[k]
        est3d = gt3d if initial3d_source == "gt" else triangulate_pose(views, cams, tri_cfg)
        for obs in views:
            cam = cams[obs.camera]
            try:
                x, valid = assemble_input(est3d, obs, cam, skel)
                # the ground truth must also be usable even when est3d is triangulated
                center_on_pelvis_3d(gt3d, skel)
            except (MissingPelvis, DegenerateSpine):
                continue
            bias, bmask = compute_target_bias(obs, gt3d, cam)
            valid = valid & bmask
            x3 = x[: 3 * len(valid)].reshape(-1, 3)
            x2 = x[3 * len(valid):].reshape(-1, 2)
            x = np.concatenate([np.where(valid[:, None], x3, 0.0).ravel(),
                                np.where(valid[:, None], x2, 0.0).ravel()])
            target = np.where(valid[:, None], bias / cam.scale, 0.0).ravel()
            samples.append(BiasSample(x, target, obs.camera, fid, valid))
    if not samples:
        raise EmptyDataset("no usable (frame, camera) samples")
    return samples


def target_statistics(Y, M, floor: float = 1e-6):
    """Per-dimension mean and standard deviation over valid entries."""
    count = np.maximum(M.sum(axis=0), 1)
    mean = np.where(M, Y, 0.0).sum(axis=0) / count
    std = np.sqrt(np.where(M, (Y - mean) ** 2, 0.0).sum(axis=0) / count)
    return mean, np.maximum(std, floor)


def train_posern(samples: Sequence[BiasSample], cfg: TrainConfig = TrainConfig()):
    """Fit the bias network. Returns ``(model, per-epoch loss trace)``.

    The network is trained on per-dimension standardized targets; mean and
    scale are folded into the output layer afterwards, so the returned model
    predicts biases directly in normalized image units, and the loss trace is
    reported in those units too.
    """
    if not samples:
        raise EmptyDataset("no training samples")
    X = np.stack([s.input for s in samples])
    Y = np.stack([s.target for s in samples])
    M = np.stack([s.target_mask for s in samples])
    mean, std = target_statistics(Y, M)
    Z = np.where(M, (Y - mean) / std, 0.0)
    model = MlpModel.init(X.shape[1], Y.shape[1], hidden_dim=cfg.hidden_dim,
                          dropout_rate=cfg.dropout_rate, seed=cfg.seed)
    model, trace = train_epochs(model, X, Z, cfg, mask=M, loss_scale=std)
    model.W_out = model.W_out * std[:, None]
    model.b_out = model.b_out * std + mean
    return model, trace


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".sidecar.json")


def save_posern(path, model: MlpModel, skel: Skeleton, extra: dict | None = None) -> None:
    """Write the checkpoint and its skeleton sidecar."""
    save_checkpoint(path, model, extra)
    side = {
        "skeleton_hash": skel.digest(),
        "num_joints": skel.num_joints,
        "normalization": NORMALIZATION,
        "sign_convention": SIGN_CONVENTION,
    }
    if extra and "config_hash" in extra:
        side["config_hash"] = extra["config_hash"]
    sidecar_path(path).write_text(json.dumps(side, indent=1, sort_keys=True) + "\n")


def load_posern(path, skel: Skeleton) -> MlpModel:
    """Load a checkpoint, refusing one trained for a different skeleton."""
    side_file = sidecar_path(path)
    if not side_file.exists():
        raise SkeletonMismatch(f"missing sidecar {side_file}")
    side = json.loads(side_file.read_text())
    if side.get("skeleton_hash") != skel.digest() or side.get("num_joints") != skel.num_joints:
        raise SkeletonMismatch("checkpoint was trained for a different skeleton")
    if side.get("sign_convention") != SIGN_CONVENTION or side.get("normalization") != NORMALIZATION:
        raise SkeletonMismatch("checkpoint uses a different bias convention")
    model = load_checkpoint(path)
    if model.input_dim != input_dim(skel.num_joints) or model.output_dim != 2 * skel.num_joints:
        raise SkeletonMismatch("checkpoint dimensions do not match the skeleton")
    return model
