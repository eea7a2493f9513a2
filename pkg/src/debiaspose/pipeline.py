"""Two-pass estimation (triangulate, de-bias, re-triangulate) and evaluation."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DegenerateProjection, NoComparablePairs, NoPrediction
from .geometry import Pose3D, Skeleton, camera_map, project
from .neuralnet import MlpModel
from .posern import debias, predict_bias
from .triangulation import TriangulationConfig, triangulate_pose


@dataclass
class FrameResult:
    frame_id: int
    initial: Pose3D
    debiased: list
    final: Pose3D
    predictions: dict  # camera id -> BiasPrediction or None
    failures: list = field(default_factory=list)


@dataclass
class PipelineResult:
    frames: list

    @property
    def initial(self) -> list:
        return [f.initial for f in self.frames]

    @property
    def final(self) -> list:
        return [f.final for f in self.frames]


def run_frame(views, cams, skel: Skeleton, model: MlpModel, cfg: TriangulationConfig, frame_id=0) -> FrameResult:
    cams = camera_map(cams)
    initial = triangulate_pose(views, cams, cfg)
    failures = []
    if not initial.present[skel.pelvis]:
        failures.append("initial triangulation has no pelvis")
        return FrameResult(frame_id, initial, [v.copy() for v in views], initial.copy(),
                           {v.camera: None for v in views}, failures)
    debiased, preds = [], {}
    for obs in views:
        cam = cams[obs.camera]
        try:
            pred = predict_bias(model, initial, obs, cam, skel)
        except NoPrediction as exc:
            failures.append(f"camera {obs.camera}: {exc}")
            preds[obs.camera] = None
            debiased.append(obs.copy())
            continue
        preds[obs.camera] = pred
        debiased.append(debias(obs, pred, cam))
    final = triangulate_pose(debiased, cams, cfg)
    return FrameResult(frame_id, initial, debiased, final, preds, failures)


def run_pipeline(frames: Sequence, cams, skel: Skeleton, model: MlpModel,
                 cfg: TriangulationConfig = TriangulationConfig(), frame_ids=None) -> PipelineResult:
    """Apply the two-pass method to every frame (a list of per-camera 2D poses)."""
    ids = range(len(frames)) if frame_ids is None else frame_ids
    return PipelineResult([run_frame(v, cams, skel, model, cfg, fid) for fid, v in zip(ids, frames)])


@dataclass
class EvalReport:
    mpjpe_all: float
    mpjpe_per_joint: np.ndarray
    mpjpe_subset: float
    subset: list
    frames_evaluated: int
    joints_skipped: int
    subset_name: str = ""

    def to_dict(self) -> dict:
        return {
            "mpjpe_all": self.mpjpe_all,
            "mpjpe_per_joint": [None if np.isnan(x) else float(x) for x in self.mpjpe_per_joint],
            "mpjpe_subset": self.mpjpe_subset,
            "subset": list(self.subset),
            "subset_name": self.subset_name,
            "frames_evaluated": self.frames_evaluated,
            "joints_skipped": self.joints_skipped,
        }

    def write_json(self, path, extra: dict | None = None) -> None:
        d = self.to_dict()
        if extra:
            d.update(extra)
        with open(path, "w") as fh:
            json.dump(d, fh, indent=1, sort_keys=True)
            fh.write("\n")

    def write_csv(self, path, joint_names=None, comment: str | None = None) -> None:
        with open(path, "w", newline="") as fh:
            if comment:
                fh.write(f"# {comment}\n")
            w = csv.writer(fh)
            w.writerow(["joint", "mpjpe_mm"])
            for j, v in enumerate(self.mpjpe_per_joint):
                name = joint_names[j] if joint_names else str(j)
                w.writerow([name, "" if np.isnan(v) else repr(float(v))])
            w.writerow(["__all__", repr(self.mpjpe_all)])
            w.writerow([f"__subset__{self.subset_name}", repr(self.mpjpe_subset)])


def mpjpe(estimated: Sequence[Pose3D], gt: Sequence[Pose3D], subset=None, root: int | None = None,
          subset_name: str = "") -> EvalReport:
    """Mean per-joint position error in millimetres.

    Averages ``||est - gt||`` over (frame, joint) pairs present on both sides.
    No alignment is applied unless ``root`` is given, in which case both poses
    are expressed relative to that joint first (frames lacking it are skipped).
    """
    if len(estimated) != len(gt):
        raise ValueError("estimated and ground-truth frame counts differ")
    n = gt[0].num_joints if gt else 0
    subset = list(range(n)) if subset is None else sorted(set(int(j) for j in subset))
    if any(not 0 <= j < n for j in subset):
        raise ValueError("subset indices out of range")
    sums = np.zeros(n)
    counts = np.zeros(n, dtype=int)
    skipped = 0
    frames_used = 0
    in_subset = np.zeros(n, dtype=bool)
    in_subset[subset] = True
    for est, ref in zip(estimated, gt):
        both = est.present & ref.present
        E, G = est.joints, ref.joints
        if root is not None:
            if not both[root]:
                skipped += int(in_subset.sum())
                continue
            E = E - E[root]
            G = G - G[root]
        err = np.linalg.norm(E - G, axis=1)
        sums[both] += err[both]
        counts[both] += 1
        skipped += int(np.sum(in_subset & ~both))
        if np.any(both & in_subset):
            frames_used += 1
    with np.errstate(invalid="ignore", divide="ignore"):
        per_joint = np.where(counts > 0, sums / np.maximum(counts, 1), np.nan)
    sub_count = counts[subset].sum()
    if sub_count == 0 or counts.sum() == 0:
        raise NoComparablePairs("no (frame, joint) pair is present in both estimate and ground truth")
    return EvalReport(
        mpjpe_all=float(sums.sum() / counts.sum()),
        mpjpe_per_joint=per_joint,
        mpjpe_subset=float(sums[subset].sum() / sub_count),
        subset=subset,
        frames_evaluated=frames_used,
        joints_skipped=skipped,
        subset_name=subset_name,
    )


@dataclass(frozen=True)
class Displacement:
    camera: int
    joint: int
    du: float
    dv: float


def displacement_scatter(views_per_frame: Sequence, gt_frames: Sequence[Pose3D], cams) -> list:
    """``observed - project(gt)`` for every visible joint, tagged by camera and joint."""
    cams = camera_map(cams)
    records = []
    for views, gt in zip(views_per_frame, gt_frames):
        for obs in sorted(views, key=lambda v: v.camera):
            cam = cams[obs.camera]
            for j in np.flatnonzero(obs.visible & gt.present):
                try:
                    d = obs.joints[j] - project(gt.joints[j], cam)
                except DegenerateProjection:
                    continue
                records.append(Displacement(obs.camera, int(j), float(d[0]), float(d[1])))
    return records


def centroids(records: Sequence[Displacement]) -> dict:
    """Mean displacement per (camera, joint) group."""
    acc = {}
    for r in records:
        s = acc.setdefault((r.camera, r.joint), [0.0, 0.0, 0])
        s[0] += r.du
        s[1] += r.dv
        s[2] += 1
    return {k: np.array([s[0] / s[2], s[1] / s[2]]) for k, s in sorted(acc.items())}


def mean_centroid_norm(records: Sequence[Displacement]) -> float:
    """Average over (camera, joint) groups of the displacement-centroid norm."""
    c = centroids(records)
    if not c:
        return 0.0
    return float(np.mean([np.linalg.norm(v) for v in c.values()]))


def write_displacements(path, records: Sequence[Displacement], comment: str | None = None) -> None:
    with open(path, "w", newline="") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        w = csv.writer(fh)
        w.writerow(["camera", "joint", "du", "dv"])
        for r in records:
            w.writerow([r.camera, r.joint, repr(r.du), repr(r.dv)])
