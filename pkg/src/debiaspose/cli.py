"""Command-line entry point: ``generate``, ``train``, ``run`` and ``eval``.

All numeric settings come from one JSON config file; a few flags override
it. Exit codes: 0 ok, 2 config error, 3 empty usable data, 4 checkpoint /
skeleton mismatch, 5 no comparable pairs for evaluation.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import EmptyDataset, NoComparablePairs, SkeletonMismatch
from .geometry import Pose2D, Pose3D, h36m_skeleton, load_cameras, load_skeleton, save_cameras, save_skeleton
from .neuralnet import TrainConfig
from .pipeline import displacement_scatter, mean_centroid_norm, mpjpe, run_pipeline, write_displacements
from .posern import build_training_set, load_posern, save_posern, train_posern
from .synthetic import (
    BiasConfig,
    SceneConfig,
    config_hash,
    generate_dataset,
    load_dataset,
    save_dataset,
    split_dataset,
)
from .triangulation import TriangulationConfig

EXIT_OK, EXIT_CONFIG, EXIT_EMPTY, EXIT_MISMATCH, EXIT_NO_PAIRS = 0, 2, 3, 4, 5
RESULTS_FORMAT = "debiaspose-results/1"

DEFAULT_SUBSETS = {
    "all": None,
    "core4": ["neck", "l_elbow", "r_elbow", "spine"],
    "arms": ["l_shoulder", "l_elbow", "r_shoulder", "r_elbow"],
}


class ConfigError(Exception):
    pass


@dataclass
class Paths:
    dataset: str = "dataset.jsonl"
    checkpoint: str = "posern.ckpt"
    results: str = "results.jsonl"
    output_dir: str = "."
    cameras: str | None = None
    skeleton: str | None = None


@dataclass
class SplitConfig:
    train_fraction: float = 0.8
    seed: int = 0


@dataclass
class Flags:
    skip_failed: bool = False
    root_relative: bool = False
    triangulated_training_input: bool = False
    all_frames: bool = False


@dataclass
class RunConfig:
    paths: Paths = field(default_factory=Paths)
    scene: dict = field(default_factory=dict)
    bias: BiasConfig = field(default_factory=BiasConfig)
    split: SplitConfig = field(default_factory=SplitConfig)
    triangulation: TriangulationConfig = field(default_factory=TriangulationConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    subsets: dict = field(default_factory=lambda: dict(DEFAULT_SUBSETS))
    subset: str = "all"
    flags: Flags = field(default_factory=Flags)
    base_dir: Path = Path(".")
    raw: dict = field(default_factory=dict)

    def path(self, name: str) -> Path:
        p = Path(getattr(self.paths, name))
        return p if p.is_absolute() else self.base_dir / p

    @property
    def out_dir(self) -> Path:
        return self.path("output_dir")

    @property
    def hash(self) -> str:
        # paths are excluded so identical experiments in different folders agree
        return config_hash({k: v for k, v in self.raw.items() if k != "paths"})

    def skeleton(self):
        if self.paths.skeleton:
            p = self.path("skeleton")
            if not p.exists():
                raise ConfigError(f"paths.skeleton: {p} does not exist")
            return load_skeleton(p)
        return h36m_skeleton()

    def scene_config(self) -> SceneConfig:
        return _build(SceneConfig, {**self.scene, "skeleton": self.skeleton()}, "scene")


def _build(cls, data, section):
    if not isinstance(data, dict):
        raise ConfigError(f"{section}: expected an object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{section}: unknown key(s) {', '.join(unknown)}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{section}: {exc}") from None


_SECTIONS = {
    "paths": Paths, "bias": BiasConfig, "split": SplitConfig,
    "triangulation": TriangulationConfig, "train": TrainConfig, "flags": Flags,
}
_TOP_LEVEL = set(_SECTIONS) | {"scene", "subsets", "subset"}


def load_config(path: str | None, seed: int | None = None) -> RunConfig:
    raw = {}
    base = Path(".")
    if path:
        p = Path(path)
        try:
            text = p.read_text()
        except OSError as exc:
            raise ConfigError(f"{path}: {exc.strerror}") from None
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be an object")
        base = p.parent
    unknown = sorted(set(raw) - _TOP_LEVEL)
    if unknown:
        raise ConfigError(f"unknown top-level key(s) {', '.join(unknown)}")
    if seed is not None:
        raw = json.loads(json.dumps(raw))
        for sec in ("scene", "bias", "split", "train"):
            raw.setdefault(sec, {})["seed"] = seed
    cfg = RunConfig(base_dir=base, raw=raw)
    for name, cls in _SECTIONS.items():
        setattr(cfg, name, _build(cls, raw.get(name, {}), name))
    cfg.scene = dict(raw.get("scene", {}))
    cfg.subsets = {**DEFAULT_SUBSETS, **raw.get("subsets", {})}
    cfg.subset = raw.get("subset", "all")
    if cfg.subset not in cfg.subsets:
        raise ConfigError(f"subset: unknown subset {cfg.subset!r}")
    cfg.scene_config()  # validate eagerly
    return cfg


def _subset_indices(cfg: RunConfig, skel, name: str | None = None):
    name = name or cfg.subset
    if name not in cfg.subsets:
        raise ConfigError(f"subset: unknown subset {name!r}")
    names = cfg.subsets[name]
    try:
        return (None if names is None else skel.index(names)), name
    except ValueError as exc:
        raise ConfigError(f"subsets.{name}: {exc}") from None


def _pose3d_dict(p: Pose3D) -> dict:
    return {"joints": p.joints.tolist(), "present": p.present.tolist()}


def _pose3d(d) -> Pose3D:
    return Pose3D(d["joints"], d["present"])


def _view_dict(v: Pose2D) -> dict:
    return {"camera": v.camera, "uv": v.joints.tolist(), "confidence": v.confidence.tolist(),
            "visible": v.visible.tolist()}


def _comment(cfg: RunConfig) -> str:
    return f"config_hash={cfg.hash}"


def _load_dataset(cfg: RunConfig, dataset):
    path = Path(dataset) if dataset else cfg.path("dataset")
    if not path.exists():
        raise ConfigError(f"paths.dataset: {path} does not exist")
    ds, _ = load_dataset(path)
    if cfg.paths.cameras:
        cam_path = cfg.path("cameras")
        if not cam_path.exists():
            raise ConfigError(f"paths.cameras: {cam_path} does not exist")
        ds.cameras = load_cameras(cam_path)
    return ds


def _split_frames(ds, cfg: RunConfig):
    tags = {f.split for f in ds.frames}
    if tags <= {"train", "held_out"} and tags:
        train = [f for f in ds.frames if f.split == "train"]
        held = [f for f in ds.frames if f.split == "held_out"]
        return train, held
    tr, ho = split_dataset(ds, cfg.split.train_fraction, cfg.split.seed)
    return tr.frames, ho.frames


def cmd_generate(cfg: RunConfig, out: str | None = None) -> int:
    scene = cfg.scene_config()
    ds = generate_dataset(scene, cfg.bias)
    split_dataset(ds, cfg.split.train_fraction, cfg.split.seed)
    path = Path(out) if out else cfg.path("dataset")
    path.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(path, ds, {"config_hash": cfg.hash})
    cam_path = cfg.path("cameras") if cfg.paths.cameras else path.with_name(path.stem + ".cameras.json")
    save_cameras(cam_path, ds.cameras)
    save_skeleton(path.with_name(path.stem + ".skeleton.json"), ds.skeleton)
    mags = np.linalg.norm(np.concatenate([f.applied_bias.reshape(-1, 2) for f in ds.frames]), axis=1)
    print(f"wrote {path}: {len(ds.frames)} frames, {len(ds.cameras)} cameras, "
          f"mean applied bias {mags.mean():.3f} px")
    return EXIT_OK


def cmd_train(cfg: RunConfig, dataset: str | None = None) -> int:
    ds = _load_dataset(cfg, dataset)
    train, _ = _split_frames(ds, cfg)
    source = "triangulated" if cfg.flags.triangulated_training_input else "gt"
    try:
        samples = build_training_set([(f.views, f.gt3d) for f in train], ds.cameras, ds.skeleton,
                                     source, cfg.triangulation, [f.frame_id for f in train])
        model, trace = train_posern(samples, cfg.train)
    except EmptyDataset as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_EMPTY
    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    ckpt = cfg.path("checkpoint")
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    save_posern(ckpt, model, ds.skeleton, {"config_hash": cfg.hash, "train": dataclasses.asdict(cfg.train)})
    with open(out / "loss.csv", "w", newline="") as fh:
        fh.write(f"# {_comment(cfg)}\n")
        w = csv.writer(fh)
        w.writerow(["epoch", "loss"])
        for i, v in enumerate(trace, 1):
            w.writerow([i, repr(float(v))])
    print(f"trained on {len(samples)} samples; loss {trace[0]:.6g} -> {trace[-1]:.6g}; wrote {ckpt}")
    return EXIT_OK


def cmd_run(cfg: RunConfig, dataset: str | None = None, checkpoint: str | None = None) -> int:
    ds = _load_dataset(cfg, dataset)
    try:
        model = load_posern(checkpoint or cfg.path("checkpoint"), ds.skeleton)
    except SkeletonMismatch as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISMATCH
    frames = ds.frames if cfg.flags.all_frames else _split_frames(ds, cfg)[1]
    if not frames:
        print("error: no frames to run", file=sys.stderr)
        return EXIT_EMPTY
    result = run_pipeline([f.views for f in frames], ds.cameras, ds.skeleton, model, cfg.triangulation,
                          [f.frame_id for f in frames])
    kept = [(fr, f) for fr, f in zip(result.frames, frames) if not (cfg.flags.skip_failed and fr.failures)]
    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    path = cfg.path("results")
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [json.dumps({"format": RESULTS_FORMAT, "config_hash": cfg.hash, "frames": len(kept),
                         "skipped_failed": len(result.frames) - len(kept)}, sort_keys=True)]
    for fr, _ in kept:
        lines.append(json.dumps({
            "frame_id": fr.frame_id,
            "initial": _pose3d_dict(fr.initial),
            "final": _pose3d_dict(fr.final),
            "debiased": [_view_dict(v) for v in fr.debiased],
            "predictions": {str(c): (None if p is None else p.bias.tolist()) for c, p in sorted(fr.predictions.items())},
            "failures": fr.failures,
        }, sort_keys=True))
    path.write_text("\n".join(lines) + "\n")
    subset, name = _subset_indices(cfg, ds.skeleton)
    root = ds.skeleton.pelvis if cfg.flags.root_relative else None
    gt = [f.gt3d for _, f in kept]
    try:
        rep_i = mpjpe([fr.initial for fr, _ in kept], gt, subset, root, name)
        rep_f = mpjpe([fr.final for fr, _ in kept], gt, subset, root, name)
    except NoComparablePairs as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NO_PAIRS
    rep_i.write_json(out / "metrics_initial.json", {"config_hash": cfg.hash})
    rep_f.write_json(out / "metrics_final.json", {"config_hash": cfg.hash})
    print(f"{len(kept)} frames: MPJPE initial {rep_i.mpjpe_all:.3f} mm, final {rep_f.mpjpe_all:.3f} mm; wrote {path}")
    return EXIT_OK


def _read_results(path):
    with open(path) as fh:
        header = json.loads(fh.readline())
        if header.get("format") != RESULTS_FORMAT:
            raise ConfigError(f"{path}: not a results file")
        return [json.loads(line) for line in fh if line.strip()]


def cmd_eval(cfg: RunConfig, results: str | None = None, dataset: str | None = None,
             subset: str | None = None) -> int:
    ds = _load_dataset(cfg, dataset)
    recs = _read_results(results or cfg.path("results"))
    by_id = {f.frame_id: f for f in ds.frames}
    missing = [r["frame_id"] for r in recs if r["frame_id"] not in by_id]
    if missing:
        raise ConfigError(f"results reference frames absent from the dataset: {missing[:5]}")
    gt_frames = [by_id[r["frame_id"]] for r in recs]
    gt = [f.gt3d for f in gt_frames]
    idx, name = _subset_indices(cfg, ds.skeleton, subset)
    root = ds.skeleton.pelvis if cfg.flags.root_relative else None
    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    extra = {"config_hash": cfg.hash}
    summary = []
    try:
        for key in ("initial", "final"):
            if not all(key in r for r in recs):
                continue
            rep = mpjpe([_pose3d(r[key]) for r in recs], gt, idx, root, name)
            rep.write_json(out / f"eval_{key}.json", extra)
            rep.write_csv(out / f"eval_{key}.csv", ds.skeleton.joint_names, _comment(cfg))
            summary.append(f"{key} {rep.mpjpe_all:.3f} mm (subset {name}: {rep.mpjpe_subset:.3f} mm)")
    except NoComparablePairs as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NO_PAIRS
    before = displacement_scatter([f.views for f in gt_frames], gt, ds.cameras)
    write_displacements(out / "scatter_before.csv", before, _comment(cfg))
    line = f"centroid norm before {mean_centroid_norm(before):.3f} px"
    if all("debiased" in r for r in recs):
        views = [[Pose2D(v["camera"], v["uv"], v["confidence"], v["visible"]) for v in r["debiased"]] for r in recs]
        after = displacement_scatter(views, gt, ds.cameras)
        write_displacements(out / "scatter_after.csv", after, _comment(cfg))
        line += f", after {mean_centroid_norm(after):.3f} px"
    print("MPJPE " + "; ".join(summary))
    print(line)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="debiaspose", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--seed", type=int, help="override every seed in the config")
        p.add_argument("--output-dir", help="override paths.output_dir")
        return p

    g = common(sub.add_parser("generate", help="write a synthetic dataset"))
    g.add_argument("--out", help="dataset path (default paths.dataset)")
    t = common(sub.add_parser("train", help="train the bias network"))
    t.add_argument("--dataset")
    t.add_argument("--triangulated-training-input", action="store_true")
    r = common(sub.add_parser("run", help="two-pass estimation on held-out frames"))
    r.add_argument("--dataset")
    r.add_argument("--checkpoint")
    r.add_argument("--skip-failed", action="store_true")
    r.add_argument("--all-frames", action="store_true")
    r.add_argument("--root-relative", action="store_true")
    e = common(sub.add_parser("eval", help="MPJPE reports and displacement scatter"))
    e.add_argument("--results")
    e.add_argument("--dataset")
    e.add_argument("--subset")
    e.add_argument("--root-relative", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.seed)
        if args.output_dir:
            cfg.paths.output_dir = str(Path(args.output_dir).resolve())
        for flag in ("skip_failed", "root_relative", "triangulated_training_input", "all_frames"):
            if getattr(args, flag, False):
                setattr(cfg.flags, flag, True)
        if args.command == "generate":
            return cmd_generate(cfg, args.out)
        if args.command == "train":
            return cmd_train(cfg, args.dataset)
        if args.command == "run":
            return cmd_run(cfg, args.dataset, args.checkpoint)
        return cmd_eval(cfg, args.results, args.dataset, args.subset)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
