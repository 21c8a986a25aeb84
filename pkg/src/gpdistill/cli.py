"""Command-line pipeline: synth -> autolabel -> train-teacher -> label -> train-student -> eval.

Every stage reads and writes plain files under the work directory, so any
stage can be rerun on its own.  All randomness derives from the root seed
in the configuration, fanned out per stage by hashing the stage name.

Work directory layout::

    scenes/<id>.csv, <id>.ppm, <id>.camera.json, <id>.gt.jsonl
    annotations/<id>.jsonl        thumbnails/<id>_<cluster>.ppm
    hand_labels.jsonl             soft_labels.jsonl
    teacher.json, teacher_trace.json, student.json, student_trace.json
    reports/<model>_report.json, reports/<model>_pr.csv
"""
from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .camera import (Annotation, BBox2D, Thumbnail, cluster_to_bbox, crop_thumbnail, load_camera,
                     read_annotations, read_jsonl, read_ppm, save_camera, write_jsonl, write_ppm)
from .cloud import load_cloud, save_cloud
from .distill import (DistillConfig, SoftLabel, StudentModel, load_student, read_soft_labels,
                      save_student, train_student, write_soft_labels)
from .evaluation import (Detection, GroundTruthBox, MatchConfig, compute_report, iou,
                         match_detections, render_table, write_report)
from .exceptions import (BehindCameraError, ConfigurationError, DataError, EmptyCloudError,
                         MalformedInputError, NumericalError, ParameterError, SceneSpecError,
                         StateError)
from .features import BASELINE_ID, PRECOMPUTED_ID, extract_features, read_feature_csv
from .objectness import ObjectnessDetector
from .synth import class_roster, random_scene_spec, generate_scene, write_ground_truth
from .teacher import TrainConfig, init_svgp, load_teacher, predict_proba, save_teacher, train_teacher

log = logging.getLogger("gpdistill")

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 2, 3

DEFAULTS = {
    "seed": 0,
    "workdir": "work",
    "scenes_dir": None,
    "camera": None,
    "n_scenes": 100,
    "test_fraction": 0.3,
    "n_classes": 6,
    "class_names": None,
    "extractor": BASELINE_ID,
    "feature_table": None,
    "synth": {"n_objects": 5, "points_per_object": 1500, "plane_points": 20000,
              "noise_sigma": 0.002, "color_noise": 2.0, "color_jitter": 35.0},
    "objectness": {"dist_thresh": 0.01, "min_inlier_fraction": 0.5, "max_planes": 1,
                   "ransac_iterations": 200, "leaf_size": 0.01, "normal_k": 12,
                   "sigma_d": 0.02, "sigma_c": 8.0, "sigma_s": 10.0, "grayscale": False,
                   "min_cluster_size": 30},
    "hand_labels": {"per_class": 20},
    "teacher": {"num_inducing": 32, "epochs": 100, "batch_size": 8, "lr0": 1e-2, "decay": 0.95,
                "mc_samples": 16, "variance": 1.0, "predict_samples": 256},
    "distill": {"temperature": 2.0, "loss_kind": "sse", "epochs": 100, "batch_size": 32,
                "lr": 3e-3, "hidden": [64], "hard_weight": 0.0},
    "match": {"iou_threshold": 0.5},
}


def _merge(base, override):
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def stage_seed(root_seed, stage):
    """Deterministic 31-bit seed for a named stage."""
    digest = hashlib.sha256(f"{int(root_seed)}:{stage}".encode()).digest()
    return int.from_bytes(digest[:4], "little") & 0x7FFFFFFF


@dataclass
class PipelineConfig:
    raw: dict = field(default_factory=lambda: copy.deepcopy(DEFAULTS))

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(DEFAULTS)
        if unknown:
            raise ConfigurationError(f"unknown configuration keys: {sorted(unknown)}")
        cfg = cls(_merge(DEFAULTS, d))
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path):
        try:
            with open(path) as fh:
                d = json.load(fh)
        except json.JSONDecodeError as exc:
            raise MalformedInputError(exc.msg, exc.lineno, path) from None
        return cls.from_dict(d)

    def validate(self):
        names = self.class_names
        if not names or names[0] != "background":
            raise ConfigurationError("class list must start with 'background'")
        if len(set(names)) != len(names):
            raise ConfigurationError("duplicate class names")
        if not 0 <= self.raw["test_fraction"] < 1:
            raise ConfigurationError("test_fraction must be in [0, 1)")
        if self.extractor not in (BASELINE_ID, PRECOMPUTED_ID):
            raise ConfigurationError(f"unknown extractor {self.extractor!r}")
        self.train_config()
        self.distill_config()
        self.match_config()

    @property
    def seed(self):
        return int(self.raw["seed"])

    @property
    def workdir(self):
        return Path(self.raw["workdir"])

    @property
    def scenes_dir(self):
        s = self.raw["scenes_dir"]
        return Path(s) if s else self.workdir / "scenes"

    @property
    def class_names(self):
        names = self.raw["class_names"]
        return list(names) if names else class_roster(self.raw["n_classes"])

    @property
    def extractor(self):
        return self.raw["extractor"]

    def train_config(self):
        t = self.raw["teacher"]
        return TrainConfig(t["epochs"], t["batch_size"], t["lr0"], t["decay"], t["mc_samples"],
                           stage_seed(self.seed, "train-teacher"))

    def distill_config(self):
        d = self.raw["distill"]
        return DistillConfig(d["temperature"], d["loss_kind"], d["epochs"], d["batch_size"], d["lr"],
                             stage_seed(self.seed, "train-student"), d["hard_weight"])

    def match_config(self):
        return MatchConfig(self.raw["match"]["iou_threshold"])

    def detector(self):
        return ObjectnessDetector(**self.raw["objectness"], seed=stage_seed(self.seed, "objectness")).fit()


# --------------------------------------------------------------------------
# scene bookkeeping


def scene_ids(cfg: PipelineConfig):
    d = cfg.scenes_dir
    if not d.is_dir():
        return []
    return sorted(p.name[:-len(".csv")] for p in d.glob("*.csv"))


def split_scenes(cfg: PipelineConfig):
    """``(train_ids, test_ids)``; the last ``test_fraction`` of sorted ids is held out."""
    ids = scene_ids(cfg)
    n_test = int(round(cfg.raw["test_fraction"] * len(ids)))
    if cfg.raw["test_fraction"] > 0 and len(ids) >= 2:
        n_test = max(n_test, 1)
    return ids[:len(ids) - n_test], ids[len(ids) - n_test:]


def scene_camera(cfg: PipelineConfig, sid):
    path = cfg.scenes_dir / f"{sid}.camera.json"
    if not path.exists() and cfg.raw["camera"]:
        path = Path(cfg.raw["camera"])
    if not path.exists():
        raise FileNotFoundError(f"no camera file for scene {sid}")
    return load_camera(path)


def detect_scene(cfg: PipelineConfig, sid, detector=None):
    """Run objectness + projection on one scene; returns ``[(Annotation, Thumbnail)]``."""
    cam = scene_camera(cfg, sid)
    cloud = load_cloud(cfg.scenes_dir / f"{sid}.csv")
    frame = read_ppm(cfg.scenes_dir / f"{sid}.ppm")
    detector = detector or cfg.detector()
    detector.set_params(viewpoint=tuple(cam.center))
    grid, clusters, _ = detector.detect(cloud)
    out = []
    for cid, cl in enumerate(clusters):
        box = cluster_to_bbox(cam, cl, grid, cid)
        if box is None:
            continue
        out.append((Annotation(sid, box, cid), crop_thumbnail(frame, box, sid)))
    return out


def _feature_table(cfg):
    if cfg.extractor != PRECOMPUTED_ID:
        return None
    if not cfg.raw["feature_table"]:
        raise ConfigurationError("precomputed extractor needs 'feature_table'")
    keys, _, X = read_feature_csv(cfg.raw["feature_table"])
    return dict(zip(keys, X))


def features_for(cfg, thumbs, table=None):
    rows = [extract_features(t, cfg.extractor, table=table) for t in thumbs]
    return np.vstack(rows) if rows else np.empty((0, 0))


def _thumb_path(cfg, ann):
    return cfg.workdir / "thumbnails" / f"{ann.scene_id}_{ann.cluster_id:03d}.ppm"


def load_train_items(cfg):
    """Annotations and thumbnails of the training split, in deterministic order."""
    train, _ = split_scenes(cfg)
    anns, thumbs = [], []
    for sid in train:
        path = cfg.workdir / "annotations" / f"{sid}.jsonl"
        if not path.exists():
            raise FileNotFoundError(f"missing annotations for {sid}; run autolabel first")
        for ann in read_annotations(path):
            anns.append(ann)
            thumbs.append(_thumbnail_from_file(cfg, ann))
    return anns, thumbs


def _thumbnail_from_file(cfg, ann):
    return Thumbnail(read_ppm(_thumb_path(cfg, ann)), ann.bbox, ann.scene_id)


def read_hand_labels(path, num_classes):
    """Hand labels as ``{(scene_id, cluster_id): SoftLabel}``.

    Records carry either ``probs`` (one-hot) or an integer ``label``.
    """
    out = {}
    for d in read_jsonl(path):
        key = (str(d["scene_id"]), int(d["cluster_id"]))
        if "label" in d and "probs" not in d:
            lab = int(d["label"])
            if not 0 <= lab < num_classes:
                raise DataError(f"hand label {lab} out of range for {key}")
            out[key] = SoftLabel.hand(lab, num_classes, scene_id=key[0], cluster_id=key[1])
        else:
            sl = SoftLabel.from_json(d)
            if len(sl.probs) != num_classes:
                raise DataError(f"hand label for {key} has wrong class count")
            out[key] = SoftLabel(sl.probs, "hand", sl.temperature_applied, key[0], key[1])
    return out


def _dump_json(obj, path):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)


# --------------------------------------------------------------------------
# stages


def cmd_synth(cfg: PipelineConfig, n_scenes=None):
    n = cfg.raw["n_scenes"] if n_scenes is None else n_scenes
    if n < 0:
        raise ParameterError("n_scenes must be >= 0")
    if n == 0:
        return []
    out = cfg.scenes_dir
    out.mkdir(parents=True, exist_ok=True)
    s = cfg.raw["synth"]
    names = cfg.class_names
    written = []
    for i in range(n):
        sid = f"scene_{i:04d}"
        spec = random_scene_spec(stage_seed(cfg.seed, f"synth/{sid}"), n_objects=s["n_objects"],
                                 n_classes=len(names) - 1, scene_id=sid, color_jitter=s["color_jitter"],
                                 points_per_object=s["points_per_object"], plane_points=s["plane_points"],
                                 noise_sigma=s["noise_sigma"], color_noise=s["color_noise"])
        cloud, frame, gt = generate_scene(spec)
        save_cloud(cloud, out / f"{sid}.csv")
        write_ppm(out / f"{sid}.ppm", frame)
        save_camera(spec.camera, out / f"{sid}.camera.json")
        write_ground_truth(out / f"{sid}.gt.jsonl", gt, names)
        written.append(sid)
    log.info("wrote %d scenes to %s", n, out)
    return written


def cmd_autolabel(cfg: PipelineConfig):
    """Detect objects in every training scene; writes unlabeled annotations and thumbnails."""
    train, _ = split_scenes(cfg)
    if not train:
        raise DataError(f"no training scenes in {cfg.scenes_dir}")
    (cfg.workdir / "annotations").mkdir(parents=True, exist_ok=True)
    (cfg.workdir / "thumbnails").mkdir(parents=True, exist_ok=True)
    detector = cfg.detector()
    total = 0
    for sid in train:
        items = detect_scene(cfg, sid, detector)
        write_jsonl(cfg.workdir / "annotations" / f"{sid}.jsonl", [a for a, _ in items])
        for ann, thumb in items:
            write_ppm(_thumb_path(cfg, ann), thumb.pixels)
        total += len(items)
    log.info("autolabel: %d proposals in %d scenes", total, len(train))
    return total


def cmd_simulate_hand_labels(cfg: PipelineConfig, out_path=None):
    """Stand-in for manual labeling: label a random subset of annotations from ground truth.

    Each annotation is matched to the ground-truth box of highest IoU (at
    least the configured threshold); up to ``hand_labels.per_class``
    matched items per class are kept.
    """
    anns, _ = load_train_items(cfg)
    thr = cfg.match_config().iou_threshold
    gt_cache = {}
    by_class = {}
    for ann in anns:
        if ann.scene_id not in gt_cache:
            gt_cache[ann.scene_id] = [r for r in read_jsonl(cfg.scenes_dir / f"{ann.scene_id}.gt.jsonl")
                                      if r["bbox"] is not None]
        best, best_iou = None, thr
        for r in gt_cache[ann.scene_id]:
            o = iou(ann.bbox, BBox2D(*r["bbox"]))
            if o >= best_iou:
                best, best_iou = r, o
        if best is not None:
            by_class.setdefault(int(best["label"]), []).append(ann)
    rng = np.random.default_rng(stage_seed(cfg.seed, "hand-labels"))
    k = cfg.raw["hand_labels"]["per_class"]
    C = len(cfg.class_names)
    chosen = []
    for label in sorted(by_class):
        items = by_class[label]
        pick = sorted(rng.permutation(len(items))[:k].tolist())
        chosen += [SoftLabel.hand(label, C, scene_id=items[i].scene_id, cluster_id=items[i].cluster_id)
                   for i in pick]
    chosen.sort(key=lambda s: (s.scene_id, s.cluster_id))
    path = Path(out_path) if out_path else cfg.workdir / "hand_labels.jsonl"
    write_soft_labels(path, chosen)
    return len(chosen)


def cmd_train_teacher(cfg: PipelineConfig, hand_labels=None):
    path = Path(hand_labels) if hand_labels else cfg.workdir / "hand_labels.jsonl"
    if not path.exists():
        raise FileNotFoundError(f"hand-label file {path} not found")
    C = len(cfg.class_names)
    hand = read_hand_labels(path, C)
    anns, thumbs = load_train_items(cfg)
    index = {(a.scene_id, a.cluster_id): i for i, a in enumerate(anns)}
    keys = [k for k in sorted(hand) if k in index]
    if len(keys) < len(hand):
        raise DataError(f"{len(hand) - len(keys)} hand labels refer to unknown annotations")
    y = np.array([hand[k].label for k in keys], dtype=int)
    missing = [cfg.class_names[c] for c in range(C) if not np.any(y == c)]
    if missing:
        raise DataError(f"classes without hand labels: {missing}")
    X = features_for(cfg, [thumbs[index[k]] for k in keys], _feature_table(cfg))
    t = cfg.raw["teacher"]
    model = init_svgp(X, C, t["num_inducing"], variance=t["variance"],
                      seed=stage_seed(cfg.seed, "teacher-init"), class_names=cfg.class_names,
                      extractor_id=cfg.extractor, standardize=True)
    model, trace = train_teacher(model, X, y, cfg.train_config())
    save_teacher(model, cfg.workdir / "teacher.json")
    _dump_json(trace, cfg.workdir / "teacher_trace.json")
    log.info("teacher: %d hand labels, ELBO %.3f -> %.3f", len(y), trace["elbo"][0] if trace["elbo"] else 0,
             trace["elbo"][-1] if trace["elbo"] else 0)
    return model, trace


def _check_model(cfg, model):
    if model.extractor_id != cfg.extractor:
        raise DataError(f"checkpoint extractor {model.extractor_id!r} != configured {cfg.extractor!r}")
    if list(model.class_names) != cfg.class_names:
        raise DataError("checkpoint class names differ from the configuration")


def cmd_label(cfg: PipelineConfig, teacher_path=None, hand_labels=None):
    """Teacher soft labels for every training annotation; hand labels take precedence."""
    model = load_teacher(teacher_path or cfg.workdir / "teacher.json")
    _check_model(cfg, model)
    C = len(cfg.class_names)
    hpath = Path(hand_labels) if hand_labels else cfg.workdir / "hand_labels.jsonl"
    hand = read_hand_labels(hpath, C) if hpath.exists() else {}
    anns, thumbs = load_train_items(cfg)
    todo = [i for i, a in enumerate(anns) if (a.scene_id, a.cluster_id) not in hand]
    probs = np.empty((0, C))
    if todo:
        X = features_for(cfg, [thumbs[i] for i in todo], _feature_table(cfg))
        probs = predict_proba(model, X, cfg.raw["teacher"]["predict_samples"], stage_seed(cfg.seed, "label"))
    teacher_probs = dict(zip(todo, probs))
    labels = []
    for i, a in enumerate(anns):
        key = (a.scene_id, a.cluster_id)
        if key in hand:
            labels.append(hand[key])
        else:
            labels.append(SoftLabel(teacher_probs[i], "teacher", 1.0, a.scene_id, a.cluster_id))
    write_soft_labels(cfg.workdir / "soft_labels.jsonl", labels)
    return labels


def cmd_train_student(cfg: PipelineConfig):
    path = cfg.workdir / "soft_labels.jsonl"
    if not path.exists():
        raise FileNotFoundError(f"soft-label file {path} not found")
    labels = read_soft_labels(path)
    if not labels:
        raise DataError("soft-label set is empty")
    dcfg = cfg.distill_config()
    anns, thumbs = load_train_items(cfg)
    index = {(a.scene_id, a.cluster_id): i for i, a in enumerate(anns)}
    try:
        rows = [index[(s.scene_id, s.cluster_id)] for s in labels]
    except KeyError as exc:
        raise DataError(f"soft label for unknown annotation {exc.args[0]}") from None
    X = features_for(cfg, [thumbs[i] for i in rows], _feature_table(cfg))
    P = np.vstack([s.probs for s in labels])
    if P.shape[1] != len(cfg.class_names):
        raise DataError("soft labels do not match the configured class count")
    init = StudentModel.create(X.shape[1], P.shape[1], tuple(cfg.raw["distill"]["hidden"]),
                               stage_seed(cfg.seed, "student-init"), cfg.class_names)
    student, trace = train_student(init, X, P, dcfg)
    save_student(student, cfg.workdir / "student.json")
    _dump_json(trace, cfg.workdir / "student_trace.json")
    return student, trace


def cmd_eval(cfg: PipelineConfig, model="student"):
    """Detect and classify objects in held-out scenes and write the report."""
    _, test = split_scenes(cfg)
    if not test:
        raise DataError("no held-out scenes")
    if model == "student":
        clf = load_student(cfg.workdir / "student.json")
        if list(clf.class_names) != cfg.class_names:
            raise DataError("checkpoint class names differ from the configuration")
        proba = clf.predict_proba
    elif model == "teacher":
        clf = load_teacher(cfg.workdir / "teacher.json")
        _check_model(cfg, clf)
        seed = stage_seed(cfg.seed, "eval")
        proba = lambda X: predict_proba(clf, X, cfg.raw["teacher"]["predict_samples"], seed)  # noqa: E731
    else:
        raise ConfigurationError(f"unknown model {model!r}")
    mcfg = cfg.match_config()
    table = _feature_table(cfg)
    detector = cfg.detector()
    matches = []
    for sid in test:
        items = detect_scene(cfg, sid, detector)
        preds = []
        if items:
            P = proba(features_for(cfg, [t for _, t in items], table))
            preds = [Detection(a.bbox, int(np.argmax(p)), float(np.max(p)), sid, p.tolist())
                     for (a, _), p in zip(items, P)]
        gts = [GroundTruthBox(BBox2D(*r["bbox"]), int(r["label"]), sid)
               for r in read_jsonl(cfg.scenes_dir / f"{sid}.gt.jsonl") if r["bbox"] is not None]
        matches.append(match_detections(preds, gts, mcfg))
    report = compute_report(matches, cfg.class_names, mcfg)
    out = cfg.workdir / "reports"
    out.mkdir(parents=True, exist_ok=True)
    write_report(report, out / f"{model}_report.json", out / f"{model}_pr.csv")
    return report


def cmd_pipeline(cfg: PipelineConfig, model="student"):
    """All stages in order, from scene synthesis to the evaluation report."""
    cmd_synth(cfg)
    cmd_autolabel(cfg)
    cmd_simulate_hand_labels(cfg)
    cmd_train_teacher(cfg)
    cmd_label(cfg)
    cmd_train_student(cfg)
    return cmd_eval(cfg, model)


# --------------------------------------------------------------------------
# entry point


def build_parser():
    p = argparse.ArgumentParser(prog="gpdistill", description=__doc__.splitlines()[0])
    p.add_argument("--config", help="JSON configuration file")
    p.add_argument("--seed", type=int, help="override the root seed")
    p.add_argument("--scenes", help="override the scenes directory")
    p.add_argument("--workdir", help="override the work directory")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    s = sub.add_parser("synth", help="generate synthetic scenes with ground truth")
    s.add_argument("--n-scenes", type=int)
    sub.add_parser("autolabel", help="objectness proposals, boxes and thumbnails")
    s = sub.add_parser("simulate-hand-labels", help="hand-label a subset from ground truth")
    s.add_argument("--out")
    s = sub.add_parser("train-teacher", help="fit the SVGP teacher on hand labels")
    s.add_argument("--hand-labels")
    s = sub.add_parser("label", help="teacher soft labels for all annotations")
    s.add_argument("--teacher")
    s.add_argument("--hand-labels")
    sub.add_parser("train-student", help="distill soft labels into the student")
    for name in ("eval", "pipeline"):
        s = sub.add_parser(name, help="evaluate on held-out scenes" if name == "eval" else "run every stage")
        s.add_argument("--model", choices=("student", "teacher"), default="student")
    return p


def _load_config(args):
    cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig.from_dict({})
    over = {}
    if args.seed is not None:
        over["seed"] = args.seed
    if args.scenes is not None:
        over["scenes_dir"] = args.scenes
    if args.workdir is not None:
        over["workdir"] = args.workdir
    return PipelineConfig.from_dict(_merge(cfg.raw, over)) if over else cfg


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = _load_config(args)
        cmd = args.command
        if cmd == "synth":
            cmd_synth(cfg, args.n_scenes)
        elif cmd == "autolabel":
            cmd_autolabel(cfg)
        elif cmd == "simulate-hand-labels":
            cmd_simulate_hand_labels(cfg, args.out)
        elif cmd == "train-teacher":
            cmd_train_teacher(cfg, args.hand_labels)
        elif cmd == "label":
            cmd_label(cfg, args.teacher, args.hand_labels)
        elif cmd == "train-student":
            cmd_train_student(cfg)
        else:
            runner = cmd_eval if cmd == "eval" else cmd_pipeline
            print(render_table(runner(cfg, args.model)))
    except (DataError, EmptyCloudError, NumericalError, StateError, BehindCameraError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ConfigurationError, ParameterError, MalformedInputError, SceneSpecError, OSError,
            KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


def run():
    """Console-script entry point."""
    sys.exit(main())


if __name__ == "__main__":
    run()
