"""Detection and classification evaluation.

Per-class precision/recall/F1 from greedy confidence-ordered IoU matching,
PR curves, a confusion matrix and calibration statistics (ECE plus mean
confidence of correct vs. incorrect classifications).  ECE goes beyond the
usual detection table; it is reported under ``calibration`` as an extension.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .camera import BBox2D
from .exceptions import ParameterError

ECE_BINS = 10


@dataclass(frozen=True)
class MatchConfig:
    iou_threshold: float = 0.5

    def __post_init__(self):
        if not 0 < self.iou_threshold <= 1:
            raise ParameterError("iou_threshold must lie in (0, 1]")


@dataclass
class Detection:
    bbox: BBox2D
    label: int
    confidence: float
    scene_id: str = ""
    probs: list | None = None


@dataclass
class GroundTruthBox:
    bbox: BBox2D
    label: int
    scene_id: str = ""


@dataclass
class MatchResult:
    """Per-scene assignment.

    ``pred_gt[i]`` is the ground-truth index matched to prediction ``i``
    (class-aware, -1 for a false positive); ``loc_gt[i]`` is the
    class-agnostic localization match used for confusion and calibration.
    """

    preds: list
    gts: list
    pred_gt: np.ndarray
    loc_gt: np.ndarray

    @property
    def tp(self):
        return self.pred_gt >= 0

    @property
    def fn_gt(self):
        matched = set(self.pred_gt[self.pred_gt >= 0].tolist())
        return [j for j in range(len(self.gts)) if j not in matched]


def iou(a: BBox2D, b: BBox2D) -> float:
    """Intersection over union with inclusive pixel extents."""
    iw = min(a.u_max, b.u_max) - max(a.u_min, b.u_min) + 1
    ih = min(a.v_max, b.v_max) - max(a.v_min, b.v_min) + 1
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def _greedy(preds, gts, thr, same_class):
    order = sorted(range(len(preds)), key=lambda i: -preds[i].confidence)
    taken = np.zeros(len(gts), dtype=bool)
    out = np.full(len(preds), -1)
    for i in order:
        best, best_iou = -1, thr
        for j, g in enumerate(gts):
            if taken[j] or (same_class and g.label != preds[i].label):
                continue
            o = iou(preds[i].bbox, g.bbox)
            if o >= best_iou and (best < 0 or o > best_iou):
                best, best_iou = j, o
        if best >= 0:
            taken[best] = True
            out[i] = best
    return out


def match_detections(preds, gts, cfg=MatchConfig()) -> MatchResult:
    """Greedy matching in descending confidence; each ground truth used once."""
    preds, gts = list(preds), list(gts)
    thr = cfg.iou_threshold
    return MatchResult(preds, gts, _greedy(preds, gts, thr, True), _greedy(preds, gts, thr, False))


def _prf(tp, fp, fn):
    p = tp / (tp + fp) if tp + fp > 0 else 0.0
    r = tp / (tp + fn) if tp + fn > 0 else 0.0
    f = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return p, r, f


def expected_calibration_error(confidences, correct, n_bins=ECE_BINS):
    conf = np.asarray(confidences, dtype=float)
    correct = np.asarray(correct, dtype=float)
    if len(conf) == 0:
        return 0.0
    bins = np.minimum((conf * n_bins).astype(int), n_bins - 1)
    ece = 0.0
    for b in range(n_bins):
        sel = bins == b
        if np.any(sel):
            ece += sel.mean() * abs(correct[sel].mean() - conf[sel].mean())
    return float(ece)


@dataclass
class EvalReport:
    class_names: list
    per_class: dict
    overall: dict
    confusion: np.ndarray
    pr_curves: dict
    calibration: dict
    counts: dict = field(default_factory=dict)

    def to_json(self):
        return {
            "class_names": list(self.class_names),
            "per_class": self.per_class,
            "overall": self.overall,
            "confusion": self.confusion.tolist(),
            "pr_curves": {k: [[float(r), float(p)] for r, p in v] for k, v in self.pr_curves.items()},
            "calibration": self.calibration,
            "counts": self.counts,
        }


def compute_report(matches, class_names, cfg=MatchConfig()) -> EvalReport:
    """Aggregate per-scene :class:`MatchResult` objects into a report.

    Macro averages run over classes with at least one ground-truth
    instance.  Missed ground truths are counted in the background column
    (index 0) of the confusion matrix, so each row sums to that class's
    ground-truth count.
    """
    C = len(class_names)
    tp = np.zeros(C, int)
    fp = np.zeros(C, int)
    n_gt = np.zeros(C, int)
    confusion = np.zeros((C, C), int)
    scored = {c: [] for c in range(C)}
    conf_all, correct_all = [], []
    for m in matches:
        for g in m.gts:
            n_gt[g.label] += 1
        for i, p in enumerate(m.preds):
            hit = m.pred_gt[i] >= 0
            tp[p.label] += hit
            fp[p.label] += not hit
            scored[p.label].append((p.confidence, hit))
        loc_of_gt = {int(j): i for i, j in enumerate(m.loc_gt) if j >= 0}
        for j, g in enumerate(m.gts):
            if j in loc_of_gt:
                p = m.preds[loc_of_gt[j]]
                confusion[g.label, p.label] += 1
                conf_all.append(p.confidence)
                correct_all.append(p.label == g.label)
            else:
                confusion[g.label, 0] += 1
    if n_gt.sum() == 0:
        raise ParameterError("evaluation needs at least one ground-truth instance")
    fn = n_gt - tp
    per_class = {}
    pr_curves = {}
    for c, name in enumerate(class_names):
        p, r, f = _prf(tp[c], fp[c], fn[c])
        per_class[name] = {"precision": p, "recall": r, "f_score": f, "tp": int(tp[c]),
                           "fp": int(fp[c]), "fn": int(fn[c]), "support": int(n_gt[c])}
        items = sorted(scored[c], key=lambda t: -t[0])
        hits = np.cumsum([h for _, h in items]) if items else np.array([])
        k = np.arange(1, len(items) + 1)
        pr_curves[name] = ([(h / n_gt[c] if n_gt[c] else 0.0, h / kk) for h, kk in zip(hits, k)])
    supported = [name for c, name in enumerate(class_names) if n_gt[c] > 0]
    overall = {key: float(np.mean([per_class[n][key] for n in supported]))
               for key in ("precision", "recall", "f_score")}
    mp, mr, mf = _prf(tp.sum(), fp.sum(), fn.sum())
    overall.update({"micro_precision": mp, "micro_recall": mr, "micro_f_score": mf})
    conf_all = np.array(conf_all, dtype=float)
    correct_all = np.array(correct_all, dtype=bool)
    calibration = {
        "ece": expected_calibration_error(conf_all, correct_all),
        "mean_conf_correct": float(conf_all[correct_all].mean()) if correct_all.any() else None,
        "mean_conf_incorrect": float(conf_all[~correct_all].mean()) if (~correct_all).any() else None,
        "n_matched": int(len(conf_all)),
        "n_incorrect": int((~correct_all).sum()),
        "extension": True,
    }
    counts = {"ground_truth": int(n_gt.sum()), "predictions": int(tp.sum() + fp.sum()),
              "iou_threshold": cfg.iou_threshold}
    return EvalReport(list(class_names), per_class, overall, confusion, pr_curves, calibration, counts)


REPORT_SCHEMA = {
    "type": "object",
    "required": ["class_names", "per_class", "overall", "confusion", "pr_curves", "calibration"],
    "properties": {
        "class_names": {"type": "array", "items": {"type": "string"}},
        "per_class": {
            "type": "object",
            "additionalProperties": {
                "type": "object",
                "required": ["precision", "recall", "f_score"],
                "properties": {k: {"type": "number", "minimum": 0, "maximum": 1}
                               for k in ("precision", "recall", "f_score")},
            },
        },
        "overall": {"type": "object", "required": ["precision", "recall", "f_score"]},
        "confusion": {"type": "array", "items": {"type": "array", "items": {"type": "integer"}}},
        "pr_curves": {"type": "object", "additionalProperties": {
            "type": "array", "items": {"type": "array", "minItems": 2, "maxItems": 2}}},
        "calibration": {"type": "object", "required": ["ece", "mean_conf_correct", "mean_conf_incorrect"]},
    },
}


def render_table(report: EvalReport) -> str:
    """Plain-text per-class table with percentages."""
    lines = [f"{'Category':<16}{'Precision':>10}{'Recall':>10}{'F-Score':>10}"]
    for name in report.class_names:
        r = report.per_class[name]
        lines.append(f"{name:<16}{100 * r['precision']:>10.1f}{100 * r['recall']:>10.1f}"
                     f"{100 * r['f_score']:>10.1f}")
    o = report.overall
    lines.append(f"{'overall':<16}{100 * o['precision']:>10.1f}{100 * o['recall']:>10.1f}"
                 f"{100 * o['f_score']:>10.1f}")
    return "\n".join(lines)


def write_report(report: EvalReport, path, pr_csv=None):
    with open(path, "w") as fh:
        json.dump(report.to_json(), fh, indent=2, sort_keys=True)
    if pr_csv is not None:
        with open(pr_csv, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["class", "recall", "precision"])
            for name, pts in report.pr_curves.items():
                for r, p in pts:
                    w.writerow([name, repr(float(r)), repr(float(p))])
