"""Knowledge distillation from teacher probabilities into a small student network."""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.special import log_softmax, softmax
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .exceptions import ConfigurationError, ParameterError
from .optim import Adam

FORMAT_VERSION = 1
PROB_FLOOR = 1e-7
LOSS_KINDS = ("sse", "kl", "mse", "mae", "ce")


@dataclass
class SoftLabel:
    probs: np.ndarray
    provenance: str = "teacher"
    temperature_applied: float | None = None
    scene_id: str = ""
    cluster_id: int = -1

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=float)
        if self.provenance not in ("hand", "teacher"):
            raise ParameterError(f"unknown provenance {self.provenance!r}")
        if np.any(self.probs < 0) or abs(self.probs.sum() - 1) > 1e-9:
            raise ParameterError("probabilities must lie in the simplex")

    @property
    def entropy(self):
        p = self.probs[self.probs > 0]
        return float(-(p * np.log(p)).sum())

    @property
    def confidence(self):
        return float(self.probs.max())

    @property
    def label(self):
        return int(np.argmax(self.probs))

    def to_json(self):
        return {"scene_id": self.scene_id, "cluster_id": int(self.cluster_id),
                "probs": [float(p) for p in self.probs], "provenance": self.provenance,
                "temperature_applied": self.temperature_applied}

    @classmethod
    def from_json(cls, d):
        return cls(d["probs"], d["provenance"], d.get("temperature_applied"),
                   str(d["scene_id"]), int(d["cluster_id"]))

    @classmethod
    def hand(cls, label, num_classes, **kw):
        probs = np.zeros(num_classes)
        probs[label] = 1.0
        return cls(probs, "hand", **kw)


def soften(probs, T=2.0):
    """Temperature-soften probability rows: proportional to ``p ** (1/T)``.

    Probabilities are floored at 1e-7 and renormalized before moving to
    log space, so zeros stay representable.
    """
    if T < 1:
        raise ParameterError("temperature must be >= 1")
    p = np.maximum(np.asarray(probs, dtype=float), PROB_FLOOR)
    p = p / p.sum(axis=-1, keepdims=True)
    return softmax(np.log(p) / T, axis=-1)


def _check_pair(student_logits, teacher_probs):
    z = np.atleast_2d(np.asarray(student_logits, dtype=float))
    p = np.atleast_2d(np.asarray(teacher_probs, dtype=float))
    if z.shape != p.shape:
        raise ParameterError(f"shape mismatch {z.shape} vs {p.shape}")
    return z, p


def distill_loss_and_grad(kind, student_logits, teacher_probs, T=2.0):
    """Batch-mean loss between ``softmax(z/T)`` and ``soften(p, T)`` and its gradient in z."""
    if kind not in LOSS_KINDS:
        raise ConfigurationError(f"unknown loss kind {kind!r}")
    z, p = _check_pair(student_logits, teacher_probs)
    n, C = z.shape
    t = soften(p, T)
    log_s = log_softmax(z / T, axis=1)
    s = np.exp(log_s)
    d = s - t
    if kind in ("kl", "ce"):
        if kind == "kl":
            per_item = np.sum(t * (np.log(t) - log_s), axis=1)
        else:
            per_item = -np.sum(t * log_s, axis=1)
        grad = d / T
    else:
        if kind == "sse":
            per_item = np.sum(d * d, axis=1)
            g = 2 * d
        elif kind == "mse":
            per_item = np.mean(d * d, axis=1)
            g = 2 * d / C
        else:
            per_item = np.mean(np.abs(d), axis=1)
            g = np.sign(d) / C
        # backprop through softmax(z / T)
        grad = s * (g - np.sum(g * s, axis=1, keepdims=True)) / T
    return float(per_item.mean()), grad / n


def distill_loss_sse(student_logits, teacher_probs, T=2.0):
    return distill_loss_and_grad("sse", student_logits, teacher_probs, T)[0]


def distill_loss_alt(kind, student_logits, teacher_probs, T=2.0):
    if kind not in ("kl", "mse", "mae", "ce"):
        raise ConfigurationError(f"unknown loss kind {kind!r}")
    return distill_loss_and_grad(kind, student_logits, teacher_probs, T)[0]


# --------------------------------------------------------------------------
# student network


@dataclass
class StudentModel:
    """Fully connected tanh network with input standardization."""

    input_dim: int
    num_classes: int
    hidden: tuple = (64,)
    weights: list = field(default_factory=list)
    x_mean: np.ndarray = None
    x_scale: np.ndarray = None
    seed: int = 0
    class_names: list = field(default_factory=list)

    @classmethod
    def create(cls, input_dim, num_classes, hidden=(64,), seed=0, class_names=()):
        if num_classes < 2:
            raise ParameterError("need at least two classes")
        rng = np.random.default_rng(seed)
        sizes = [input_dim, *hidden, num_classes]
        weights = []
        for a, b in zip(sizes[:-1], sizes[1:]):
            lim = np.sqrt(6.0 / (a + b))
            weights.append(rng.uniform(-lim, lim, size=(a, b)))
            weights.append(np.zeros(b))
        return cls(input_dim, num_classes, tuple(hidden), weights, np.zeros(input_dim),
                   np.ones(input_dim), seed, list(class_names))

    def params(self):
        return {f"w{i}": w for i, w in enumerate(self.weights)}

    def _forward(self, X):
        h = (np.asarray(X, dtype=float) - self.x_mean) / self.x_scale
        acts = [h]
        n_layers = len(self.weights) // 2
        for k in range(n_layers):
            h = h @ self.weights[2 * k] + self.weights[2 * k + 1]
            if k < n_layers - 1:
                h = np.tanh(h)
            acts.append(h)
        return acts

    def logits(self, X):
        return self._forward(np.atleast_2d(X))[-1]

    def backward(self, acts, g_out):
        grads = [None] * len(self.weights)
        g = g_out
        n_layers = len(self.weights) // 2
        for k in reversed(range(n_layers)):
            grads[2 * k] = acts[k].T @ g
            grads[2 * k + 1] = g.sum(axis=0)
            if k > 0:
                g = (g @ self.weights[2 * k].T) * (1 - acts[k] ** 2)
        return grads

    def predict_proba(self, X):
        return softmax(self.logits(X), axis=1)

    def copy(self):
        return StudentModel(self.input_dim, self.num_classes, tuple(self.hidden),
                            [w.copy() for w in self.weights], self.x_mean.copy(),
                            self.x_scale.copy(), self.seed, list(self.class_names))

    def to_json(self):
        return {"format_version": FORMAT_VERSION, "kind": "mlp-student",
                "architecture": {"input_dim": self.input_dim, "hidden": list(self.hidden),
                                 "num_classes": self.num_classes, "activation": "tanh"},
                "class_names": list(self.class_names), "seed": self.seed,
                "x_mean": self.x_mean.tolist(), "x_scale": self.x_scale.tolist(),
                "weights": [w.tolist() for w in self.weights]}

    @classmethod
    def from_json(cls, d):
        if d.get("format_version") != FORMAT_VERSION or d.get("kind") != "mlp-student":
            raise ConfigurationError("not a student checkpoint of a supported version")
        a = d["architecture"]
        return cls(a["input_dim"], a["num_classes"], tuple(a["hidden"]),
                   [np.array(w, dtype=float) for w in d["weights"]],
                   np.array(d["x_mean"]), np.array(d["x_scale"]), d["seed"], d["class_names"])


@dataclass
class DistillConfig:
    temperature: float = 2.0
    loss_kind: str = "sse"
    epochs: int = 100
    batch_size: int = 32
    lr: float = 3e-3
    seed: int = 0
    hard_weight: float = 0.0

    def __post_init__(self):
        if self.temperature < 1:
            raise ConfigurationError("temperature must be >= 1")
        if self.loss_kind not in LOSS_KINDS:
            raise ConfigurationError(f"unknown loss kind {self.loss_kind!r}")
        if self.epochs < 0 or self.batch_size < 1 or not self.lr > 0:
            raise ConfigurationError("invalid epochs/batch_size/lr")
        if not 0 <= self.hard_weight <= 1:
            raise ConfigurationError("hard_weight must be in [0, 1]")


def train_student(student: StudentModel, X, probs, cfg: DistillConfig = DistillConfig(),
                  X_val=None, y_val=None, hard_labels=None):
    """Minibatch Adam on the configured distillation loss.

    ``probs`` is an (n, C) array of teacher (or one-hot hand) labels.  The
    trace holds per-epoch mean training loss and, when validation data is
    given, held-out accuracy.  Standardization statistics are taken from
    ``X`` on the first call.
    """
    X = np.asarray(X, dtype=float)
    probs = np.asarray(probs, dtype=float)
    if len(X) == 0:
        raise ConfigurationError("no training data")
    if probs.ndim != 2 or probs.shape[1] != student.num_classes or len(probs) != len(X):
        raise ConfigurationError("soft labels must be (n, C) with C matching the student")
    student = student.copy()
    trace = {"loss": [], "val_accuracy": []}
    if cfg.epochs == 0:
        return student, trace
    student.x_mean = X.mean(axis=0)
    scale = X.std(axis=0)
    student.x_scale = np.where(scale > 1e-12, scale, 1.0)
    hard = np.argmax(probs, axis=1) if hard_labels is None else np.asarray(hard_labels, dtype=int)
    params = student.params()
    opt = Adam(params, lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    n = len(X)
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            acts = student._forward(X[idx])
            loss, g_out = distill_loss_and_grad(cfg.loss_kind, acts[-1], probs[idx], cfg.temperature)
            if cfg.hard_weight > 0:
                log_s = log_softmax(acts[-1], axis=1)
                onehot = np.eye(student.num_classes)[hard[idx]]
                ce = -np.mean(np.sum(onehot * log_s, axis=1))
                loss = (1 - cfg.hard_weight) * loss + cfg.hard_weight * ce
                g_out = (1 - cfg.hard_weight) * g_out + cfg.hard_weight * (np.exp(log_s) - onehot) / len(idx)
            grads = student.backward(acts, g_out)
            opt.step(params, {f"w{i}": g for i, g in enumerate(grads)})
            total += loss * len(idx)
        trace["loss"].append(total / n)
        if X_val is not None and y_val is not None:
            acc = float(np.mean(np.argmax(student.logits(X_val), axis=1) == np.asarray(y_val)))
            trace["val_accuracy"].append(acc)
    return student, trace


def student_predict(student: StudentModel, x) -> SoftLabel:
    """Soft label at T=1; ``confidence`` is the max probability."""
    probs = student.predict_proba(np.atleast_2d(x))[0]
    return SoftLabel(probs / probs.sum(), "teacher", 1.0)


def save_student(student, path):
    with open(path, "w") as fh:
        json.dump(student.to_json(), fh)


def load_student(path):
    with open(path) as fh:
        return StudentModel.from_json(json.load(fh))


def write_soft_labels(path, labels):
    with open(path, "w") as fh:
        for lab in labels:
            fh.write(json.dumps(lab.to_json(), sort_keys=True) + "\n")


def read_soft_labels(path):
    with open(path) as fh:
        return [SoftLabel.from_json(json.loads(line)) for line in fh if line.strip()]


class DistilledStudent(ClassifierMixin, BaseEstimator):
    """scikit-learn front end for :func:`train_student`.

    ``fit(X, y)`` accepts either integer labels (one-hot targets) or an
    (n, C) matrix of teacher probabilities.
    """

    def __init__(self, hidden=(64,), temperature=2.0, loss="sse", epochs=100, batch_size=32,
                 lr=3e-3, hard_weight=0.0, num_classes=None, seed=0):
        self.hidden = hidden
        self.temperature = temperature
        self.loss = loss
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.hard_weight = hard_weight
        self.num_classes = num_classes
        self.seed = seed

    def fit(self, X, y, X_val=None, y_val=None):
        X = check_array(X, dtype=float)
        y = np.asarray(y)
        if y.ndim == 1:
            C = self.num_classes if self.num_classes is not None else int(y.max()) + 1
            probs = np.eye(C)[y.astype(int)]
        else:
            probs = check_array(y, dtype=float)
            C = probs.shape[1]
        cfg = DistillConfig(self.temperature, self.loss, self.epochs, self.batch_size, self.lr,
                            self.seed, self.hard_weight)
        init = StudentModel.create(X.shape[1], C, tuple(self.hidden), self.seed)
        self.model_, self.trace_ = train_student(init, X, probs, cfg, X_val, y_val)
        self.classes_ = np.arange(C)
        self.n_features_in_ = X.shape[1]
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "model_")
        return self.model_.predict_proba(check_array(X, dtype=float))

    def predict(self, X):
        proba = self.predict_proba(X)
        return self.classes_[np.argmax(proba, axis=1)]
