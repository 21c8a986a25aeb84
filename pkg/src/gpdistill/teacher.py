"""Sparse variational GP multi-class classifier (the teacher).

One latent GP per class, all sharing an RBF kernel and a set of ``m``
trainable inducing inputs ``Z``.  The variational posterior is whitened:
``u_c = chol(Kzz) v_c`` with ``q(v_c) = N(mu_c, L_c L_c^T)`` and prior
``N(0, I)``.  The softmax likelihood expectation is estimated by Monte Carlo
with reparameterized per-point marginals, and all gradients are analytic.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import logsumexp, softmax
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.cluster import kmeans_plusplus
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .exceptions import ConfigurationError, NumericalError, ParameterError
from .optim import Adam

FORMAT_VERSION = 1
JITTER_LADDER = (1e-8, 1e-7, 1e-6, 1e-5, 1e-4)


# --------------------------------------------------------------------------
# kernel


@dataclass
class RBFKernelParams:
    """Stored in log space; ``lengthscale`` is scalar or per-dimension (ARD)."""

    log_lengthscale: np.ndarray
    log_variance: float

    @classmethod
    def create(cls, lengthscale=1.0, variance=1.0):
        ls = np.atleast_1d(np.asarray(lengthscale, dtype=float))
        if np.any(ls <= 0) or variance <= 0:
            raise ParameterError("kernel parameters must be strictly positive")
        return cls(np.log(ls), float(np.log(variance)))

    @property
    def lengthscale(self):
        return np.exp(self.log_lengthscale)

    @property
    def variance(self):
        return float(np.exp(self.log_variance))


def rbf(x1, x2, kernel: RBFKernelParams) -> float:
    x1 = np.atleast_1d(np.asarray(x1, dtype=float))
    x2 = np.atleast_1d(np.asarray(x2, dtype=float))
    if x1.shape != x2.shape:
        raise ParameterError(f"dimension mismatch {x1.shape} vs {x2.shape}")
    r2 = np.sum(((x1 - x2) / kernel.lengthscale) ** 2)
    return kernel.variance * float(np.exp(-0.5 * r2))


def rbf_matrix(A, B, lengthscale, variance):
    As = A / lengthscale
    Bs = B / lengthscale
    r2 = (As * As).sum(1)[:, None] + (Bs * Bs).sum(1)[None, :] - 2 * As @ Bs.T
    return variance * np.exp(-0.5 * np.maximum(r2, 0.0))


def cholesky_jittered(K, jitter=1e-6):
    """Cholesky of ``K + j I`` escalating ``j`` along the jitter ladder.

    Returns ``(L, j)``.
    """
    eye = np.eye(len(K))
    for j in [jitter] + [j for j in JITTER_LADDER if j > jitter]:
        try:
            return np.linalg.cholesky(K + j * eye), j
        except np.linalg.LinAlgError:
            continue
    raise NumericalError("Cholesky failed after jitter escalation")


def kl_q_p(m_u, L, Kzz) -> float:
    """KL(N(m_u, L L^T) || N(0, Kzz)) in closed form."""
    m_u = np.atleast_1d(np.asarray(m_u, dtype=float))
    L = np.atleast_2d(np.asarray(L, dtype=float))
    Kzz = np.atleast_2d(np.asarray(Kzz, dtype=float))
    Lk, _ = cholesky_jittered(Kzz, 0.0)
    M = len(m_u)
    LinvL = solve_triangular(Lk, L, lower=True)
    alpha = solve_triangular(Lk, m_u, lower=True)
    logdet_p = 2 * np.sum(np.log(np.diag(Lk)))
    logdet_q = 2 * np.sum(np.log(np.abs(np.diag(L))))
    return 0.5 * (np.sum(LinvL ** 2) + alpha @ alpha - M + logdet_p - logdet_q)


# --------------------------------------------------------------------------
# model state


@dataclass
class SVGPModel:
    """Unconstrained SVGP parameters.

    ``q_tril`` holds the lower-triangular factors with the diagonal in log
    space, so ``L = tril(q_tril, -1) + diag(exp(diag(q_tril)))``.
    """

    Z: np.ndarray
    q_mu: np.ndarray
    q_tril: np.ndarray
    kernel: RBFKernelParams
    jitter: float = 1e-6
    class_names: list = field(default_factory=list)
    extractor_id: str = ""
    x_mean: np.ndarray | None = None
    x_scale: np.ndarray | None = None

    def prepare(self, X):
        """Apply the stored input standardization (identity when absent)."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if self.x_mean is None:
            return X
        return (X - self.x_mean) / self.x_scale

    @property
    def num_classes(self):
        return self.q_mu.shape[0]

    @property
    def num_inducing(self):
        return self.Z.shape[0]

    @property
    def L(self):
        return _tril_from_raw(self.q_tril)

    def params(self):
        return {"Z": self.Z, "q_mu": self.q_mu, "q_tril": self.q_tril,
                "log_ls": self.kernel.log_lengthscale,
                "log_var": np.array([self.kernel.log_variance])}

    @classmethod
    def from_params(cls, p, jitter=1e-6, class_names=(), extractor_id="", x_mean=None, x_scale=None):
        kern = RBFKernelParams(np.array(p["log_ls"], dtype=float), float(np.asarray(p["log_var"]).ravel()[0]))
        return cls(np.array(p["Z"], dtype=float), np.array(p["q_mu"], dtype=float),
                   np.array(p["q_tril"], dtype=float), kern, jitter, list(class_names), extractor_id,
                   None if x_mean is None else np.array(x_mean, dtype=float),
                   None if x_scale is None else np.array(x_scale, dtype=float))

    def copy(self):
        return SVGPModel.from_params({k: np.copy(v) for k, v in self.params().items()},
                                     self.jitter, self.class_names, self.extractor_id,
                                     self.x_mean, self.x_scale)

    def to_json(self):
        return {
            "format_version": FORMAT_VERSION,
            "kind": "svgp-teacher",
            "class_names": list(self.class_names),
            "extractor_id": self.extractor_id,
            "jitter": self.jitter,
            "kernel": {"type": "rbf", "ard": bool(self.kernel.log_lengthscale.size > 1),
                       "log_lengthscale": self.kernel.log_lengthscale.tolist(),
                       "log_variance": self.kernel.log_variance},
            "Z": self.Z.tolist(),
            "q_mu": self.q_mu.tolist(),
            "q_tril": self.q_tril.tolist(),
            "x_mean": None if self.x_mean is None else self.x_mean.tolist(),
            "x_scale": None if self.x_scale is None else self.x_scale.tolist(),
        }

    @classmethod
    def from_json(cls, d):
        if d.get("format_version") != FORMAT_VERSION or d.get("kind") != "svgp-teacher":
            raise ConfigurationError("not a teacher checkpoint of a supported version")
        p = {"Z": d["Z"], "q_mu": d["q_mu"], "q_tril": d["q_tril"],
             "log_ls": d["kernel"]["log_lengthscale"], "log_var": [d["kernel"]["log_variance"]]}
        return cls.from_params(p, d["jitter"], d["class_names"], d["extractor_id"],
                               d.get("x_mean"), d.get("x_scale"))


def _tril_from_raw(raw):
    L = np.tril(raw, -1)
    idx = np.arange(raw.shape[-1])
    L[..., idx, idx] = np.exp(raw[..., idx, idx])
    return L


def init_svgp(X, num_classes, num_inducing=64, lengthscale=None, variance=1.0, ard=False,
              jitter=1e-6, seed=0, class_names=(), extractor_id="", standardize=False):
    """Prior-initialized model; inducing inputs by k-means++ seeding on ``X``.

    With ``standardize=True`` the per-feature mean and standard deviation
    of ``X`` are stored on the model and applied to every input it sees.
    """
    X = np.asarray(X, dtype=float)
    x_mean = x_scale = None
    if standardize:
        x_mean = X.mean(axis=0)
        sd = X.std(axis=0)
        x_scale = np.where(sd > 1e-12, sd, 1.0)
        X = (X - x_mean) / x_scale
    if num_classes < 2:
        raise ParameterError("need at least two classes")
    m = min(num_inducing, len(X))
    if m < 1:
        raise ParameterError("need at least one inducing point")
    Z, _ = kmeans_plusplus(X, m, random_state=seed)
    if lengthscale is None:
        # median heuristic on the inducing inputs
        d2 = np.sum((Z[:, None, :] - Z[None, :, :]) ** 2, axis=-1)
        pos = d2[np.triu_indices(m, 1)]
        lengthscale = float(np.sqrt(np.median(pos[pos > 0]))) if np.any(pos > 0) else 1.0
    ls = np.full(X.shape[1], lengthscale) if ard else lengthscale
    q_tril = np.zeros((num_classes, m, m))
    return SVGPModel(Z.copy(), np.zeros((num_classes, m)), q_tril,
                     RBFKernelParams.create(ls, variance), jitter, list(class_names), extractor_id,
                     x_mean, x_scale)


# --------------------------------------------------------------------------
# marginals and ELBO


def _marginals(p, X, jitter):
    """Per-class means and variances of q(f) at ``X`` plus cached pieces."""
    Z = p["Z"]
    ls = np.exp(p["log_ls"])
    var = float(np.exp(p["log_var"][0]))
    Kzz0 = rbf_matrix(Z, Z, ls, var)
    Lk, _ = cholesky_jittered(Kzz0, jitter)
    Kzx = rbf_matrix(Z, X, ls, var)
    A = solve_triangular(Lk, Kzx, lower=True)
    L = _tril_from_raw(p["q_tril"])
    mu = p["q_mu"] @ A
    B = np.einsum("cji,jb->cib", L, A)
    f_var = var - np.sum(A * A, axis=0) + np.sum(B * B, axis=1)
    f_var = np.maximum(f_var, 1e-12)
    return mu, f_var, dict(Z=Z, ls=ls, var=var, Kzz0=Kzz0, Lk=Lk, Kzx=Kzx, A=A, L=L, B=B)


def _kl_whitened(q_mu, L):
    M = q_mu.shape[1]
    diag = np.diagonal(L, axis1=1, axis2=2)
    return 0.5 * (np.sum(L * L, axis=(1, 2)) + np.sum(q_mu * q_mu, axis=1) - M
                  - 2 * np.sum(np.log(diag), axis=1))


def _mc_noise(seed, mc_samples, num_classes, n):
    return np.random.default_rng(seed).standard_normal((mc_samples, num_classes, n))


def _rbf_param_grads(G, K, A, B, ls):
    """Gradients of ``sum(G * K)`` with ``K = rbf(A, B)`` w.r.t. A, log-variance, log-lengthscale."""
    diff = (A[:, None, :] - B[None, :, :]) / ls ** 2
    GK = G * K
    gA = -np.einsum("ij,ijd->id", GK, diff)
    g_logvar = GK.sum()
    g_logls_d = np.einsum("ij,ijd->d", GK, diff * (A[:, None, :] - B[None, :, :]))
    return gA, g_logvar, g_logls_d


def elbo_and_grad(p, X, y, total_n, mc_samples=16, seed=0, jitter=1e-6, eps=None, need_grad=True):
    """Minibatch ELBO estimate and its gradient w.r.t. every entry of ``p``."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=int)
    b = len(X)
    C = p["q_mu"].shape[0]
    if np.any(y < 0) or np.any(y >= C):
        raise ParameterError("labels must lie in [0, C)")
    mu, f_var, c = _marginals(p, X, jitter)
    sd = np.sqrt(f_var)
    if eps is None:
        eps = _mc_noise(seed, mc_samples, C, b)
    S = eps.shape[0]
    F = mu[None] + sd[None] * eps
    lse = logsumexp(F, axis=1)
    cols = np.arange(b)
    ell = np.sum(F[:, y, cols] - lse) / S
    scale = total_n / b
    kl = _kl_whitened(p["q_mu"], c["L"])
    value = scale * ell - kl.sum()
    if not need_grad:
        return value, None

    onehot = np.zeros((C, b))
    onehot[y, cols] = 1.0
    G = (onehot[None] - softmax(F, axis=1)) * (scale / S)
    g_mu = G.sum(0)
    g_var = (G * eps).sum(0) / (2 * sd)

    A, L, B, Lk = c["A"], c["L"], c["B"], c["Lk"]
    g_qmu = g_mu @ A.T - p["q_mu"]
    # variance term sum_i g_var[c,i] * ||L_c^T a_i||^2
    M_c = np.einsum("jb,cb,kb->cjk", A, g_var, A)
    diag = np.diagonal(L, axis1=1, axis2=2)
    gL = np.tril(2 * M_c @ L) - L
    idx = np.arange(L.shape[-1])
    gL[:, idx, idx] += 1.0 / diag
    g_tril = np.tril(gL, -1)
    g_tril[:, idx, idx] = gL[:, idx, idx] * diag

    gA = p["q_mu"].T @ g_mu - 2 * A * g_var.sum(0) + 2 * np.einsum("cjk,ckb,cb->jb", L, B, g_var)
    g_logvar = c["var"] * g_var.sum()

    # A = Lk^{-1} Kzx
    g_Kzx = solve_triangular(Lk, gA, lower=True, trans="T")
    g_Lk = -np.tril(g_Kzx @ A.T)
    # Cholesky backward pass
    P = np.tril(Lk.T @ g_Lk)
    P[np.diag_indices_from(P)] *= 0.5
    Sm = solve_triangular(Lk, solve_triangular(Lk, P.T, lower=True, trans="T").T, lower=True, trans="T")
    g_Kzz = 0.5 * (Sm + Sm.T)

    ls = c["ls"]
    gZ1, gv1, gl1 = _rbf_param_grads(g_Kzx, c["Kzx"], c["Z"], X, ls)
    gZ2, gv2, gl2 = _rbf_param_grads(g_Kzz, c["Kzz0"], c["Z"], c["Z"], ls)
    gZ = gZ1 + 2 * gZ2
    g_logvar += gv1 + gv2
    g_logls = gl1 + gl2
    if p["log_ls"].size == 1:
        g_logls = np.array([g_logls.sum()])
    grads = {"Z": gZ, "q_mu": g_qmu, "q_tril": g_tril, "log_ls": g_logls,
             "log_var": np.array([g_logvar])}
    return value, grads


def elbo(model: SVGPModel, X, y, total_n=None, mc_samples=16, seed=0) -> float:
    """Monte Carlo ELBO of a minibatch scaled to a dataset of ``total_n`` points."""
    total_n = len(X) if total_n is None else total_n
    value, _ = elbo_and_grad(model.params(), model.prepare(X), y, total_n, mc_samples, seed, model.jitter,
                             need_grad=False)
    return float(value)


# --------------------------------------------------------------------------
# training and prediction


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 32
    lr0: float = 1e-3
    decay: float = 0.95
    mc_samples: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.mc_samples < 1:
            raise ConfigurationError("epochs >= 0, batch_size >= 1 and mc_samples >= 1 required")
        if not (0 < self.decay <= 1) or not self.lr0 > 0:
            raise ConfigurationError("need lr0 > 0 and 0 < decay <= 1")


def train_teacher(model: SVGPModel, X, y, cfg: TrainConfig = TrainConfig()):
    """Adam ascent on the ELBO; returns ``(trained_model, trace)``.

    The learning rate decays by ``cfg.decay`` once per epoch.  ``trace`` has
    per-epoch mean minibatch ELBO under ``"elbo"``.
    """
    X = model.prepare(X)
    y = np.asarray(y, dtype=int)
    C = model.num_classes
    missing = sorted(set(range(C)) - set(np.unique(y).tolist()))
    if missing:
        raise ConfigurationError(f"classes without training data: {missing}")
    model = model.copy()
    params = model.params()
    # keep log_var a writable array entry
    params["log_var"] = np.array(params["log_var"], dtype=float)
    opt = Adam(params, lr=cfg.lr0)
    rng = np.random.default_rng(cfg.seed)
    n = len(X)
    trace = {"elbo": [], "lr": []}
    for epoch in range(cfg.epochs):
        opt.lr = cfg.lr0 * cfg.decay ** epoch
        order = rng.permutation(n)
        values = []
        for start in range(0, n, cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            step_seed = int(rng.integers(2 ** 63 - 1))
            value, grads = elbo_and_grad(params, X[batch], y[batch], n, cfg.mc_samples,
                                         step_seed, model.jitter)
            grads["q_tril"] = np.tril(grads["q_tril"])
            opt.step(params, grads, maximize=True)
            values.append(value)
        trace["elbo"].append(float(np.mean(values)))
        trace["lr"].append(opt.lr)
    trained = SVGPModel.from_params(params, model.jitter, model.class_names, model.extractor_id,
                                    model.x_mean, model.x_scale)
    return trained, trace


def predict_proba(model: SVGPModel, X, mc_samples=256, seed=0):
    """Monte Carlo predictive class probabilities, shape (n, C)."""
    X = model.prepare(X)
    mu, f_var, _ = _marginals(model.params(), X, model.jitter)
    eps = _mc_noise(seed, mc_samples, model.num_classes, len(X))
    F = mu[None] + np.sqrt(f_var)[None] * eps
    probs = softmax(F, axis=1).mean(axis=0).T
    return probs / probs.sum(axis=1, keepdims=True)


def predictive_entropy(probs):
    p = np.clip(np.asarray(probs, dtype=float), 1e-300, 1.0)
    return -np.sum(np.asarray(probs) * np.log(p), axis=-1)


def latent_moments(model: SVGPModel, X):
    """Per-class predictive mean and variance of the latent functions, each (n, C)."""
    mu, f_var, _ = _marginals(model.params(), model.prepare(X), model.jitter)
    return mu.T, f_var.T


def save_teacher(model: SVGPModel, path):
    with open(path, "w") as fh:
        json.dump(model.to_json(), fh)


def load_teacher(path) -> SVGPModel:
    with open(path) as fh:
        return SVGPModel.from_json(json.load(fh))


class SVGPClassifier(ClassifierMixin, BaseEstimator):
    """scikit-learn wrapper around :func:`train_teacher` / :func:`predict_proba`.

    Labels must be integers in ``[0, num_classes)``; index 0 is reserved for
    the background class by convention of the pipeline.
    """

    def __init__(self, num_inducing=64, num_classes=None, epochs=100, batch_size=32, lr=1e-3,
                 decay=0.95, mc_samples=16, predict_samples=256, lengthscale=None, variance=1.0,
                 ard=False, jitter=1e-6, standardize=False, seed=0):
        self.num_inducing = num_inducing
        self.num_classes = num_classes
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.decay = decay
        self.mc_samples = mc_samples
        self.predict_samples = predict_samples
        self.lengthscale = lengthscale
        self.variance = variance
        self.ard = ard
        self.jitter = jitter
        self.standardize = standardize
        self.seed = seed

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=float)
        y = y.astype(int)
        C = self.num_classes if self.num_classes is not None else int(y.max()) + 1
        model = init_svgp(X, C, self.num_inducing, self.lengthscale, self.variance, self.ard,
                          self.jitter, self.seed, standardize=self.standardize)
        cfg = TrainConfig(self.epochs, self.batch_size, self.lr, self.decay, self.mc_samples, self.seed)
        self.model_, self.trace_ = train_teacher(model, X, y, cfg)
        self.classes_ = np.arange(C)
        self.n_features_in_ = X.shape[1]
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=float)
        return predict_proba(self.model_, X, self.predict_samples, self.seed)

    def predict(self, X):
        proba = self.predict_proba(X)
        return self.classes_[np.argmax(proba, axis=1)]

    def predictive_entropy(self, X):
        return predictive_entropy(self.predict_proba(X))
