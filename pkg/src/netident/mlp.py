"""Small feed-forward networks trained with Levenberg-Marquardt.

Two model shapes share one trainer core:

* :class:`Mlp` — one hidden tanh layer and a single logistic output, the
  2-class scorer (targets 1 for the claimed user, 0 for impostors).
* :class:`PooledMlp` — one hidden tanh layer and one logistic unit per user,
  with a softmax over the per-user logistic scores; the single-model
  multiclass baseline.

The trainer minimizes sum-of-squares residuals.  Each epoch solves
(JtJ + lambda*I) delta = Jt r and accepts the step only if the error
strictly decreases; rejections escalate lambda and retry, and an epoch that
exhausts its retries leaves the weights unchanged.  Training error is
therefore non-increasing by construction, which train() asserts.

A plain full-batch gradient-descent trainer sits behind the same interface
(config trainer="gd") as an independent cross-check of the LM path.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

MODEL_SCHEMA_VERSION = 1

HIDDEN_MIN = 10
HIDDEN_MAX = 30
LM_MAX_RETRIES = 10
LAMBDA_MIN = 1e-12
LAMBDA_MAX = 1e12
#: Keep scores strictly inside (0, 1) even when the logistic saturates.
SCORE_EPS = 1e-12
#: Training sets carry at most this many impostor rows per genuine row.
NEGATIVE_RATIO_CAP = 5


@dataclass(frozen=True)
class MlpConfig:
    input_dim: int = 10
    hidden_neurons: int = 20
    epochs: int = 100
    lm_lambda0: float = 1e-3
    lambda_up: float = 10.0
    lambda_down: float = 0.1
    seed: int = 0
    trainer: str = "lm"  # "lm" or "gd"
    learning_rate: float = 0.05  # gd only

    def __post_init__(self):
        if not HIDDEN_MIN <= self.hidden_neurons <= HIDDEN_MAX:
            raise ValueError(
                f"hidden_neurons must be in [{HIDDEN_MIN}, {HIDDEN_MAX}], "
                f"got {self.hidden_neurons}"
            )
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.input_dim < 1:
            raise ValueError("input_dim must be >= 1")
        if self.trainer not in ("lm", "gd"):
            raise ValueError(f"unknown trainer {self.trainer!r}")
        if self.lm_lambda0 <= 0 or self.lambda_up <= 1 or not 0 < self.lambda_down < 1:
            raise ValueError("lambda schedule must satisfy lambda0>0, up>1, 0<down<1")


def logistic(u: np.ndarray) -> np.ndarray:
    """Numerically stable elementwise logistic function."""
    u = np.asarray(u, dtype=np.float64)
    out = np.empty_like(u)
    pos = u >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-u[pos]))
    eu = np.exp(u[~pos])
    out[~pos] = eu / (1.0 + eu)
    return out


def _as_matrix(rows, input_dim: int, label: str) -> np.ndarray:
    """Coerce FeatureVector lists or arrays to an (n, input_dim) float matrix,
    rejecting non-finite entries with their location."""
    if hasattr(rows, "as_array"):
        rows = [rows]
    converted = [
        row.as_array() if hasattr(row, "as_array") else np.asarray(row, dtype=np.float64)
        for row in rows
    ]
    if not converted:
        raise ValueError(f"{label} must be non-empty")
    X = np.asarray(converted, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != input_dim:
        raise ValueError(
            f"{label}: expected shape (n, {input_dim}), got {X.shape}"
        )
    bad = ~np.isfinite(X)
    if bad.any():
        i, j = np.argwhere(bad)[0]
        raise ValueError(f"{label}[{i}] has non-finite feature {j}")
    return X


# ---------------------------------------------------------------------------
# 2-class model
# ---------------------------------------------------------------------------


@dataclass
class Mlp:
    """One hidden tanh layer, one logistic output, with frozen z-score
    normalization statistics taken from the training set."""

    W1: np.ndarray  # (hidden, input)
    b1: np.ndarray  # (hidden,)
    w2: np.ndarray  # (hidden,)
    b2: float
    norm_mean: np.ndarray  # (input,)
    norm_std: np.ndarray  # (input,)
    config: Optional[MlpConfig] = None

    @property
    def input_dim(self) -> int:
        return self.W1.shape[1]

    @property
    def hidden_neurons(self) -> int:
        return self.W1.shape[0]

    def params(self) -> np.ndarray:
        return np.concatenate(
            [self.W1.ravel(), self.b1, self.w2, np.array([self.b2])]
        )

    def with_params(self, theta: np.ndarray) -> "Mlp":
        h, d = self.W1.shape
        W1 = theta[: h * d].reshape(h, d)
        b1 = theta[h * d : h * d + h]
        w2 = theta[h * d + h : h * d + 2 * h]
        b2 = float(theta[-1])
        return replace(self, W1=W1, b1=b1, w2=w2, b2=b2)


def _raw_scores(m: Mlp, X: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Unclipped scores plus the intermediates the Jacobian needs."""
    Xh = (X - m.norm_mean) / m.norm_std
    A = np.tanh(Xh @ m.W1.T + m.b1)
    S = logistic(A @ m.w2 + m.b2)
    return S, A, Xh


def forward_batch(m: Mlp, X) -> np.ndarray:
    """Scores for each row of X, clipped strictly inside (0, 1)."""
    X = _as_matrix(X, m.input_dim, "inputs")
    S, _, _ = _raw_scores(m, X)
    return np.clip(S, SCORE_EPS, 1.0 - SCORE_EPS)


def forward(m: Mlp, x) -> float:
    return float(forward_batch(m, [x])[0])


def _jacobian(m: Mlp, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Scores and the (n, n_params) Jacobian dS/dtheta.

    With z = W1 xh + b1, a = tanh z, u = w2.a + b2, s = logistic(u):
      ds/du = s(1-s); du/dw2 = a; du/db2 = 1;
      du/dz_j = w2_j (1 - a_j^2), dz_j/dW1[j,k] = xh_k, dz_j/db1_j = 1.
    """
    S, A, Xh = _raw_scores(m, X)
    ds_du = S * (1.0 - S)  # (n,)
    G = ds_du[:, None] * (m.w2[None, :] * (1.0 - A * A))  # (n, h)
    n, h = A.shape
    J_W1 = np.einsum("ij,ik->ijk", G, Xh).reshape(n, h * m.input_dim)
    J_w2 = ds_du[:, None] * A
    J_b2 = ds_du[:, None]
    J = np.concatenate([J_W1, G, J_w2, J_b2], axis=1)
    return S, J


def jacobian_check(m: Mlp, x, h: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference derivatives
    of the (unclipped) score with respect to every parameter."""
    X = _as_matrix([x], m.input_dim, "input")
    _, J = _jacobian(m, X)
    analytic = J[0]
    theta = m.params()
    numeric = np.empty_like(analytic)
    for k in range(theta.size):
        bump = np.zeros_like(theta)
        bump[k] = h
        s_plus, _, _ = _raw_scores(m.with_params(theta + bump), X)
        s_minus, _, _ = _raw_scores(m.with_params(theta - bump), X)
        numeric[k] = (s_plus[0] - s_minus[0]) / (2.0 * h)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-5)
    return float(np.max(np.abs(analytic - numeric) / denom))


# ---------------------------------------------------------------------------
# Shared trainer core
# ---------------------------------------------------------------------------


@dataclass
class TrainOutcome:
    model: object
    errors: list[float]  # sum-of-squares error after each epoch (index 0 = initial)
    skipped_epochs: int


def _lm_loop(theta, fwd_err, jac, cfg: MlpConfig):
    """Generic damped Gauss-Newton loop over a flat parameter vector.

    fwd_err(theta) -> (residuals, error); jac(theta) -> Jacobian of the model
    output (so that d residual / d theta = -J).  Singular or non-finite
    solves are treated as rejected steps and escalate lambda.
    """
    lam = cfg.lm_lambda0
    r, error = fwd_err(theta)
    errors = [error]
    eye = np.eye(theta.size)
    skipped = 0
    for _ in range(cfg.epochs):
        J = jac(theta)
        JtJ = J.T @ J
        Jtr = J.T @ r
        accepted = False
        for _ in range(1 + LM_MAX_RETRIES):
            try:
                delta = np.linalg.solve(JtJ + lam * eye, Jtr)
            except np.linalg.LinAlgError:
                delta = None
            if delta is not None and np.all(np.isfinite(delta)):
                r2, e2 = fwd_err(theta + delta)
                if e2 < error:
                    theta = theta + delta
                    r, error = r2, e2
                    lam = max(lam * cfg.lambda_down, LAMBDA_MIN)
                    accepted = True
                    break
            lam = min(lam * cfg.lambda_up, LAMBDA_MAX)
        if not accepted:
            skipped += 1
        errors.append(error)
    return theta, errors, skipped


def _gd_loop(theta, fwd_err, jac, cfg: MlpConfig):
    """Full-batch gradient descent on the same loss; dE/dtheta = -2 Jt r."""
    r, error = fwd_err(theta)
    errors = [error]
    for _ in range(cfg.epochs):
        J = jac(theta)
        theta = theta + 2.0 * cfg.learning_rate * (J.T @ r)
        r, error = fwd_err(theta)
        errors.append(error)
    return theta, errors, 0


def _norm_stats(X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mean = X.mean(axis=0)
    std = X.std(axis=0)
    std = np.where(std == 0.0, 1.0, std)  # constant features pass through
    return mean, std


def train_full(cfg: MlpConfig, positives, negatives) -> TrainOutcome:
    """Train a 2-class scorer; targets are 1 for positives, 0 for negatives.

    Negatives beyond NEGATIVE_RATIO_CAP times the positive count are
    subsampled with the config seed before normalization statistics are
    taken, so the statistics describe the actual training rows.  Inputs are
    never mutated.
    """
    P = _as_matrix(positives, cfg.input_dim, "positives")
    N = _as_matrix(negatives, cfg.input_dim, "negatives")
    rng = np.random.default_rng(cfg.seed)

    cap = NEGATIVE_RATIO_CAP * len(P)
    if len(N) > cap:
        idx = np.sort(rng.choice(len(N), size=cap, replace=False))
        N = N[idx]

    X = np.vstack([P, N])
    y = np.concatenate([np.ones(len(P)), np.zeros(len(N))])
    mean, std = _norm_stats(X)

    h, d = cfg.hidden_neurons, cfg.input_dim
    model = Mlp(
        W1=rng.uniform(-0.5, 0.5, (h, d)),
        b1=rng.uniform(-0.5, 0.5, h),
        w2=rng.uniform(-0.5, 0.5, h),
        b2=float(rng.uniform(-0.5, 0.5)),
        norm_mean=mean,
        norm_std=std,
        config=cfg,
    )

    def fwd_err(theta):
        S, _, _ = _raw_scores(model.with_params(theta), X)
        r = y - S
        return r, float(r @ r)

    def jac(theta):
        _, J = _jacobian(model.with_params(theta), X)
        return J

    loop = _lm_loop if cfg.trainer == "lm" else _gd_loop
    theta, errors, skipped = loop(model.params(), fwd_err, jac, cfg)
    if cfg.trainer == "lm":
        for prev, cur in zip(errors, errors[1:]):
            assert cur <= prev, "accepted step increased training error"
    return TrainOutcome(model.with_params(theta), errors, skipped)


def train(cfg: MlpConfig, positives, negatives) -> Mlp:
    return train_full(cfg, positives, negatives).model


# ---------------------------------------------------------------------------
# Pooled multiclass model
# ---------------------------------------------------------------------------


@dataclass
class PooledMlp:
    """One hidden layer shared by all users; per-user logistic scores are
    normalized by a softmax into a probability vector."""

    W1: np.ndarray  # (hidden, input)
    b1: np.ndarray  # (hidden,)
    W2: np.ndarray  # (classes, hidden)
    b2: np.ndarray  # (classes,)
    norm_mean: np.ndarray
    norm_std: np.ndarray
    config: Optional[MlpConfig] = None

    @property
    def input_dim(self) -> int:
        return self.W1.shape[1]

    @property
    def n_classes(self) -> int:
        return self.W2.shape[0]

    def params(self) -> np.ndarray:
        return np.concatenate(
            [self.W1.ravel(), self.b1, self.W2.ravel(), self.b2]
        )

    def with_params(self, theta: np.ndarray) -> "PooledMlp":
        h, d = self.W1.shape
        c = self.W2.shape[0]
        pos = 0
        W1 = theta[pos : pos + h * d].reshape(h, d); pos += h * d
        b1 = theta[pos : pos + h]; pos += h
        W2 = theta[pos : pos + c * h].reshape(c, h); pos += c * h
        b2 = theta[pos : pos + c]
        return replace(self, W1=W1, b1=b1, W2=W2, b2=b2)


def _pooled_raw(m: PooledMlp, X: np.ndarray):
    Xh = (X - m.norm_mean) / m.norm_std
    A = np.tanh(Xh @ m.W1.T + m.b1)  # (n, h)
    S = logistic(A @ m.W2.T + m.b2)  # (n, c) per-user logistic scores
    E = np.exp(S - S.max(axis=1, keepdims=True))
    P = E / E.sum(axis=1, keepdims=True)  # (n, c)
    return P, S, A, Xh


def pooled_forward_batch(m: PooledMlp, X) -> np.ndarray:
    """Per-class probability rows (each sums to 1)."""
    X = _as_matrix(X, m.input_dim, "inputs")
    P, _, _, _ = _pooled_raw(m, X)
    return P


def pooled_forward(m: PooledMlp, x) -> np.ndarray:
    return pooled_forward_batch(m, [x])[0]


def _pooled_jacobian(m: PooledMlp, X: np.ndarray):
    """Probabilities and the (n*c, n_params) Jacobian dP/dtheta.

    dP_a/du_b factorizes through the softmax and the logistic:
      M[a,b] = P_a (delta_ab - P_b) * S_b (1 - S_b).
    The hidden-layer terms then follow the chain rule through
    Q[a,j] = sum_b M[a,b] W2[b,j] * (1 - A_j^2).
    """
    P, S, A, Xh = _pooled_raw(m, X)
    n, h = A.shape
    c, d = m.n_classes, m.input_dim

    ds = S * (1.0 - S)  # (n, c)
    delta = np.eye(c)
    # M[i,a,b] = P[i,a] * (delta_ab - P[i,b]) * ds[i,b]
    M = P[:, :, None] * (delta[None, :, :] - P[:, None, :]) * ds[:, None, :]
    Q = np.einsum("iab,bj->iaj", M, m.W2) * (1.0 - A * A)[:, None, :]  # (n,c,h)

    J_W1 = np.einsum("iaj,ik->iajk", Q, Xh).reshape(n, c, h * d)
    J_b1 = Q
    J_W2 = np.einsum("iab,ij->iabj", M, A).reshape(n, c, c * h)
    J_b2 = M
    J = np.concatenate([J_W1, J_b1, J_W2, J_b2], axis=2).reshape(n * c, -1)
    return P, J


def train_pooled(cfg: MlpConfig, features_by_class: Sequence) -> TrainOutcome:
    """Train the multiclass baseline on one feature matrix per class.

    Residuals are one-hot targets minus the softmax probabilities, stacked
    over all samples and classes.  Class balancing is the caller's concern.
    """
    mats = [
        _as_matrix(rows, cfg.input_dim, f"class[{i}]")
        for i, rows in enumerate(features_by_class)
    ]
    c = len(mats)
    if c < 2:
        raise ValueError("need at least two classes")
    X = np.vstack(mats)
    labels = np.concatenate([np.full(len(m), i) for i, m in enumerate(mats)])
    Y = np.zeros((len(X), c))
    Y[np.arange(len(X)), labels.astype(int)] = 1.0

    mean, std = _norm_stats(X)
    rng = np.random.default_rng(cfg.seed)
    h, d = cfg.hidden_neurons, cfg.input_dim
    model = PooledMlp(
        W1=rng.uniform(-0.5, 0.5, (h, d)),
        b1=rng.uniform(-0.5, 0.5, h),
        W2=rng.uniform(-0.5, 0.5, (c, h)),
        b2=rng.uniform(-0.5, 0.5, c),
        norm_mean=mean,
        norm_std=std,
        config=cfg,
    )

    def fwd_err(theta):
        P, _, _, _ = _pooled_raw(model.with_params(theta), X)
        r = (Y - P).ravel()
        return r, float(r @ r)

    def jac(theta):
        _, J = _pooled_jacobian(model.with_params(theta), X)
        return J

    loop = _lm_loop if cfg.trainer == "lm" else _gd_loop
    theta, errors, skipped = loop(model.params(), fwd_err, jac, cfg)
    return TrainOutcome(model.with_params(theta), errors, skipped)


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------


def _config_to_dict(cfg: Optional[MlpConfig]) -> Optional[dict]:
    if cfg is None:
        return None
    return {
        "input_dim": cfg.input_dim,
        "hidden_neurons": cfg.hidden_neurons,
        "epochs": cfg.epochs,
        "lm_lambda0": cfg.lm_lambda0,
        "lambda_up": cfg.lambda_up,
        "lambda_down": cfg.lambda_down,
        "seed": cfg.seed,
        "trainer": cfg.trainer,
        "learning_rate": cfg.learning_rate,
    }


def _config_from_dict(doc: Optional[dict]) -> Optional[MlpConfig]:
    return None if doc is None else MlpConfig(**doc)


def mlp_to_dict(m: Mlp) -> dict:
    return {
        "schema_version": MODEL_SCHEMA_VERSION,
        "kind": "two_class",
        "input_dim": m.input_dim,
        "hidden_neurons": m.hidden_neurons,
        "W1": [[float(v) for v in row] for row in m.W1],
        "b1": [float(v) for v in m.b1],
        "w2": [float(v) for v in m.w2],
        "b2": float(m.b2),
        "norm_mean": [float(v) for v in m.norm_mean],
        "norm_std": [float(v) for v in m.norm_std],
        "config": _config_to_dict(m.config),
    }


def mlp_from_dict(doc: dict) -> Mlp:
    if doc.get("schema_version") != MODEL_SCHEMA_VERSION:
        raise ValueError(f"unsupported model schema_version {doc.get('schema_version')!r}")
    if doc.get("kind") != "two_class":
        raise ValueError(f"not a two-class model: kind={doc.get('kind')!r}")
    return Mlp(
        W1=np.array(doc["W1"], dtype=np.float64).reshape(
            doc["hidden_neurons"], doc["input_dim"]
        ),
        b1=np.array(doc["b1"], dtype=np.float64),
        w2=np.array(doc["w2"], dtype=np.float64),
        b2=float(doc["b2"]),
        norm_mean=np.array(doc["norm_mean"], dtype=np.float64),
        norm_std=np.array(doc["norm_std"], dtype=np.float64),
        config=_config_from_dict(doc.get("config")),
    )


def pooled_to_dict(m: PooledMlp) -> dict:
    return {
        "schema_version": MODEL_SCHEMA_VERSION,
        "kind": "pooled",
        "input_dim": m.input_dim,
        "hidden_neurons": m.W1.shape[0],
        "n_classes": m.n_classes,
        "W1": [[float(v) for v in row] for row in m.W1],
        "b1": [float(v) for v in m.b1],
        "W2": [[float(v) for v in row] for row in m.W2],
        "b2": [float(v) for v in m.b2],
        "norm_mean": [float(v) for v in m.norm_mean],
        "norm_std": [float(v) for v in m.norm_std],
        "config": _config_to_dict(m.config),
    }


def pooled_from_dict(doc: dict) -> PooledMlp:
    if doc.get("schema_version") != MODEL_SCHEMA_VERSION:
        raise ValueError(f"unsupported model schema_version {doc.get('schema_version')!r}")
    if doc.get("kind") != "pooled":
        raise ValueError(f"not a pooled model: kind={doc.get('kind')!r}")
    return PooledMlp(
        W1=np.array(doc["W1"], dtype=np.float64),
        b1=np.array(doc["b1"], dtype=np.float64),
        W2=np.array(doc["W2"], dtype=np.float64),
        b2=np.array(doc["b2"], dtype=np.float64),
        norm_mean=np.array(doc["norm_mean"], dtype=np.float64),
        norm_std=np.array(doc["norm_std"], dtype=np.float64),
        config=_config_from_dict(doc.get("config")),
    )


def save_model(path: Union[str, Path], m: Union[Mlp, PooledMlp]) -> None:
    doc = mlp_to_dict(m) if isinstance(m, Mlp) else pooled_to_dict(m)
    from netident.model import write_json_atomic

    write_json_atomic(Path(path), doc)


def load_model(path: Union[str, Path]) -> Union[Mlp, PooledMlp]:
    with open(path, "r", encoding="utf-8") as f:
        doc = json.load(f)
    if doc.get("kind") == "pooled":
        return pooled_from_dict(doc)
    return mlp_from_dict(doc)
