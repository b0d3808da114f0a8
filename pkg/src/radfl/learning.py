"""Training tasks, local gradient descent and packet segmentation of models."""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq

from .errors import DomainError, NonFiniteGradient, UnsupportedTask

CHECKPOINT_MAGIC = b"RAFL"
_HEADER = struct.Struct("<4sQI")  # magic, M, K -> 16 bytes


# -- segmentation ------------------------------------------------------------

def n_segments(M: int, K: int) -> int:
    if M < 1 or K < 1:
        raise DomainError("M and K must be positive")
    return -(-M // K)


def segment_bounds(M: int, K: int) -> list[tuple[int, int]]:
    return [(l * K, min((l + 1) * K, M)) for l in range(n_segments(M, K))]


def segment_lengths(M: int, K: int) -> np.ndarray:
    return np.array([b - a for a, b in segment_bounds(M, K)], dtype=int)


def segment_index(M: int, K: int) -> np.ndarray:
    """Segment id of every parameter index."""
    return np.arange(M) // K


@dataclass
class ModelVector:
    params: np.ndarray
    segment_size: int

    def __post_init__(self):
        self.params = np.asarray(self.params, dtype=float).ravel()
        n_segments(len(self.params), self.segment_size)

    @property
    def M(self) -> int:
        return len(self.params)

    def segments(self) -> list[np.ndarray]:
        return [self.params[a:b].copy() for a, b in segment_bounds(self.M, self.segment_size)]

    @classmethod
    def from_segments(cls, segs, segment_size: int) -> "ModelVector":
        return cls(np.concatenate([np.asarray(s, dtype=float) for s in segs]), segment_size)

    def to_bytes(self) -> bytes:
        return _HEADER.pack(CHECKPOINT_MAGIC, self.M, self.segment_size) + self.params.astype("<f8").tobytes()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "ModelVector":
        magic, M, K = _HEADER.unpack_from(blob)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError("not a model checkpoint")
        body = np.frombuffer(blob, dtype="<f8", offset=_HEADER.size)
        if len(body) != M:
            raise ValueError(f"checkpoint declares {M} parameters, holds {len(body)}")
        return cls(body.astype(float), K)


# -- tasks -------------------------------------------------------------------

def _weights_from_sizes(sizes) -> np.ndarray:
    sizes = np.asarray(sizes, dtype=float)
    if np.any(sizes <= 0):
        raise DomainError("every client needs at least one data point")
    return sizes / sizes.sum()


class Task:
    """Common interface; ``p`` are the data-size weights ``D_n / sum D``."""

    variant = "base"
    p: np.ndarray
    dim: int

    @property
    def n_clients(self) -> int:
        return len(self.p)

    def loss(self, n: int, w: np.ndarray) -> float:
        raise NotImplementedError

    def grad(self, n: int, w: np.ndarray, batch=None) -> np.ndarray:
        raise NotImplementedError

    def global_loss(self, w: np.ndarray) -> float:
        total = 0.0
        for n in range(self.n_clients):
            total += self.p[n] * self.loss(n, w)
        return total

    def global_grad(self, w: np.ndarray) -> np.ndarray:
        g = np.zeros(self.dim)
        for n in range(self.n_clients):
            g += self.p[n] * self.grad(n, w)
        return g

    def initial_model(self) -> np.ndarray:
        return np.zeros(self.dim)

    def accuracy(self, w: np.ndarray) -> float | None:
        return None

    def to_dict(self) -> dict:
        raise NotImplementedError

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


@dataclass
class QuadraticTask(Task):
    """``F_n(w) = 0.5 w'A_n w - b_n'w + c_n`` with SPD ``A_n``.

    A 1-D ``A_n`` is read as a diagonal, which keeps large models cheap.
    ``c_n`` defaults to ``0.5 b_n' A_n^{-1} b_n`` so each client's minimum is 0.
    """

    A: list
    b: list
    p: np.ndarray
    c: list | None = None
    variant = "quadratic"

    def __post_init__(self):
        self.A = [np.asarray(a, dtype=float) for a in self.A]
        self.b = [np.asarray(v, dtype=float).ravel() for v in self.b]
        self.p = np.asarray(self.p, dtype=float)
        if not (len(self.A) == len(self.b) == len(self.p)):
            raise DomainError("A, b and p must have one entry per client")
        if np.any(self.p <= 0) or not math.isclose(self.p.sum(), 1.0, abs_tol=1e-12):
            raise DomainError("weights must be positive and sum to 1")
        self.dim = len(self.b[0])
        self.diagonal = self.A[0].ndim == 1
        for a in self.A:
            if self.diagonal:
                if a.shape != (self.dim,) or np.any(a <= 0):
                    raise DomainError("diagonal curvatures must be positive vectors of length dim")
                continue
            if a.shape != (self.dim, self.dim) or not np.allclose(a, a.T):
                raise DomainError("each A_n must be a symmetric dim x dim matrix")
            if np.linalg.eigvalsh(a)[0] <= 0:
                raise DomainError("each A_n must be positive definite")
        if self.c is None:
            self.c = [0.5 * float(v @ self._solve(a, v)) for a, v in zip(self.A, self.b)]

    def _apply(self, a, w):
        return a * w if self.diagonal else a @ w

    def _solve(self, a, v):
        return v / a if self.diagonal else np.linalg.solve(a, v)

    def eigenvalues(self, n: int) -> np.ndarray:
        a = self.A[n]
        return np.sort(a) if self.diagonal else np.linalg.eigvalsh(a)

    def loss(self, n, w):
        return float(0.5 * w @ self._apply(self.A[n], w) - self.b[n] @ w + self.c[n])

    def grad(self, n, w, batch=None):
        return self._apply(self.A[n], w) - self.b[n]

    def optimum(self) -> np.ndarray:
        a_bar = sum(p * a for p, a in zip(self.p, self.A))
        b_bar = sum(p * v for p, v in zip(self.p, self.b))
        return self._solve(a_bar, b_bar)

    def to_dict(self):
        return {"variant": self.variant, "A": [a.tolist() for a in self.A], "b": [v.tolist() for v in self.b],
                "c": list(self.c), "p": self.p.tolist()}


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _log1pexp(z):
    return np.logaddexp(0.0, z)


@dataclass
class LogisticTask(Task):
    """L2-regularised binary logistic regression; labels in {0, 1}.

    A bias column of ones is appended to the features internally.
    """

    features: list
    labels: list
    reg: float = 1e-2
    variant = "logistic"
    p: np.ndarray = field(init=False)

    def __post_init__(self):
        self.features = [np.asarray(x, dtype=float) for x in self.features]
        self.labels = [np.asarray(y, dtype=float).ravel() for y in self.labels]
        self.p = _weights_from_sizes([len(y) for y in self.labels])
        self._X = [np.hstack([x, np.ones((len(x), 1))]) for x in self.features]
        self._X_all = np.vstack(self._X)
        self._y_all = np.concatenate(self.labels)
        self.dim = self._X[0].shape[1]

    def loss(self, n, w):
        z = self._X[n] @ w
        y = self.labels[n]
        return float(np.mean(_log1pexp(z) - y * z) + 0.5 * self.reg * (w @ w))

    def global_loss(self, w):
        # p_n = D_n / sum D, so the weighted loss is the pooled sample mean
        z = self._X_all @ w
        return float(np.mean(_log1pexp(z) - self._y_all * z) + 0.5 * self.reg * (w @ w))

    def grad(self, n, w, batch=None):
        X, y = self._X[n], self.labels[n]
        if batch is not None:
            X, y = X[batch], y[batch]
        return X.T @ (_sigmoid(X @ w) - y) / len(y) + self.reg * w

    def accuracy(self, w):
        return float(np.mean((self._X_all @ w > 0) == (self._y_all > 0.5)))

    def to_dict(self):
        return {"variant": self.variant, "features": [x.tolist() for x in self.features],
                "labels": [y.tolist() for y in self.labels], "reg": self.reg}


@dataclass
class TinyMLPTask(Task):
    """One tanh hidden layer, sigmoid output, binary cross-entropy.

    Parameter layout: ``W1 (hidden x d) | b1 (hidden) | w2 (hidden) | b2``.
    """

    features: list
    labels: list
    hidden: int = 8
    reg: float = 1e-3
    init_seed: int = 0
    variant = "mlp"
    p: np.ndarray = field(init=False)

    def __post_init__(self):
        self.features = [np.asarray(x, dtype=float) for x in self.features]
        self.labels = [np.asarray(y, dtype=float).ravel() for y in self.labels]
        self.p = _weights_from_sizes([len(y) for y in self.labels])
        self.d = self.features[0].shape[1]
        self.dim = self.hidden * self.d + 2 * self.hidden + 1
        self._X_all = np.vstack(self.features)
        self._y_all = np.concatenate(self.labels)

    def _unpack(self, w):
        h, d = self.hidden, self.d
        w = np.ascontiguousarray(w)
        W1 = w[: h * d].reshape(h, d)
        b1 = w[h * d: h * d + h]
        w2 = w[h * d + h: h * d + 2 * h]
        b2 = w[-1]
        return W1, b1, w2, b2

    def _forward(self, X, w):
        W1, b1, w2, b2 = self._unpack(w)
        H = np.tanh(X @ W1.T + b1)
        return H, H @ w2 + b2

    def loss(self, n, w):
        _, z = self._forward(self.features[n], w)
        y = self.labels[n]
        return float(np.mean(_log1pexp(z) - y * z) + 0.5 * self.reg * (w @ w))

    def global_loss(self, w):
        _, z = self._forward(self._X_all, w)
        return float(np.mean(_log1pexp(z) - self._y_all * z) + 0.5 * self.reg * (w @ w))

    def grad(self, n, w, batch=None):
        X, y = self.features[n], self.labels[n]
        if batch is not None:
            X, y = X[batch], y[batch]
        W1, b1, w2, b2 = self._unpack(w)
        H, z = self._forward(X, w)
        dz = (_sigmoid(z) - y) / len(y)
        g_w2 = H.T @ dz
        g_b2 = dz.sum()
        dH = np.outer(dz, w2) * (1.0 - H ** 2)
        g_W1 = dH.T @ X
        g_b1 = dH.sum(axis=0)
        return np.concatenate([g_W1.ravel(), g_b1, g_w2, [g_b2]]) + self.reg * w

    def initial_model(self):
        # fan-in scaling keeps tanh out of saturation for wide inputs
        rng = np.random.default_rng(self.init_seed)
        h, d = self.hidden, self.d
        return np.concatenate([rng.normal(scale=1.0 / math.sqrt(d), size=h * d), np.zeros(h),
                               rng.normal(scale=1.0 / math.sqrt(h), size=h), [0.0]])

    def accuracy(self, w):
        _, z = self._forward(self._X_all, w)
        return float(np.mean((z > 0) == (self._y_all > 0.5)))

    def to_dict(self):
        return {"variant": self.variant, "features": [x.tolist() for x in self.features],
                "labels": [y.tolist() for y in self.labels], "hidden": self.hidden, "reg": self.reg,
                "init_seed": self.init_seed}


def task_from_dict(d: dict) -> Task:
    d = dict(d)
    variant = d.pop("variant")
    if variant == "quadratic":
        return QuadraticTask(**d)
    if variant == "logistic":
        return LogisticTask(**d)
    if variant == "mlp":
        return TinyMLPTask(**d)
    raise UnsupportedTask(f"unknown task variant {variant!r}")


def task_from_json(text: str) -> Task:
    return task_from_dict(json.loads(text))


# -- generators --------------------------------------------------------------

def make_quadratic_task(
    n_clients: int,
    dim: int,
    seed: int,
    mu: float = 0.5,
    L: float = 2.0,
    spread: float = 2.0,
    sizes: tuple[int, int] = (50, 150),
    diagonal: bool = False,
) -> QuadraticTask:
    """Random non-iid quadratic clients with eigenvalues in ``[mu, L]``.

    Each client's minimiser is drawn around a shared centre with scale
    ``spread``; ``diagonal=True`` skips the random rotation.
    """
    rng = np.random.default_rng(seed)
    centre = rng.normal(size=dim)
    A, b = [], []
    for _ in range(n_clients):
        eig = rng.uniform(mu, L, size=dim)
        eig[0], eig[-1] = mu, L
        target = centre + rng.normal(scale=spread, size=dim)
        if diagonal:
            A.append(eig)
            b.append(eig * target)
            continue
        q, _ = np.linalg.qr(rng.normal(size=(dim, dim)))
        a = (q * eig) @ q.T
        a = 0.5 * (a + a.T)
        A.append(a)
        b.append(a @ target)
    p = _weights_from_sizes(rng.integers(sizes[0], sizes[1] + 1, size=n_clients))
    return QuadraticTask(A, b, p)


def _blobs(rng, n_clients, n_features, sizes, shift, feature_scale=1.0):
    feats, labels = [], []
    w_true = rng.normal(size=n_features)
    for k in range(n_clients):
        n = int(rng.integers(sizes[0], sizes[1] + 1))
        center = rng.normal(scale=shift, size=n_features)
        x = rng.normal(size=(n, n_features)) + center
        logits = x @ w_true + 0.3 * rng.normal(size=n)
        # skew label balance per client
        y = (logits > np.quantile(logits, rng.uniform(0.2, 0.8))).astype(float)
        feats.append(feature_scale * x)
        labels.append(y)
    return feats, labels


def make_logistic_task(n_clients: int, n_features: int, seed: int, sizes=(40, 120), shift: float = 1.0,
                       reg: float = 1e-2, feature_scale: float | None = None) -> LogisticTask:
    """Gaussian blobs with a client-specific centre and label threshold.

    ``feature_scale`` defaults to ``1/sqrt(n_features)`` so the smoothness
    constant stays O(1) as the input width grows.
    """
    rng = np.random.default_rng(seed)
    scale = 1.0 / math.sqrt(n_features) if feature_scale is None else feature_scale
    feats, labels = _blobs(rng, n_clients, n_features, sizes, shift, scale)
    return LogisticTask(feats, labels, reg)


def make_mlp_task(n_clients: int, n_features: int, seed: int, hidden: int = 8, sizes=(40, 120),
                  shift: float = 1.0, reg: float = 1e-3, feature_scale: float = 1.0) -> TinyMLPTask:
    rng = np.random.default_rng(seed)
    feats, labels = _blobs(rng, n_clients, n_features, sizes, shift, feature_scale)
    return TinyMLPTask(feats, labels, hidden, reg, init_seed=seed)


# -- training ----------------------------------------------------------------

def local_train(task: Task, n: int, start: np.ndarray, epochs: int, lr: float,
                batch_size: int | None = None, rng: np.random.Generator | None = None) -> np.ndarray:
    """``epochs`` gradient steps on client ``n``'s loss.

    Full-batch by default; ``batch_size`` draws one mini-batch per step
    from ``rng`` (no convergence guarantees are attached to that mode).
    """
    if lr <= 0:
        raise DomainError("learning rate must be positive")
    if epochs < 1:
        raise DomainError("at least one epoch is required")
    w = np.array(start, dtype=float, copy=True)
    for _ in range(epochs):
        batch = None
        if batch_size is not None:
            size = len(task.labels[n])
            batch = (rng or np.random.default_rng()).choice(size, size=min(batch_size, size), replace=False)
        g = task.grad(n, w, batch)
        w = w - lr * g
        if not np.all(np.isfinite(w)):
            raise NonFiniteGradient(f"client {n} diverged (lr={lr})")
    return w


def global_loss(task: Task, w: np.ndarray) -> float:
    return task.global_loss(np.asarray(w, dtype=float))


# -- constants for the bound machinery ---------------------------------------

@dataclass(frozen=True)
class TaskConstants:
    L: float
    mu: float
    sigma: np.ndarray
    sigma_bar_sq: float
    radius: float
    center: np.ndarray

    def to_dict(self):
        return {"L": self.L, "mu": self.mu, "sigma": self.sigma.tolist(), "sigma_bar_sq": self.sigma_bar_sq,
                "domain": {"kind": "ball", "radius": self.radius, "center": self.center.tolist()}}


def max_norm_affine_on_ball(D: np.ndarray, g: np.ndarray, radius: float) -> float:
    """``max ||g + D u||`` over ``||u|| <= radius`` for symmetric ``D``.

    A 1-D ``D`` is taken as a diagonal.

    A trust-region problem: with ``D = Q diag(d) Q'`` and ``gamma = Q'g`` the
    maximiser is ``u_i = d_i gamma_i / (lam - d_i^2)`` for the ``lam >= max d^2``
    that puts ``u`` on the sphere.
    """
    if D.ndim == 1:
        d, gam = D.astype(float), np.asarray(g, dtype=float)
    else:
        d, Q = np.linalg.eigh(D)
        gam = Q.T @ g
    s = d ** 2
    if radius == 0 or s.max() == 0:
        return float(np.linalg.norm(g))
    smax = s.max()
    c = d * gam
    top = s >= smax * (1.0 - 1e-12)
    rest = ~top

    def value(u):
        return float(np.sqrt(np.sum((gam + d * u) ** 2)))

    def unorm(lam):
        return float(np.sqrt(np.sum((c / (lam - s)) ** 2)))

    if np.all(np.abs(c[top]) <= 1e-14 * (1.0 + np.abs(c).max())):
        u = np.zeros_like(d)
        u[rest] = c[rest] / (smax - s[rest])
        spare = radius ** 2 - float(np.sum(u ** 2))
        if spare >= 0:
            # hard case: top eigen-directions absorb the leftover radius
            u[np.flatnonzero(top)[0]] = math.sqrt(spare)
            return value(u)
    step = max(smax, 1e-300) * 1e-12
    lo = smax + step
    while unorm(lo) < radius:
        step *= 1e-3
        lo = smax + step
        if step < 1e-300:
            break
    hi = smax + float(np.linalg.norm(c)) / radius + 1.0
    while unorm(hi) > radius:
        hi = smax + 2.0 * (hi - smax)
    lam = brentq(lambda x: unorm(x) - radius, lo, hi, xtol=1e-300, rtol=1e-15, maxiter=1000)
    return value(c / (lam - s))


def task_constants(task: Task) -> TaskConstants:
    """Smoothness, strong convexity and gradient divergence of a quadratic task.

    ``sigma_n`` is the largest ``||grad F_n(w) - grad F(w)||`` over the ball of
    radius ``10 ||w*|| + 1`` around ``w*``.
    """
    if not isinstance(task, QuadraticTask):
        raise UnsupportedTask(f"bound constants need a quadratic task, got {task.variant}")
    eig = [task.eigenvalues(n) for n in range(task.n_clients)]
    L = float(max(e[-1] for e in eig))
    mu = float(min(e[0] for e in eig))
    w_star = task.optimum()
    radius = 10.0 * float(np.linalg.norm(w_star)) + 1.0
    a_bar = sum(p * a for p, a in zip(task.p, task.A))
    b_bar = sum(p * v for p, v in zip(task.p, task.b))
    sig = []
    for a, v in zip(task.A, task.b):
        D = a - a_bar
        if task.diagonal:
            sig.append(max_norm_affine_on_ball(D, D * w_star - (v - b_bar), radius))
            continue
        g0 = D @ w_star - (v - b_bar)
        sig.append(max_norm_affine_on_ball(0.5 * (D + D.T), g0, radius))
    sig = np.array(sig)
    return TaskConstants(L, mu, sig, float(np.sum(task.p * sig ** 2)), radius, w_star)
