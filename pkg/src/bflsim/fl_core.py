"""Datasets, small classifier models, losses and mini-batch SGD.

All models store their parameters as one flat float64 vector so that
aggregation, consensus and the global update can treat every model alike.
"""

from __future__ import annotations

import math
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from bflsim.rng import stream

__all__ = [
    "DataPoint",
    "Dataset",
    "DivergenceError",
    "LossModel",
    "SoftmaxRegression",
    "MLPClassifier",
    "QuadraticTest",
    "make_model",
    "TrainerConfig",
    "SGDResult",
    "point_loss",
    "point_grad",
    "local_loss",
    "global_loss",
    "full_grad",
    "global_grad",
    "accuracy",
    "minibatch_indices",
    "sgd_round",
    "cumulative_gradient",
    "make_synthetic_dataset",
    "partition_noniid",
    "train_test_split",
    "load_dataset",
    "save_dataset",
]


class DivergenceError(RuntimeError):
    """Raised when local training produces a non-finite gradient."""


class DataPoint(NamedTuple):
    features: np.ndarray
    label: int


@dataclass(frozen=True)
class Dataset:
    """A set of labelled points stored column-wise.

    ``X`` has shape ``(D, F)`` and ``y`` shape ``(D,)``.
    """

    X: np.ndarray
    y: np.ndarray
    n_classes: int

    def __post_init__(self):
        X = np.ascontiguousarray(self.X, dtype=np.float64)
        y = np.ascontiguousarray(self.y, dtype=np.int64)
        if X.ndim != 2:
            raise ValueError(f"features must be 2-D, got shape {X.shape}")
        if y.shape != (X.shape[0],):
            raise ValueError("label count does not match feature rows")
        if y.size and (y.min() < 0 or y.max() >= self.n_classes):
            raise ValueError(f"labels must lie in [0, {self.n_classes})")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)

    @property
    def size(self) -> int:
        return int(self.X.shape[0])

    @property
    def n_features(self) -> int:
        return int(self.X.shape[1])

    def __len__(self) -> int:
        return self.size

    @property
    def points(self) -> list[DataPoint]:
        return [DataPoint(self.X[i].copy(), int(self.y[i])) for i in range(self.size)]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.X[idx], self.y[idx], self.n_classes)

    @staticmethod
    def empty(n_features: int, n_classes: int) -> "Dataset":
        return Dataset(np.zeros((0, n_features)), np.zeros(0, dtype=np.int64), n_classes)

    @staticmethod
    def concat(parts: Sequence["Dataset"]) -> "Dataset":
        if not parts:
            raise ValueError("nothing to concatenate")
        C = max(p.n_classes for p in parts)
        return Dataset(np.concatenate([p.X for p in parts]),
                       np.concatenate([p.y for p in parts]), C)

    @staticmethod
    def from_points(points: Sequence[DataPoint], n_classes: int) -> "Dataset":
        if not points:
            raise ValueError("use Dataset.empty for an empty dataset")
        X = np.stack([np.asarray(p.features, dtype=float) for p in points])
        y = np.array([int(p.label) for p in points])
        return Dataset(X, y, n_classes)


# ---------------------------------------------------------------------------
# models


class LossModel(ABC):
    """A differentiable per-point loss over a flat parameter vector."""

    kind: str = ""
    classification: bool = True

    def __init__(self, n_features: int, n_classes: int, hidden: int = 0):
        if n_features < 1:
            raise ValueError("need at least one feature")
        self.F = int(n_features)
        self.C = int(n_classes)
        self.H = int(hidden)

    @property
    @abstractmethod
    def dim(self) -> int:
        """Length of the flat parameter vector."""

    @abstractmethod
    def losses(self, w: np.ndarray, X: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Per-point losses, shape ``(B,)``."""

    @abstractmethod
    def loss_and_grad(self, w, X, y) -> tuple[float, np.ndarray]:
        """Mean loss and mean gradient over the rows of ``X``."""

    @abstractmethod
    def point_grads(self, w, X, y) -> np.ndarray:
        """Per-point gradients, shape ``(B, dim)``."""

    def point_vectors(self, X: np.ndarray, y: np.ndarray) -> np.ndarray:
        """The vector a data point is identified with when measuring distances.

        Classifiers use the features concatenated with a one-hot label; this is
        what data variability and feature variance are computed on.
        """
        onehot = np.zeros((X.shape[0], self.C))
        onehot[np.arange(X.shape[0]), y] = 1.0
        return np.hstack([X, onehot])

    def predict(self, w, X) -> np.ndarray:
        raise NotImplementedError(f"{self.kind} does not predict labels")

    def init_params(self, seed: int = 0, scale: float = 0.0) -> np.ndarray:
        if scale == 0.0:
            return np.zeros(self.dim)
        return scale * stream(seed, 0, 0, "init").standard_normal(self.dim)

    def check(self, w: np.ndarray, X: np.ndarray | None = None) -> None:
        if w.shape != (self.dim,):
            raise ValueError(f"{self.kind}: expected {self.dim} parameters, got {w.shape}")
        if X is not None and X.ndim == 2 and X.shape[1] != self.F:
            raise ValueError(f"{self.kind}: expected {self.F} features, got {X.shape[1]}")

    def __repr__(self) -> str:
        return f"{type(self).__name__}(F={self.F}, C={self.C}, H={self.H})"


def _log_softmax(Z: np.ndarray) -> np.ndarray:
    Z = Z - Z.max(axis=1, keepdims=True)
    return Z - np.log(np.exp(Z).sum(axis=1, keepdims=True))


class SoftmaxRegression(LossModel):
    """Multinomial logistic regression. Layout: ``W`` (C x F) row-major, then ``b``."""

    kind = "softmax-regression"

    @property
    def dim(self) -> int:
        return self.C * (self.F + 1)

    def _unpack(self, w):
        CF = self.C * self.F
        return w[:CF].reshape(self.C, self.F), w[CF:]

    def logits(self, w, X):
        W, b = self._unpack(w)
        return X @ W.T + b

    def losses(self, w, X, y):
        logp = _log_softmax(self.logits(w, X))
        return -logp[np.arange(X.shape[0]), y]

    def _residual(self, w, X, y):
        logp = _log_softmax(self.logits(w, X))
        G = np.exp(logp)
        rows = np.arange(X.shape[0])
        G[rows, y] -= 1.0
        return logp, G

    def loss_and_grad(self, w, X, y):
        B = X.shape[0]
        logp, G = self._residual(w, X, y)
        loss = -logp[np.arange(B), y].mean()
        g = np.empty(self.dim)
        g[: self.C * self.F] = (G.T @ X).ravel() / B
        g[self.C * self.F:] = G.mean(axis=0)
        return float(loss), g

    def point_grads(self, w, X, y):
        _, G = self._residual(w, X, y)
        outer = G[:, :, None] * X[:, None, :]
        return np.hstack([outer.reshape(X.shape[0], -1), G])

    def predict(self, w, X):
        return np.argmax(self.logits(w, X), axis=1)


class MLPClassifier(LossModel):
    """One tanh hidden layer. Layout: ``W1`` (H x F), ``b1``, ``W2`` (C x H), ``b2``."""

    kind = "one-hidden-layer-mlp"

    def __init__(self, n_features, n_classes, hidden=8):
        if hidden < 1:
            raise ValueError("the MLP needs a hidden layer")
        super().__init__(n_features, n_classes, hidden)

    @property
    def dim(self) -> int:
        return self.H * (self.F + 1) + self.C * (self.H + 1)

    def _unpack(self, w):
        F, H, C = self.F, self.H, self.C
        i = 0
        W1 = w[i:i + H * F].reshape(H, F); i += H * F
        b1 = w[i:i + H]; i += H
        W2 = w[i:i + C * H].reshape(C, H); i += C * H
        return W1, b1, W2, w[i:i + C]

    def init_params(self, seed=0, scale=0.1):
        # zero init would leave the hidden units symmetric forever
        return super().init_params(seed, scale if scale else 0.1)

    def _forward(self, w, X):
        W1, b1, W2, b2 = self._unpack(w)
        Hh = np.tanh(X @ W1.T + b1)
        return Hh, Hh @ W2.T + b2

    def losses(self, w, X, y):
        _, Z = self._forward(w, X)
        return -_log_softmax(Z)[np.arange(X.shape[0]), y]

    def _backward_terms(self, w, X, y):
        W1, b1, W2, b2 = self._unpack(w)
        Hh, Z = self._forward(w, X)
        logp = _log_softmax(Z)
        G = np.exp(logp)
        G[np.arange(X.shape[0]), y] -= 1.0
        dA = (G @ W2) * (1.0 - Hh * Hh)
        return logp, Hh, G, dA

    def loss_and_grad(self, w, X, y):
        B = X.shape[0]
        logp, Hh, G, dA = self._backward_terms(w, X, y)
        loss = -logp[np.arange(B), y].mean()
        g = np.concatenate([(dA.T @ X).ravel(), dA.sum(0), (G.T @ Hh).ravel(), G.sum(0)])
        return float(loss), g / B

    def point_grads(self, w, X, y):
        B = X.shape[0]
        _, Hh, G, dA = self._backward_terms(w, X, y)
        return np.hstack([(dA[:, :, None] * X[:, None, :]).reshape(B, -1), dA,
                          (G[:, :, None] * Hh[:, None, :]).reshape(B, -1), G])

    def predict(self, w, X):
        return np.argmax(self._forward(w, X)[1], axis=1)


class QuadraticTest(LossModel):
    """Analytic fixture: per-point loss ½‖w − x‖², labels ignored."""

    kind = "quadratic-test"
    classification = False

    @property
    def dim(self) -> int:
        return self.F

    def losses(self, w, X, y):
        R = w[None, :] - X
        return 0.5 * np.einsum("ij,ij->i", R, R)

    def loss_and_grad(self, w, X, y):
        R = w[None, :] - X
        return float(0.5 * np.einsum("ij,ij->i", R, R).mean()), R.mean(axis=0)

    def point_grads(self, w, X, y):
        return w[None, :] - X

    def point_vectors(self, X, y):
        return np.asarray(X, dtype=float)


_KINDS = {cls.kind: cls for cls in (SoftmaxRegression, MLPClassifier, QuadraticTest)}


def make_model(kind: str, n_features: int, n_classes: int = 2, hidden: int = 8) -> LossModel:
    """Build a model by its kind name (``softmax-regression`` etc.)."""
    try:
        cls = _KINDS[kind]
    except KeyError:
        raise ValueError(f"unknown model kind {kind!r}; choose from {sorted(_KINDS)}") from None
    if cls is MLPClassifier:
        return cls(n_features, n_classes, hidden)
    return cls(n_features, n_classes)


# ---------------------------------------------------------------------------
# losses


def point_loss(model: LossModel, w: np.ndarray, p: DataPoint) -> float:
    x = np.asarray(p.features, dtype=float)
    if x.shape != (model.F,):
        raise ValueError(f"point has {x.shape} features, model expects {model.F}")
    model.check(w)
    return float(model.losses(w, x[None, :], np.array([int(p.label)]))[0])


def point_grad(model: LossModel, w: np.ndarray, p: DataPoint) -> np.ndarray:
    x = np.asarray(p.features, dtype=float)[None, :]
    model.check(w, x)
    return model.point_grads(w, x, np.array([int(p.label)]))[0]


def local_loss(model: LossModel, w: np.ndarray, ds: Dataset) -> float:
    """Mean point loss over ``ds``."""
    if ds.size == 0:
        raise ValueError("local loss of an empty dataset (check the offload split)")
    model.check(w, ds.X)
    return float(model.losses(w, ds.X, ds.y).mean())


def full_grad(model: LossModel, w: np.ndarray, ds: Dataset) -> np.ndarray:
    if ds.size == 0:
        raise ValueError("gradient of an empty dataset")
    model.check(w, ds.X)
    return model.loss_and_grad(w, ds.X, ds.y)[1]


def _weights(datasets: Sequence[Dataset]) -> np.ndarray:
    sizes = np.array([d.size for d in datasets], dtype=float)
    total = sizes.sum()
    if total <= 0:
        raise ValueError("all datasets are empty")
    return sizes / total


def global_loss(model: LossModel, w: np.ndarray, datasets: Sequence[Dataset]) -> float:
    """Size-weighted mean of local losses; empty datasets carry zero weight."""
    wts = _weights(datasets)
    return float(sum(a * local_loss(model, w, d) for a, d in zip(wts, datasets) if d.size))


def global_grad(model: LossModel, w: np.ndarray, datasets: Sequence[Dataset]) -> np.ndarray:
    wts = _weights(datasets)
    g = np.zeros(model.dim)
    for a, d in zip(wts, datasets):
        if d.size:
            g += a * full_grad(model, w, d)
    return g


def accuracy(model: LossModel, w: np.ndarray, ds: Dataset) -> float:
    """Top-1 accuracy; NaN for the regression fixture or an empty set."""
    if not model.classification or ds.size == 0:
        return float("nan")
    return float(np.mean(model.predict(w, ds.X) == ds.y))


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainerConfig:
    epochs: int = 1
    batch_ratio: float = 1.0
    step_size: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if int(self.epochs) < 1:
            raise ValueError("epochs must be a positive integer")
        if not 0.0 < self.batch_ratio <= 1.0:
            raise ValueError("batch_ratio must lie in (0, 1]")
        if self.step_size < 0 or not math.isfinite(self.step_size):
            raise ValueError("step_size must be finite and non-negative")

    def batch_size(self, D: int) -> int:
        return batch_size(self.batch_ratio, D)


def batch_size(ratio: float, D: int) -> int:
    # Python's round() is banker's rounding; use half-up for a stable rule.
    return max(1, min(int(D), int(math.floor(ratio * D + 0.5))))


@dataclass
class SGDResult:
    w: np.ndarray
    trace: list[float] = field(default_factory=list)


def minibatch_indices(D: int, B: int, seed: int, entity: int = 0, round_: int = 0,
                      epoch: int = 0) -> np.ndarray | None:
    """Indices of one mini-batch drawn without replacement, or ``None`` for the full batch."""
    if B >= D:
        return None
    return stream(seed, entity, round_, "minibatch", epoch).choice(D, size=B, replace=False)


def sgd_round(model: LossModel, w0: np.ndarray, ds: Dataset, cfg: TrainerConfig,
              round_: int = 0, entity: int = 0, epoch_offset: int = 0) -> SGDResult:
    """Run ``cfg.epochs`` mini-batch SGD iterations from ``w0``.

    Iteration ``j`` samples its batch without replacement from the stream
    ``(cfg.seed, entity, round_, "minibatch", epoch_offset + j)``; chaining two
    one-epoch calls with ``epoch_offset`` 0 and 1 reproduces a two-epoch call.
    The trace holds the mini-batch loss evaluated before each step.
    """
    if ds.size == 0:
        raise ValueError("cannot train on an empty dataset")
    model.check(w0, ds.X)
    w = np.array(w0, dtype=float, copy=True)
    D = ds.size
    B = cfg.batch_size(D)
    trace = []
    for j in range(int(cfg.epochs)):
        idx = minibatch_indices(D, B, cfg.seed, entity, round_, epoch_offset + j)
        Xb, yb = (ds.X, ds.y) if idx is None else (ds.X[idx], ds.y[idx])
        loss, g = model.loss_and_grad(w, Xb, yb)
        if not np.all(np.isfinite(g)):
            raise DivergenceError(
                f"non-finite gradient at epoch {epoch_offset + j} of entity {entity}; "
                "reduce the step size")
        w -= cfg.step_size * g
        trace.append(loss)
    return SGDResult(w, trace)


def cumulative_gradient(w_start: np.ndarray, w_end: np.ndarray, eta: float) -> np.ndarray:
    """Net displacement of local training expressed as a gradient, (w_start − w_end)/η."""
    if eta == 0:
        raise ValueError("cumulative gradient is undefined for a zero step size")
    return (np.asarray(w_start, dtype=float) - np.asarray(w_end, dtype=float)) / eta


# ---------------------------------------------------------------------------
# data


def _lattice_means(F: int, C: int, spacing: float = 2.0) -> np.ndarray:
    side = 2
    while side ** F < C:
        side += 1
    means = np.zeros((C, F))
    for c in range(C):
        r = c
        for k in range(F):
            r, digit = divmod(r, side)
            means[c, k] = spacing * (digit - (side - 1) / 2.0)
    return means


def make_synthetic_dataset(F: int, C: int, per_class: int, cluster_spread: float,
                           seed: int) -> Dataset:
    """Gaussian clusters around lattice points, spacing 2, in shuffled order."""
    if F < 1 or C < 2:
        raise ValueError("need F >= 1 and C >= 2")
    if per_class < 0 or cluster_spread < 0:
        raise ValueError("per_class and cluster_spread must be non-negative")
    if per_class == 0:
        return Dataset.empty(F, C)
    rng = stream(seed, 0, 0, "synthetic-data")
    means = _lattice_means(F, C)
    y = np.repeat(np.arange(C), per_class)
    X = means[y] + cluster_spread * rng.standard_normal((y.size, F))
    order = rng.permutation(y.size)
    return Dataset(X[order], y[order], C)


def train_test_split(ds: Dataset, test_fraction: float = 0.2,
                     seed: int = 0) -> tuple[Dataset, Dataset]:
    """Hold out a fixed fraction, stratified by label."""
    rng = stream(seed, 0, 0, "test-split")
    test = []
    for c in range(ds.n_classes):
        idx = np.flatnonzero(ds.y == c)
        if idx.size == 0:
            continue
        idx = rng.permutation(idx)
        test.extend(idx[: int(round(test_fraction * idx.size))].tolist())
    mask = np.zeros(ds.size, dtype=bool)
    mask[test] = True
    return ds.subset(np.flatnonzero(~mask)), ds.subset(np.flatnonzero(mask))


def partition_noniid(ds: Dataset, N: int, labels_per_node: int, seed: int) -> list[Dataset]:
    """Split ``ds`` into ``N`` disjoint shards, node n holding labels
    ``{(n·L + j) mod C : j < L}``. Points of a label are dealt out evenly
    among the nodes that hold it."""
    C = ds.n_classes
    L = int(labels_per_node)
    if N < 1:
        raise ValueError("need at least one node")
    if not 1 <= L <= C:
        raise ValueError(f"labels_per_node must lie in [1, {C}]")
    holders: dict[int, list[int]] = {c: [] for c in range(C)}
    for n in range(N):
        for j in range(L):
            holders[(n * L + j) % C].append(n)
    rng = stream(seed, 0, 0, "partition")
    shards: list[list[int]] = [[] for _ in range(N)]
    for c in range(C):
        nodes = holders[c]
        if not nodes:
            continue
        idx = rng.permutation(np.flatnonzero(ds.y == c))
        for k, part in enumerate(np.array_split(idx, len(nodes))):
            shards[nodes[k]].extend(part.tolist())
    empty = [n for n in range(N) if not shards[n]]
    if empty:
        raise ValueError(
            f"infeasible split: nodes {empty} receive no points "
            f"(N={N}, labels_per_node={L}, D={ds.size})")
    return [ds.subset(np.sort(s)) for s in shards]


def load_dataset(path: str | Path, n_classes: int | None = None) -> Dataset:
    """Read ``f1,f2,...,fF,label`` lines; blank lines and ``#`` comments are skipped."""
    rows = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split(",")
        if len(parts) < 2:
            raise ValueError(f"{path}:{lineno}: need at least one feature and a label")
        rows.append(([float(v) for v in parts[:-1]], int(parts[-1])))
    if not rows:
        raise ValueError(f"{path}: no records")
    F = len(rows[0][0])
    if any(len(r[0]) != F for r in rows):
        raise ValueError(f"{path}: inconsistent feature count")
    X = np.array([r[0] for r in rows])
    y = np.array([r[1] for r in rows])
    return Dataset(X, y, n_classes if n_classes is not None else int(y.max()) + 1)


def save_dataset(ds: Dataset, path: str | Path) -> None:
    with open(path, "w") as fh:
        for x, label in zip(ds.X, ds.y):
            fh.write(",".join(repr(float(v)) for v in x) + f",{int(label)}\n")
