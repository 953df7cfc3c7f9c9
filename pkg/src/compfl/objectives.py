"""Smooth client losses, the composite objective and centralized PGD tools."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import expit, log_softmax, softmax

from .errors import ConvergenceError, InvalidArgumentError, StepSizeError
from .prox import Regularizer, prox

__all__ = [
    "LogisticProblem",
    "MlpProblem",
    "CompositeObjective",
    "gradient_mapping",
    "pgd_step",
    "pgd_solve",
    "estimate_smoothness",
    "fstar_estimate",
]


class _FederatedLoss:
    """Shared plumbing: ``f(x) = (1/n) sum_i f_i(x)`` over client shards."""

    features: list
    labels: list

    @property
    def n(self) -> int:
        return len(self.features)

    @property
    def sizes(self) -> list[int]:
        return [len(y) for y in self.labels]

    def _check_x(self, x):
        x = np.asarray(x, dtype=float)
        if x.shape != (self.d,):
            raise InvalidArgumentError(f"expected parameter vector of shape ({self.d},), got {x.shape}")
        return x

    def _check_batch(self, i, batch):
        batch = np.asarray(batch, dtype=np.intp)
        if batch.ndim != 1 or batch.size == 0:
            raise InvalidArgumentError("mini-batch must be a non-empty 1-D index array")
        m = self.sizes[i]
        if batch.min() < 0 or batch.max() >= m:
            raise InvalidArgumentError(f"batch index out of range for client {i} with {m} samples")
        return batch

    def loss_value(self, i: int, x) -> float:
        x = self._check_x(x)
        return self._value(self.features[i], self.labels[i], x)

    def loss_grad(self, i: int, x) -> np.ndarray:
        x = self._check_x(x)
        return self._grad(self.features[i], self.labels[i], x)

    def minibatch_grad(self, i: int, x, batch) -> np.ndarray:
        """Average gradient over the samples ``batch`` of client ``i``."""
        x = self._check_x(x)
        batch = self._check_batch(i, batch)
        return self._grad(self.features[i][batch], self.labels[i][batch], x)

    def grad_at(self, i: int, x, batch=None) -> np.ndarray:
        """Full gradient when ``batch`` is None, mini-batch gradient otherwise."""
        if batch is None:
            return self.loss_grad(i, x)
        return self.minibatch_grad(i, x, batch)

    def value(self, x) -> float:
        x = self._check_x(x)
        return float(np.mean([self._value(A, y, x) for A, y in zip(self.features, self.labels)]))

    def grad(self, x) -> np.ndarray:
        return self.client_grads(x).mean(axis=0)

    def client_grads(self, x) -> np.ndarray:
        """Full local gradients of every client at one point, shape ``(n, d)``."""
        x = self._check_x(x)
        return np.stack([self._grad(A, y, x) for A, y in zip(self.features, self.labels)])


@dataclass(eq=False)
class LogisticProblem(_FederatedLoss):
    """Per-client logistic regression with labels in {-1, +1}.

    Client ``i`` owns a feature matrix ``A_i`` of shape ``(m_i, d)`` and labels
    ``b_i``; its loss is the sample average of ``log(1 + exp(-b a^T x))``.
    """

    features: list
    labels: list

    def __post_init__(self):
        if len(self.features) == 0 or len(self.features) != len(self.labels):
            raise InvalidArgumentError("need one label vector per client and at least one client")
        self.features = [np.ascontiguousarray(A, dtype=float) for A in self.features]
        self.labels = [np.asarray(b, dtype=float).ravel() for b in self.labels]
        d = self.features[0].shape[1]
        for i, (A, b) in enumerate(zip(self.features, self.labels)):
            if A.ndim != 2 or A.shape[1] != d:
                raise InvalidArgumentError(f"client {i}: features must be (m_i, {d})")
            if A.shape[0] < 1 or A.shape[0] != b.size:
                raise InvalidArgumentError(f"client {i}: need m_i >= 1 rows matching labels")
            if not np.all(np.abs(b) == 1.0):
                raise InvalidArgumentError(f"client {i}: labels must be -1 or +1")
        self.d = d

    @classmethod
    def from_dataset(cls, dataset) -> "LogisticProblem":
        return cls(list(dataset.features), list(dataset.labels))

    @staticmethod
    def _value(A, b, x):
        return float(np.mean(np.logaddexp(0.0, -b * (A @ x))))

    @staticmethod
    def _grad(A, b, x):
        weights = b * expit(-b * (A @ x))
        return -(A.T @ weights) / b.size

    def sample_grads(self, i: int, x) -> np.ndarray:
        """Per-sample gradients of client ``i``, shape ``(m_i, d)``."""
        x = self._check_x(x)
        A, b = self.features[i], self.labels[i]
        return -(b * expit(-b * (A @ x)))[:, None] * A

    def gram_smoothness(self, i: int) -> np.ndarray:
        A = self.features[i]
        return A.T @ A / (4.0 * A.shape[0])


@dataclass(eq=False)
class MlpProblem(_FederatedLoss):
    """One-hidden-layer tanh network with softmax cross-entropy.

    Parameters are flattened into a single vector laid out as
    ``[W1 (hidden x d_in), b1, W2 (classes x hidden), b2]``.
    ``smoothness`` is a user-supplied stand-in for the Lipschitz constant of
    the gradient, which has no cheap closed form here.
    """

    features: list
    labels: list
    d_in: int = 20
    hidden: int = 16
    classes: int = 4
    smoothness: Optional[float] = None

    def __post_init__(self):
        if len(self.features) == 0 or len(self.features) != len(self.labels):
            raise InvalidArgumentError("need one label vector per client and at least one client")
        self.features = [np.ascontiguousarray(X, dtype=float) for X in self.features]
        self.labels = [np.asarray(y).astype(np.intp).ravel() for y in self.labels]
        for i, (X, y) in enumerate(zip(self.features, self.labels)):
            if X.ndim != 2 or X.shape[1] != self.d_in or X.shape[0] != y.size or y.size < 1:
                raise InvalidArgumentError(f"client {i}: features must be (m_i >= 1, {self.d_in})")
            if y.min() < 0 or y.max() >= self.classes:
                raise InvalidArgumentError(f"client {i}: labels must lie in [0, {self.classes})")
        h, c, k = self.hidden, self.classes, self.d_in
        self._shapes = [(h, k), (h,), (c, h), (c,)]
        self.d = h * k + h + c * h + c

    @classmethod
    def from_dataset(cls, dataset, hidden=16, smoothness=None) -> "MlpProblem":
        d_in = dataset.features[0].shape[1]
        classes = int(max(int(np.max(y)) for y in dataset.labels) + 1)
        classes = max(classes, int(dataset.provenance.get("classes", classes)))
        return cls(list(dataset.features), list(dataset.labels), d_in, hidden, classes, smoothness)

    def unpack(self, x):
        parts, start = [], 0
        for shape in self._shapes:
            size = int(np.prod(shape))
            parts.append(x[start:start + size].reshape(shape))
            start += size
        return parts

    def init_params(self, seed: int = 0, scale: float = 0.1) -> np.ndarray:
        rng = np.random.default_rng(seed)
        return scale * rng.standard_normal(self.d)

    def _value(self, X, y, x):
        W1, b1, W2, b2 = self.unpack(x)
        logits = np.tanh(X @ W1.T + b1) @ W2.T + b2
        return float(-np.mean(log_softmax(logits, axis=1)[np.arange(y.size), y]))

    def _grad(self, X, y, x):
        W1, b1, W2, b2 = self.unpack(x)
        H = np.tanh(X @ W1.T + b1)
        P = softmax(H @ W2.T + b2, axis=1)
        P[np.arange(y.size), y] -= 1.0
        P /= y.size
        gW2 = P.T @ H
        gb2 = P.sum(axis=0)
        dH = (P @ W2) * (1.0 - H * H)
        gW1 = dH.T @ X
        gb1 = dH.sum(axis=0)
        return np.concatenate([gW1.ravel(), gb1, gW2.ravel(), gb2])

    def accuracy(self, x, X=None, y=None) -> float:
        if X is None:
            X = np.concatenate(self.features)
            y = np.concatenate(self.labels)
        W1, b1, W2, b2 = self.unpack(np.asarray(x, dtype=float))
        pred = np.argmax(np.tanh(X @ W1.T + b1) @ W2.T + b2, axis=1)
        return float(np.mean(pred == y))


@dataclass(eq=False)
class CompositeObjective:
    """``F(x) = f(x) + g(x)`` with ``f`` the client-averaged smooth loss."""

    problem: object
    reg: Regularizer = field(default_factory=Regularizer.zero)

    @property
    def d(self) -> int:
        return self.problem.d

    def value(self, x) -> float:
        return self.problem.value(x) + self.reg.value(x)

    def smooth_grad(self, x) -> np.ndarray:
        return self.problem.grad(x)


def _check_step(step):
    if not np.isfinite(step) or step <= 0:
        raise InvalidArgumentError(f"step must be positive and finite, got {step}")


def pgd_step(obj: CompositeObjective, x, step: float) -> np.ndarray:
    """One proximal gradient step ``prox(step, x - step * grad f(x))``."""
    _check_step(step)
    x = np.asarray(x, dtype=float)
    return prox(obj.reg, step, x - step * obj.smooth_grad(x))


def gradient_mapping(obj: CompositeObjective, x, step: float) -> np.ndarray:
    """Stationarity measure ``(x - pgd_step(x)) / step``.

    Vanishes exactly at first-order stationary points of ``f + g`` and equals
    ``grad f(x)`` when ``g`` is zero.
    """
    x = np.asarray(x, dtype=float)
    return (x - pgd_step(obj, x, step)) / step


def pgd_solve(obj: CompositeObjective, step: float, iterations: int, x0=None,
              patience: int = 10):
    """Run centralized PGD and return ``(x, trace)`` with ``trace[k] = F(x_k)``.

    Raises :class:`StepSizeError` once ``F`` has increased on ``patience``
    consecutive steps.
    """
    _check_step(step)
    if iterations < 0:
        raise InvalidArgumentError("iterations must be >= 0")
    x = np.zeros(obj.d) if x0 is None else np.array(x0, dtype=float)
    trace = np.empty(iterations + 1)
    trace[0] = obj.value(x)
    rising = 0
    for k in range(1, iterations + 1):
        x = pgd_step(obj, x, step)
        trace[k] = obj.value(x)
        rising = rising + 1 if trace[k] > trace[k - 1] else 0
        if rising >= patience or not np.isfinite(trace[k]):
            raise StepSizeError(
                f"PGD objective increased for {rising} consecutive steps at iteration {k}; "
                f"step {step:g} is too large"
            )
    return x, trace


def fstar_estimate(obj: CompositeObjective, step: float, iterations: int) -> float:
    """Estimate the optimal value ``F*`` by running PGD from the origin."""
    return float(pgd_solve(obj, step, iterations)[1][-1])


def _top_eigenvalue(M, tol, max_iter, rng):
    v = rng.standard_normal(M.shape[0])
    v /= np.linalg.norm(v)
    lam = float(v @ M @ v)
    for _ in range(max_iter):
        w = M @ v
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return 0.0
        v = w / norm
        new = float(v @ M @ v)
        if abs(new - lam) <= tol * abs(new):
            return new
        lam = new
    raise ConvergenceError(f"power iteration did not reach relative tolerance {tol} in {max_iter} iterations")


def estimate_smoothness(problem, tol: float = 1e-6, max_iter: int = 10_000, seed: int = 0) -> float:
    """Smoothness constant ``L`` shared by all client losses.

    For logistic losses this is ``max_i lambda_max(A_i^T A_i) / (4 m_i)``,
    found by power iteration. For other problems the configured
    ``smoothness`` override is returned.
    """
    if isinstance(problem, LogisticProblem):
        rng = np.random.default_rng(seed)
        # Rayleigh-quotient change is squared relative to the vector error.
        return max(_top_eigenvalue(problem.gram_smoothness(i), tol * 1e-2, max_iter, rng)
                   for i in range(problem.n))
    override = getattr(problem, "smoothness", None)
    if override is None:
        raise InvalidArgumentError(f"{type(problem).__name__} needs an explicit smoothness override")
    return float(override)
