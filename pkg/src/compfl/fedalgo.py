"""Federated optimizers for composite problems.

The proposed method keeps a pre-proximal global model on the server and a
client-drift correction on every client; clients only upload their final
pre-proximal local model. It is implemented twice: per client, the way a
deployment would run it, and in a stacked compact form that is used as a
reference implementation. FedMid, FedDA and Fast-FedDA are provided as
baselines, together with plain centralized PGD.

All optimizers share one interface (:class:`FederatedOptimizer`): call
:meth:`~FederatedOptimizer.run_round` once per round and read the current
global model from :attr:`~FederatedOptimizer.model`.
"""

from __future__ import annotations

import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .datagen import BatchSampler
from .errors import DivergenceError, InvalidArgumentError, ScheduleError
from .objectives import CompositeObjective, pgd_step
from .prox import Regularizer, prox

__all__ = [
    "HyperParams",
    "StepRuleWarning",
    "ClientState",
    "ServerState",
    "LocalTrace",
    "RoundTrace",
    "CompactState",
    "proposed_local_round",
    "server_update",
    "correction_update",
    "compact_round",
    "FederatedOptimizer",
    "ProposedOptimizer",
    "FedMidOptimizer",
    "FedDAOptimizer",
    "FastFedDAOptimizer",
    "PGDOptimizer",
    "ALGORITHMS",
    "make_optimizer",
]


class StepRuleWarning(UserWarning):
    """Step sizes fall outside the range covered by the convergence analysis."""


@dataclass(frozen=True)
class HyperParams:
    """Step sizes and schedule of a federated run.

    ``batch_size=None`` means every local step uses the full local gradient.
    """

    eta: float
    eta_g: float
    tau: int
    rounds: int
    batch_size: Optional[int] = None
    seed: int = 42

    def __post_init__(self):
        for name in ("eta", "eta_g"):
            v = getattr(self, name)
            if not np.isfinite(v) or v <= 0:
                raise InvalidArgumentError(f"{name} must be positive and finite, got {v}")
        if int(self.tau) != self.tau or self.tau < 1:
            raise InvalidArgumentError(f"tau must be an integer >= 1, got {self.tau}")
        if int(self.rounds) != self.rounds or self.rounds < 0:
            raise InvalidArgumentError(f"rounds must be an integer >= 0, got {self.rounds}")
        if self.batch_size is not None and (int(self.batch_size) != self.batch_size or self.batch_size < 1):
            raise InvalidArgumentError(f"batch_size must be None or an integer >= 1, got {self.batch_size}")

    @property
    def eta_tilde(self) -> float:
        """Effective global step ``eta * eta_g * tau``."""
        return self.eta * self.eta_g * self.tau

    def step_rule_violations(self, L: float, n: int) -> list[str]:
        """Reasons the analysed step rule fails, empty when it holds.

        The rule is ``eta_tilde <= 1/(10 L)`` and
        ``eta_g >= max(1.5, sqrt(n/8))``.
        """
        out = []
        if self.eta_tilde > 1.0 / (10.0 * L):
            out.append(f"eta_tilde={self.eta_tilde:g} exceeds 1/(10L)={1.0 / (10.0 * L):g}")
        floor = max(1.5, float(np.sqrt(n / 8.0)))
        if self.eta_g < floor:
            out.append(f"eta_g={self.eta_g:g} is below max(1.5, sqrt(n/8))={floor:g}")
        return out

    def satisfies_step_rule(self, L: float, n: int) -> bool:
        return not self.step_rule_violations(L, n)

    def check_step_rule(self, L: float, n: int) -> bool:
        """Warn (never raise) when the step rule is violated."""
        problems = self.step_rule_violations(L, n)
        for msg in problems:
            warnings.warn(msg, StepRuleWarning, stacklevel=2)
        return not problems


@dataclass
class LocalTrace:
    """Everything one client did in one round, for metrics and audits."""

    Z: np.ndarray  # (tau+1, d) post-proximal iterates z_0..z_tau
    Zhat: np.ndarray  # (tau+1, d) pre-proximal iterates
    grads: np.ndarray  # (tau, d) stochastic gradients at z_0..z_{tau-1}
    batches: list  # tau entries, index arrays or None for full gradients


@dataclass
class ClientState:
    index: int
    zhat: np.ndarray
    z: np.ndarray
    c: np.ndarray
    grad_avg: np.ndarray
    trace: Optional[LocalTrace] = None

    @classmethod
    def fresh(cls, index: int, d: int) -> "ClientState":
        zero = np.zeros(d)
        return cls(index, zero.copy(), zero.copy(), zero.copy(), zero.copy())


@dataclass
class ServerState:
    """Pre-proximal global model ``x_bar`` and its cached prox ``p_x``."""

    x_bar: np.ndarray
    p_x: np.ndarray

    @classmethod
    def from_x_bar(cls, x_bar, reg: Regularizer, eta_tilde: float) -> "ServerState":
        x_bar = np.array(x_bar, dtype=float)
        return cls(x_bar, prox(reg, eta_tilde, x_bar))


@dataclass
class RoundTrace:
    """Stacked record of one round over all clients."""

    anchor: np.ndarray  # model broadcast at round start
    Z: np.ndarray  # (n, tau+1, d)
    grads: np.ndarray  # (n, tau, d)
    batches: list  # n lists of tau entries
    Zhat: Optional[np.ndarray] = None
    extra: dict = field(default_factory=dict)

    @property
    def drift(self) -> float:
        """Sum over clients and steps ``t < tau`` of ``||z_{i,t} - anchor||^2``."""
        diff = self.Z[:, :-1, :] - self.anchor
        return float(np.sum(diff * diff))


def _batch(sampler, hp: HyperParams, i: int, r: int, t: int, m: int):
    if hp.batch_size is None:
        return None
    return sampler.next_batch(i, r, t, hp.batch_size, m)


def _check_finite(v, algorithm, i, r, t):
    if not np.all(np.isfinite(v)):
        raise DivergenceError(i, r, t, algorithm)


def _prox_or_identity(reg: Regularizer, theta: float, w):
    # A zero threshold is the limit of the prox: projection for a box, identity otherwise.
    if theta > 0:
        return prox(reg, theta, w)
    if reg.kind == "box":
        return np.clip(w, reg.lo, reg.hi)
    return np.array(w, dtype=float)


def proposed_local_round(client: ClientState, p_x, hp: HyperParams, obj: CompositeObjective,
                         sampler: Optional[BatchSampler], r: int):
    """Run the ``tau`` local steps of one client.

    Starting from ``zhat_0 = z_0 = p_x`` each step does
    ``zhat <- zhat - eta * (grad f_i(z; B) + c)`` followed by
    ``z <- prox((t+1) eta, zhat)``. The client state is updated in place and
    ``(zhat_tau, grad_avg)`` is returned.
    """
    problem, reg = obj.problem, obj.reg
    i, tau, eta = client.index, hp.tau, hp.eta
    m = problem.sizes[i]
    d = p_x.shape[0]
    Z = np.empty((tau + 1, d))
    Zhat = np.empty((tau + 1, d))
    grads = np.empty((tau, d))
    batches = []
    zhat = np.array(p_x, dtype=float)
    z = zhat.copy()
    Z[0], Zhat[0] = z, zhat
    for t in range(tau):
        batch = _batch(sampler, hp, i, r, t, m)
        g = problem.grad_at(i, z, batch)
        zhat = zhat - eta * (g + client.c)
        _check_finite(zhat, "proposed", i, r, t)
        z = prox(reg, (t + 1) * eta, zhat)
        grads[t], Z[t + 1], Zhat[t + 1] = g, z, zhat
        batches.append(batch)
    client.zhat, client.z = zhat, z
    client.grad_avg = grads.sum(axis=0) / tau
    client.trace = LocalTrace(Z, Zhat, grads, batches)
    return zhat, client.grad_avg


def server_update(server: ServerState, avg_zhat, hp: HyperParams, reg: Regularizer) -> ServerState:
    """``x_bar <- p_x + eta_g (avg_zhat - p_x)`` and refresh the cached prox."""
    x_bar = server.p_x + hp.eta_g * (np.asarray(avg_zhat, dtype=float) - server.p_x)
    return ServerState(x_bar, prox(reg, hp.eta_tilde, x_bar))


def correction_update(client: ClientState, p_x_prev, x_bar_new, hp: HyperParams) -> np.ndarray:
    """New drift correction ``(p_x_prev - x_bar_new)/(eta_g eta tau) - grad_avg``.

    The first term is the average over all clients of their round-averaged
    gradients (plus the old corrections, which average to zero), so the
    correction swaps the client's own contribution for the global one.
    """
    scale = hp.eta_g * hp.eta * hp.tau
    client.c = (np.asarray(p_x_prev) - np.asarray(x_bar_new)) / scale - client.grad_avg
    return client.c


@dataclass
class CompactState:
    """Stacked state of the compact form: ``x_bar`` and last round's gradient sums.

    ``grad_sums[i]`` is ``sum_t grad f_i(z_{i,t}; B_{i,t})`` from the previous
    round, zero before the first round.
    """

    x_bar: np.ndarray
    grad_sums: np.ndarray

    @classmethod
    def initial(cls, x_bar, n: int) -> "CompactState":
        x_bar = np.array(x_bar, dtype=float)
        return cls(x_bar, np.zeros((n, x_bar.shape[0])))


def compact_round(state: CompactState, hp: HyperParams, obj: CompositeObjective, schedule):
    """One round of the proposed method in stacked form.

    ``schedule[i][t]`` is the batch used by client ``i`` at local step ``t``
    (``None`` for the full gradient); it must come from the same sampler
    streams as the per-client run being compared against.

    Returns ``(new_state, Z, Zhat)`` with ``Z`` and ``Zhat`` of shape
    ``(n, tau+1, d)``.
    """
    problem, reg = obj.problem, obj.reg
    n, tau, eta = problem.n, hp.tau, hp.eta
    if len(schedule) != n or any(len(s) != tau for s in schedule):
        raise ScheduleError(f"schedule must hold {n} client lists of {tau} batches each")
    d = state.x_bar.shape[0]
    p = prox(reg, hp.eta_tilde, state.x_bar)
    prev = state.grad_sums
    correction = (prev.mean(axis=0) - prev) / tau
    Z = np.empty((n, tau + 1, d))
    Zhat = np.empty((n, tau + 1, d))
    Zhat[:, 0] = p
    Z[:, 0] = p
    sums = np.zeros((n, d))
    for t in range(tau):
        G = np.stack([problem.grad_at(i, Z[i, t], schedule[i][t]) for i in range(n)])
        Zhat[:, t + 1] = Zhat[:, t] - eta * (G + correction)
        Z[:, t + 1] = prox(reg, (t + 1) * eta, Zhat[:, t + 1])
        sums += G
    x_bar = p - hp.eta_g * eta * sums.mean(axis=0)
    return CompactState(x_bar, sums), Z, Zhat


class FederatedOptimizer:
    """Common driver interface.

    Subclasses set :attr:`name`, expose the global model as :attr:`model` and
    implement :meth:`run_round`, which advances one round and returns a
    :class:`RoundTrace`.
    """

    name = "base"
    reconstructed = False

    def __init__(self, obj: CompositeObjective, hp: HyperParams,
                 sampler: Optional[BatchSampler] = None, x0=None, threads: int = 1):
        self.obj = obj
        self.hp = hp
        self.sampler = sampler if sampler is not None else BatchSampler(hp.seed)
        self.n = obj.problem.n
        self.d = obj.d
        self.threads = int(threads)
        if self.threads < 1:
            raise InvalidArgumentError("threads must be >= 1")
        self.x0 = np.zeros(self.d) if x0 is None else np.array(x0, dtype=float)
        if self.x0.shape != (self.d,):
            raise InvalidArgumentError(f"x0 must have shape ({self.d},)")

    @property
    def model(self) -> np.ndarray:
        raise NotImplementedError

    @property
    def comm_per_round(self) -> int:
        """Scalars exchanged per round: one d-vector down and one up per client."""
        return 2 * self.n * self.d

    def run_round(self, r: int) -> RoundTrace:
        raise NotImplementedError

    def _map_clients(self, fn):
        # Results come back in client order, so reductions are bit-stable.
        if self.threads == 1:
            return [fn(i) for i in range(self.n)]
        with ThreadPoolExecutor(max_workers=self.threads) as pool:
            return list(pool.map(fn, range(self.n)))


class ProposedOptimizer(FederatedOptimizer):
    """Decoupled proximal method with client-drift correction (per-client form)."""

    name = "proposed"

    def __init__(self, obj, hp, sampler=None, x0=None, threads=1):
        super().__init__(obj, hp, sampler, x0, threads)
        self.server = ServerState.from_x_bar(self.x0, obj.reg, hp.eta_tilde)
        self.clients = [ClientState.fresh(i, self.d) for i in range(self.n)]

    @property
    def model(self):
        return self.server.p_x

    @property
    def corrections(self) -> np.ndarray:
        return np.stack([c.c for c in self.clients])

    @property
    def grad_sums(self) -> np.ndarray:
        """Last round's per-client gradient sums (zero before round 1)."""
        return np.stack([c.grad_avg for c in self.clients]) * self.hp.tau

    def run_round(self, r: int) -> RoundTrace:
        p_x = self.server.p_x
        c_before = self.corrections
        x_bar_before = self.server.x_bar

        def local(i):
            return proposed_local_round(self.clients[i], p_x, self.hp, self.obj, self.sampler, r)[0]

        avg_zhat = np.stack(self._map_clients(local)).mean(axis=0)
        new_server = server_update(self.server, avg_zhat, self.hp, self.obj.reg)
        for client in self.clients:
            correction_update(client, p_x, new_server.x_bar, self.hp)
        self.server = new_server
        traces = [c.trace for c in self.clients]
        return RoundTrace(
            anchor=p_x,
            Z=np.stack([tr.Z for tr in traces]),
            grads=np.stack([tr.grads for tr in traces]),
            batches=[tr.batches for tr in traces],
            Zhat=np.stack([tr.Zhat for tr in traces]),
            extra={"x_bar": x_bar_before, "c": c_before},
        )


class FedMidOptimizer(FederatedOptimizer):
    """Federated mirror descent: local proximal SGD, primal averaging (reconstructed).

    Client steps ``z <- prox(eta, z - eta grad f_i(z; B))`` from the server
    model ``x``; the server then moves ``x <- x + eta_g (mean z_tau - x)``.
    """

    name = "fedmid"
    reconstructed = True

    def __init__(self, obj, hp, sampler=None, x0=None, threads=1):
        super().__init__(obj, hp, sampler, x0, threads)
        self.x = self.x0.copy()

    @property
    def model(self):
        return self.x

    def _local(self, i, x, r):
        problem, reg, hp = self.obj.problem, self.obj.reg, self.hp
        Z = np.empty((hp.tau + 1, self.d))
        grads = np.empty((hp.tau, self.d))
        batches = []
        Z[0] = x
        for t in range(hp.tau):
            batch = _batch(self.sampler, hp, i, r, t, problem.sizes[i])
            grads[t] = problem.grad_at(i, Z[t], batch)
            step = Z[t] - hp.eta * grads[t]
            _check_finite(step, self.name, i, r, t)
            Z[t + 1] = prox(reg, hp.eta, step)
            batches.append(batch)
        return Z, grads, batches

    def run_round(self, r):
        x = self.x
        out = self._map_clients(lambda i: self._local(i, x, r))
        Z = np.stack([o[0] for o in out])
        self.x = x + self.hp.eta_g * (Z[:, -1].mean(axis=0) - x)
        return RoundTrace(x, Z, np.stack([o[1] for o in out]), [o[2] for o in out])


class FedDAOptimizer(FederatedOptimizer):
    """Federated dual averaging (reconstructed).

    The server keeps a dual model ``x_dual`` and the accumulated prox
    threshold ``acc``. Clients start from ``u_0 = x_dual``, query the primal
    point ``z_t = prox(acc + s_t, u_t)`` where ``s_t`` is the local step mass
    taken so far, and take ``u <- u - a_t grad f_i(z_t; B)``. The server
    averages duals with step ``eta_g`` and grows ``acc`` by ``eta_g`` times
    the local step mass. The reported model is ``prox(acc, x_dual)``.
    """

    name = "fedda"
    reconstructed = True

    def __init__(self, obj, hp, sampler=None, x0=None, threads=1):
        super().__init__(obj, hp, sampler, x0, threads)
        self.x_dual = self.x0.copy()
        self.acc = 0.0

    @property
    def model(self):
        return _prox_or_identity(self.obj.reg, self.acc, self.x_dual)

    def _steps(self, r) -> np.ndarray:
        return np.full(self.hp.tau, self.hp.eta)

    def _local(self, i, u0, r, steps):
        problem, reg, hp = self.obj.problem, self.obj.reg, self.hp
        Z = np.empty((hp.tau + 1, self.d))
        grads = np.empty((hp.tau, self.d))
        batches = []
        u = u0.copy()
        mass = 0.0
        for t in range(hp.tau):
            Z[t] = _prox_or_identity(reg, self.acc + mass, u)
            batch = _batch(self.sampler, hp, i, r, t, problem.sizes[i])
            grads[t] = problem.grad_at(i, Z[t], batch)
            u = u - steps[t] * grads[t]
            _check_finite(u, self.name, i, r, t)
            mass += steps[t]
            batches.append(batch)
        Z[hp.tau] = _prox_or_identity(reg, self.acc + mass, u)
        return u, Z, grads, batches

    def run_round(self, r):
        anchor = self.model
        steps = self._steps(r)
        u0 = self.x_dual
        out = self._map_clients(lambda i: self._local(i, u0, r, steps))
        U = np.stack([o[0] for o in out])
        self.x_dual = u0 + self.hp.eta_g * (U.mean(axis=0) - u0)
        self.acc += self.hp.eta_g * float(steps.sum())
        return RoundTrace(anchor, np.stack([o[1] for o in out]), np.stack([o[2] for o in out]),
                          [o[3] for o in out], extra={"steps": steps})


class FastFedDAOptimizer(FedDAOptimizer):
    """Dual averaging with weighted history and decaying steps (reconstructed).

    Local step ``k = (r-1) tau + t`` (counted over the whole run) uses
    ``a_k = gamma_k w_k / mean(w_0..w_k)`` with ``gamma_k = gamma0/sqrt(k+1)``
    when ``decay`` is set and weights ``w_k = k+1`` when ``weighted`` is set.
    Equal weights without decay give ``a_k = gamma0``, i.e. plain FedDA with
    ``eta = gamma0``. Clients also exchange the two scalars of the weight
    schedule, so each round costs ``2nd + 2n`` scalars.
    """

    name = "fastfedda"

    def __init__(self, obj, hp, sampler=None, x0=None, threads=1, gamma0: Optional[float] = None,
                 weighted: bool = True, decay: bool = True):
        super().__init__(obj, hp, sampler, x0, threads)
        self.gamma0 = hp.eta if gamma0 is None else float(gamma0)
        if not np.isfinite(self.gamma0) or self.gamma0 < 0:
            raise InvalidArgumentError(f"gamma0 must be finite and >= 0, got {gamma0}")
        self.weighted = weighted
        self.decay = decay

    @property
    def comm_per_round(self):
        return 2 * self.n * self.d + 2 * self.n

    def _steps(self, r):
        k = (r - 1) * self.hp.tau + np.arange(self.hp.tau, dtype=float)
        gamma = self.gamma0 / np.sqrt(k + 1.0) if self.decay else np.full_like(k, self.gamma0)
        if not self.weighted:
            return gamma
        # w_k = k + 1, so mean(w_0..w_k) = (k + 2) / 2
        return gamma * (k + 1.0) / ((k + 2.0) / 2.0)


class PGDOptimizer(FederatedOptimizer):
    """Centralized proximal gradient descent with step ``eta_tilde``, one step per round."""

    name = "pgd"

    def __init__(self, obj, hp, sampler=None, x0=None, threads=1):
        super().__init__(obj, hp, sampler, x0, threads)
        self.x = self.x0.copy()

    @property
    def model(self):
        return self.x

    @property
    def comm_per_round(self):
        return 0

    def run_round(self, r):
        anchor = self.x
        self.x = pgd_step(self.obj, anchor, self.hp.eta_tilde)
        _check_finite(self.x, self.name, 0, r, 0)
        Z = np.stack([anchor, self.x])[None]
        return RoundTrace(anchor, Z, self.obj.smooth_grad(anchor)[None, None], [[None]])


ALGORITHMS = {
    cls.name: cls
    for cls in (ProposedOptimizer, FedMidOptimizer, FedDAOptimizer, FastFedDAOptimizer, PGDOptimizer)
}


def make_optimizer(name: str, obj, hp, sampler=None, x0=None, threads=1, **options) -> FederatedOptimizer:
    try:
        cls = ALGORITHMS[name]
    except KeyError:
        raise InvalidArgumentError(f"unknown algorithm {name!r}; choose from {sorted(ALGORITHMS)}") from None
    return cls(obj, hp, sampler, x0, threads, **options)
