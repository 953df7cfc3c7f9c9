"""Regularizers and their proximal operators.

For a step ``theta > 0`` the proximal map of ``g`` is

    prox(theta, w) = argmin_u  theta * g(u) + 0.5 * ||w - u||^2

Every regularizer here has a closed-form prox that acts coordinate-wise, so
the same call works on a single ``(d,)`` vector or on a stack of client
vectors of shape ``(n, d)`` (the prox is then applied block by block).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import InvalidArgumentError, UnsupportedRegularizerError

__all__ = [
    "Regularizer",
    "prox",
    "subgradient_bound",
    "prox_objective_residual",
]

_KINDS = ("zero", "l1", "box")


@dataclass(frozen=True)
class Regularizer:
    """The non-smooth term ``g`` of the composite objective.

    Use the constructors :meth:`zero`, :meth:`l1` and :meth:`box` rather than
    building instances by hand.
    """

    kind: str
    strength: float = 0.0
    lo: Optional[np.ndarray] = None
    hi: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise InvalidArgumentError(f"unknown regularizer kind {self.kind!r}")
        if not np.isfinite(self.strength) or self.strength < 0:
            raise InvalidArgumentError(f"L1 strength must be finite and >= 0, got {self.strength}")
        if self.kind == "box":
            if self.lo is None or self.hi is None:
                raise InvalidArgumentError("box regularizer needs lo and hi")
            lo = np.asarray(self.lo, dtype=float)
            hi = np.asarray(self.hi, dtype=float)
            if lo.shape != hi.shape:
                raise InvalidArgumentError("box bounds lo and hi differ in shape")
            if np.any(lo > hi):
                raise InvalidArgumentError("box bounds need lo <= hi elementwise")
            object.__setattr__(self, "lo", lo)
            object.__setattr__(self, "hi", hi)

    @classmethod
    def zero(cls) -> "Regularizer":
        return cls("zero")

    @classmethod
    def l1(cls, strength: float) -> "Regularizer":
        return cls("l1", float(strength))

    @classmethod
    def box(cls, lo, hi) -> "Regularizer":
        return cls("box", 0.0, np.asarray(lo, dtype=float), np.asarray(hi, dtype=float))

    def value(self, x) -> float:
        """``g(x)``; ``inf`` for a point outside the box."""
        x = np.asarray(x, dtype=float)
        if self.kind == "zero":
            return 0.0
        if self.kind == "l1":
            return self.strength * float(np.abs(x).sum())
        inside = np.all((x >= self.lo) & (x <= self.hi))
        return 0.0 if inside else float("inf")

    def to_dict(self) -> dict:
        out = {"kind": self.kind}
        if self.kind == "l1":
            out["strength"] = self.strength
        elif self.kind == "box":
            out["lo"] = self.lo.tolist()
            out["hi"] = self.hi.tolist()
        return out

    @classmethod
    def from_dict(cls, spec: dict) -> "Regularizer":
        kind = spec.get("kind", "zero")
        if kind == "l1":
            return cls.l1(spec.get("strength", 0.0))
        if kind == "box":
            return cls.box(spec["lo"], spec["hi"])
        return cls(kind)


def _check_step(theta):
    if not np.isfinite(theta) or theta <= 0:
        raise InvalidArgumentError(f"prox step must be a positive finite number, got {theta}")


def prox(reg: Regularizer, theta: float, w) -> np.ndarray:
    """Evaluate the proximal map of ``reg`` with step ``theta`` at ``w``.

    Parameters
    ----------
    reg : Regularizer
    theta : float
        Positive step multiplying ``g``.
    w : array_like
        Point(s) to map. A 2-D input is treated as stacked d-blocks.

    Returns
    -------
    ndarray
        Same shape as ``w``. Soft-thresholding for L1, identity for Zero,
        clamping for a box.
    """
    _check_step(theta)
    w = np.asarray(w, dtype=float)
    if not np.all(np.isfinite(w)):
        raise InvalidArgumentError("prox input contains non-finite entries")
    if reg.kind == "zero":
        return w.copy()
    if reg.kind == "l1":
        shrink = theta * reg.strength
        return np.sign(w) * np.maximum(np.abs(w) - shrink, 0.0)
    return np.clip(w, reg.lo, reg.hi)


def subgradient_bound(reg: Regularizer, d: int) -> float:
    """Tightest uniform bound on ``||s||`` over subgradients ``s`` of ``g`` in R^d."""
    if d < 1:
        raise InvalidArgumentError(f"dimension must be >= 1, got {d}")
    if reg.kind == "zero":
        return 0.0
    if reg.kind == "l1":
        return reg.strength * float(np.sqrt(d))
    raise UnsupportedRegularizerError("box indicator has unbounded subgradients")


def _prox_objective(reg, theta, w, u):
    return theta * reg.value(u) + 0.5 * float(np.sum((np.asarray(w) - np.asarray(u)) ** 2))


def prox_objective_residual(reg: Regularizer, theta: float, w, u) -> float:
    """Gap between the prox objective at ``u`` and at the exact prox point.

    Zero (up to rounding) exactly when ``u`` is the prox point; used as a test
    oracle for :func:`prox`.
    """
    _check_step(theta)
    w = np.atleast_1d(np.asarray(w, dtype=float))
    u = np.atleast_1d(np.asarray(u, dtype=float))
    if w.shape != u.shape:
        raise InvalidArgumentError(f"shape mismatch: w{w.shape} vs u{u.shape}")
    p = prox(reg, theta, w)
    gap = _prox_objective(reg, theta, w, u) - _prox_objective(reg, theta, w, p)
    return max(gap, 0.0)
