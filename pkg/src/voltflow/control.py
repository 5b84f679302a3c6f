"""Volt/var control functions: droop curve, its inverse, the reverse-engineered
cost, and the cost subgradient used by the gradient controller."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Mapping, Protocol, runtime_checkable

import numpy as np


class CurveDomainError(ValueError):
    pass


@runtime_checkable
class ControlFunction(Protocol):
    """Non-increasing local map from voltage to reactive injection with a
    bounded slope. Everything above the curve level works through this."""

    q_min: float
    q_max: float

    def evaluate(self, v: float) -> float: ...

    def inverse(self, q: float) -> float: ...

    def cost(self, q: float) -> float: ...

    def cost_derivative(self, q: float) -> float: ...

    def cost_subgradient(self, q: float, v: float) -> float: ...

    def lipschitz_bound(self) -> float: ...


@dataclass(frozen=True)
class DroopCurve:
    """Piecewise-linear droop: zero inside (v_nom - delta/2, v_nom + delta/2),
    slope -alpha outside, clamped to [q_min, q_max]."""

    alpha: float
    v_nom: float = 1.0
    delta: float = 0.0
    q_min: float = -1.0
    q_max: float = 1.0

    def __post_init__(self):
        if not (self.alpha > 0 and math.isfinite(self.alpha)):
            raise ValueError(f"alpha must be positive and finite, got {self.alpha}")
        if not self.delta >= 0:
            raise ValueError(f"deadband width must be non-negative, got {self.delta}")
        if not self.q_min < 0 < self.q_max:
            raise ValueError(f"need q_min < 0 < q_max, got [{self.q_min}, {self.q_max}]")

    @classmethod
    def from_threshold(cls, offset: float, q_max: float, v_nom: float = 1.0, delta: float = 0.04, q_min: float | None = None) -> "DroopCurve":
        """Curve reaching its limits at v_nom -/+ ``offset``.

        The slope is q_max / (offset - delta/2); limits are symmetric unless
        ``q_min`` is given.
        """
        if not offset > delta / 2:
            raise ValueError(f"threshold offset {offset} must exceed half the deadband {delta / 2}")
        return cls(q_max / (offset - delta / 2), v_nom, delta, -q_max if q_min is None else q_min, q_max)

    @property
    def v_upper(self) -> float:
        return self.v_nom + self.delta / 2

    @property
    def v_lower(self) -> float:
        return self.v_nom - self.delta / 2

    def evaluate(self, v: float) -> float:
        raw = -self.alpha * max(v - self.v_upper, 0.0) + self.alpha * max(self.v_lower - v, 0.0)
        return min(max(raw, self.q_min), self.q_max)

    def derivative(self, v: float) -> float:
        """Slope of the curve; at kinks the side nearer the deadband wins."""
        if self.v_lower <= v <= self.v_upper:
            return 0.0
        raw = -self.alpha * (v - self.v_upper) if v > self.v_upper else self.alpha * (self.v_lower - v)
        if raw < self.q_min or raw > self.q_max:
            return 0.0
        return -self.alpha

    def inverse(self, q: float) -> float:
        if q == 0:
            raise CurveDomainError("inverse at q = 0 is the whole deadband")
        if not self.q_min < q < self.q_max:
            raise CurveDomainError(f"q = {q} is at or beyond the limits [{self.q_min}, {self.q_max}]")
        return (self.v_upper if q < 0 else self.v_lower) - q / self.alpha

    def _check_range(self, q: float) -> None:
        if not self.q_min <= q <= self.q_max:
            raise CurveDomainError(f"q = {q} outside [{self.q_min}, {self.q_max}]")

    def cost(self, q: float) -> float:
        """C(q) = -integral_0^q f^{-1}(s) ds, in closed form."""
        self._check_range(q)
        knee = self.v_upper if q < 0 else self.v_lower
        return -knee * q + q * q / (2 * self.alpha)

    def cost_derivative(self, q: float) -> float:
        """C'(q) = -f^{-1}(q), extended continuously to the limits; q != 0."""
        self._check_range(q)
        if q == 0:
            raise CurveDomainError("cost is not differentiable at q = 0")
        return -(self.v_upper if q < 0 else self.v_lower) + q / self.alpha

    def cost_subgradient(self, q: float, v: float) -> float:
        """d/dq_i of C(q) + q'Xq/2 + q'v_tilde given the measured voltage v."""
        self._check_range(q)
        if q != 0:
            return self.cost_derivative(q) + v
        if v > self.v_upper:
            return v - self.v_upper
        if v < self.v_lower:
            return v - self.v_lower
        return 0.0

    def lipschitz_bound(self) -> float:
        return self.alpha

    def curvature_bound(self) -> float:
        """Uniform bound on C'' (the reciprocal slope)."""
        return 1.0 / self.alpha

    def to_dict(self) -> dict:
        return {"alpha": self.alpha, "v_nom": self.v_nom, "delta": self.delta, "q_min": self.q_min, "q_max": self.q_max}


class ControllerSet:
    """One control function per controlled bus, in a fixed bus order."""

    def __init__(self, curves: Mapping[int, ControlFunction], order: Iterable[int] | None = None):
        order = tuple(curves) if order is None else tuple(order)
        if set(order) != set(curves) or len(order) != len(curves):
            raise ValueError("order must list each controlled bus exactly once")
        self._curves = dict(curves)
        self.buses: tuple[int, ...] = order
        self.curves: tuple[ControlFunction, ...] = tuple(self._curves[b] for b in order)
        self.q_min = np.array([c.q_min for c in self.curves], dtype=float)
        self.q_max = np.array([c.q_max for c in self.curves], dtype=float)
        self.alpha = np.array([c.lipschitz_bound() for c in self.curves], dtype=float)
        for a in (self.q_min, self.q_max, self.alpha):
            a.flags.writeable = False

    def __len__(self) -> int:
        return len(self.buses)

    def __getitem__(self, bus: int) -> ControlFunction:
        return self._curves[bus]

    def __repr__(self) -> str:
        return f"ControllerSet(buses={self.buses})"

    @classmethod
    def uniform_threshold(cls, q_limits: Mapping[int, float], offset: float, v_nom: float = 1.0, delta: float = 0.04) -> "ControllerSet":
        return cls({b: DroopCurve.from_threshold(offset, q, v_nom, delta) for b, q in q_limits.items()})

    @classmethod
    def for_network(cls, network, offset: float, v_nom: float = 1.0, delta: float = 0.04) -> "ControllerSet":
        """Threshold-designed curves on every inverter bus of ``network``."""
        limits = {b: network.bus(b).inverter.q_limit for b in network.control_buses}
        return cls.uniform_threshold(limits, offset, v_nom, delta)

    def permuted(self, order: Iterable[int]) -> "ControllerSet":
        return ControllerSet(self._curves, order)

    def evaluate(self, v) -> np.ndarray:
        return np.array([c.evaluate(float(x)) for c, x in zip(self.curves, v)])

    def cost(self, q) -> float:
        return float(sum(c.cost(float(x)) for c, x in zip(self.curves, q)))

    def subgradient(self, q, v) -> np.ndarray:
        return np.array([c.cost_subgradient(float(a), float(b)) for c, a, b in zip(self.curves, q, v)])

    def inverse_or_nan(self, q) -> np.ndarray:
        out = []
        for c, x in zip(self.curves, q):
            try:
                out.append(c.inverse(float(x)))
            except CurveDomainError:
                out.append(math.nan)
        return np.array(out)

    def within_limits(self, q, atol: float = 0.0) -> bool:
        q = np.asarray(q)
        return bool(np.all(q >= self.q_min - atol) and np.all(q <= self.q_max + atol))

    def to_dict(self) -> dict:
        return {str(b): c.to_dict() if hasattr(c, "to_dict") else repr(c) for b, c in zip(self.buses, self.curves)}


def evaluate(curve: ControlFunction, v: float) -> float:
    return curve.evaluate(v)


def inverse(curve: ControlFunction, q: float) -> float:
    return curve.inverse(q)


def cost(curve: ControlFunction, q: float) -> float:
    return curve.cost(q)


def cost_subgradient(curve: ControlFunction, q: float, v: float) -> float:
    return curve.cost_subgradient(q, v)


def lipschitz_bound(curve: ControlFunction) -> float:
    return curve.lipschitz_bound()
