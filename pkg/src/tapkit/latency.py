"""Polynomial latency family: link travel time ``t(x) = t0 * f(x / m)``.

``f`` is a polynomial congestion factor with ``f(0) = 1``, shared by all
links; ``t0`` is the free-flow travel time and ``m`` the flow capacity of
a link.  The classic degree-4 BPR curve is ``f(z) = 1 + 0.15 z^4``.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

MONOTONICITY_GRID = 1000


@dataclass(frozen=True)
class CongestionFactor:
    """Coefficients ``(beta_0, ..., beta_n)`` of the congestion polynomial.

    ``beta_0`` must equal 1 (free-flow normalization).  When the factor was
    fitted from data, ``validated_upper`` records the largest normalized
    flow seen during estimation; monotonicity is guaranteed only up to that
    point and evaluation beyond it emits a warning.
    """

    beta: tuple[float, ...]
    validated_upper: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "beta", tuple(float(b) for b in self.beta))
        if len(self.beta) < 1 or self.beta[0] != 1.0:
            raise ValueError("congestion factor requires beta_0 == 1")
        if self.validated_upper is not None and not self.is_nondecreasing_on(self.validated_upper):
            raise ValueError("congestion factor decreases inside its validated range")

    @property
    def degree(self) -> int:
        return len(self.beta) - 1

    @classmethod
    def bpr(cls, coefficient: float = 0.15, power: int = 4) -> "CongestionFactor":
        beta = [1.0] + [0.0] * (power - 1) + [float(coefficient)]
        return cls(beta=tuple(beta))

    @classmethod
    def constant(cls) -> "CongestionFactor":
        return cls(beta=(1.0,))

    def value(self, z):
        """Evaluate ``f`` at normalized flow ``z`` (scalar or array)."""
        z = np.asarray(z, dtype=float)
        out = np.full(z.shape, self.beta[-1])
        for b in self.beta[-2::-1]:
            out = out * z + b
        return out if out.shape else float(out)

    def derivative(self, z):
        """Evaluate ``f'`` at ``z``."""
        z = np.asarray(z, dtype=float)
        n = self.degree
        if n == 0:
            return np.zeros(z.shape) if z.shape else 0.0
        out = np.full(z.shape, n * self.beta[n])
        for i in range(n - 1, 0, -1):
            out = out * z + i * self.beta[i]
        return out if out.shape else float(out)

    def integral(self, z):
        """Evaluate ``F(z) = int_0^z f(s) ds`` (polynomial antiderivative)."""
        z = np.asarray(z, dtype=float)
        n = self.degree
        out = np.full(z.shape, self.beta[n] / (n + 1))
        for i in range(n - 1, -1, -1):
            out = out * z + self.beta[i] / (i + 1)
        out = out * z
        return out if out.shape else float(out)

    def is_nondecreasing_on(self, upper: float, samples: int = MONOTONICITY_GRID) -> bool:
        """Sample ``f'`` on ``[0, upper]`` and check it never goes negative."""
        if upper <= 0:
            return True
        grid = np.linspace(0.0, upper, samples)
        return bool(np.all(self.derivative(grid) >= -1e-12 * max(1.0, abs(upper)) ** self.degree))

    def to_json(self) -> dict:
        out = {"degree": self.degree, "beta": list(self.beta)}
        if self.validated_upper is not None:
            out["validated_upper"] = self.validated_upper
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "CongestionFactor":
        beta = tuple(obj["beta"])
        if "degree" in obj and obj["degree"] != len(beta) - 1:
            raise ValueError("degree field inconsistent with beta length")
        return cls(beta=beta, validated_upper=obj.get("validated_upper"))


def _check_domain(cf: CongestionFactor, m, x):
    x = np.asarray(x, dtype=float)
    if np.any(x < 0):
        raise ValueError("negative link flow")
    if cf.validated_upper is not None:
        z_max = float(np.max(x / np.asarray(m, dtype=float), initial=0.0))
        if z_max > cf.validated_upper * (1 + 1e-12):
            warnings.warn(
                f"normalized flow {z_max:.4g} exceeds the validated range "
                f"[0, {cf.validated_upper:.4g}] of the estimated congestion factor",
                RuntimeWarning,
                stacklevel=3,
            )


def travel_time(cf: CongestionFactor, t0, m, x):
    """Link travel time ``t0 * f(x/m)`` in minutes; vectorized over links."""
    _check_domain(cf, m, x)
    return t0 * cf.value(np.asarray(x, dtype=float) / m)


def beckmann_term(cf: CongestionFactor, t0, m, x):
    """Exact antiderivative ``int_0^x t0 f(s/m) ds = t0 * m * F(x/m)``."""
    _check_domain(cf, m, x)
    m = np.asarray(m, dtype=float)
    return t0 * m * cf.integral(np.asarray(x, dtype=float) / m)


def marginal_cost(cf: CongestionFactor, t0, m, x):
    """System-optimum link cost ``d/dx [x t(x)] = t0 (f(z) + z f'(z))`` at ``z = x/m``."""
    _check_domain(cf, m, x)
    z = np.asarray(x, dtype=float) / m
    return t0 * (cf.value(z) + z * cf.derivative(z))
