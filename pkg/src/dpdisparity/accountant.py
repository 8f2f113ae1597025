"""Renyi-DP accounting for the subsampled Gaussian mechanism.

Per-step RDP at integer orders uses the exact binomial expansion

    RDP(a) = log( sum_k C(a,k) (1-q)^(a-k) q^k exp(k(k-1) / (2 z^2)) ) / (a-1)

evaluated with log-sum-exp.  Fractional orders use the two-sided series
with complementary error functions (the same quantity, extended to real
``a``).  Composition over ``K`` steps multiplies by ``K``; conversion to
``(eps, delta)`` takes ``min_a RDP(a) + log(1/delta) / (a-1)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import gammaln, log_ndtr, logsumexp

__all__ = [
    "INTEGER_ORDERS",
    "DEFAULT_ORDERS",
    "PrivacyCurve",
    "rdp_sampled_gaussian",
    "rdp_sampled_gaussian_frac",
    "rdp_curve",
    "compose",
    "to_epsilon",
    "epsilon_for_run",
    "epsilon_and_order",
    "rdp_table",
]

INTEGER_ORDERS: tuple = tuple(range(2, 65)) + (128, 256, 512)
# quarter/half steps below 10 where the optimum usually sits
DEFAULT_ORDERS: tuple = (
    (1.25, 1.5, 1.75)
    + tuple(x / 2 for x in range(4, 20))
    + tuple(range(10, 65))
    + (128, 256, 512)
)


@dataclass(frozen=True)
class PrivacyCurve:
    orders: tuple
    rdp: tuple

    def __post_init__(self):
        if len(self.orders) != len(self.rdp):
            raise ValueError("orders and rdp differ in length")
        if any(b <= a for a, b in zip(self.orders, self.orders[1:])):
            raise ValueError("orders must be strictly ascending")
        if any(not (r >= 0 and math.isfinite(r)) for r in self.rdp):
            raise ValueError("rdp values must be finite and non-negative")


def _check_qz(q: float, z: float) -> None:
    if not 0 <= q <= 1:
        raise ValueError(f"sampling rate q must lie in [0, 1], got {q}")
    if not z > 0:
        raise ValueError(f"noise multiplier z must be positive, got {z}")


def rdp_sampled_gaussian(q: float, z: float, alpha: int) -> float:
    """Per-step RDP of the sampled Gaussian mechanism at integer order ``alpha``."""
    if isinstance(alpha, bool) or not float(alpha).is_integer() or alpha < 2:
        raise ValueError(f"alpha must be an integer >= 2, got {alpha}")
    _check_qz(q, z)
    alpha = int(alpha)
    if q == 0:
        return 0.0
    if q == 1:
        return alpha / (2 * z * z)
    k = np.arange(alpha + 1, dtype=np.float64)
    log_terms = (
        gammaln(alpha + 1) - gammaln(k + 1) - gammaln(alpha - k + 1)
        + k * math.log(q)
        + (alpha - k) * math.log1p(-q)
        + k * (k - 1) / (2 * z * z)
    )
    return max(float(logsumexp(log_terms)) / (alpha - 1), 0.0)


def _log_erfc(x: float) -> float:
    return math.log(2) + float(log_ndtr(-x * math.sqrt(2)))


def _log_add(a: float, b: float) -> float:
    lo, hi = min(a, b), max(a, b)
    if lo == -math.inf:
        return hi
    return hi + math.log1p(math.exp(lo - hi))


def rdp_sampled_gaussian_frac(q: float, z: float, alpha: float, max_terms: int = 1000) -> float:
    """Per-step RDP at a real order ``alpha > 1``.

    Splits the defining integral at the point where the two Gaussian
    densities' likelihood ratio crosses and sums both tails as generalised
    binomial series until the terms become negligible.
    """
    _check_qz(q, z)
    if not alpha > 1:
        raise ValueError(f"alpha must exceed 1, got {alpha}")
    if float(alpha).is_integer():
        return rdp_sampled_gaussian(q, z, int(alpha))
    if q == 0:
        return 0.0
    if q == 1:
        return alpha / (2 * z * z)
    log_q, log_1mq = math.log(q), math.log1p(-q)
    split = z * z * math.log(1 / q - 1) + 0.5
    pos = neg = -math.inf
    last0 = last1 = -math.inf
    first_negative = math.floor(alpha) + 1
    for i in range(max_terms):
        log_coef = _log_abs_binom(alpha, i)
        j = alpha - i
        s0 = (
            log_coef + i * log_q + j * log_1mq + (i * i - i) / (2 * z * z)
            + math.log(0.5) + _log_erfc((i - split) / (math.sqrt(2) * z))
        )
        s1 = (
            log_coef + j * log_q + i * log_1mq + (j * j - j) / (2 * z * z)
            + math.log(0.5) + _log_erfc((split - j) / (math.sqrt(2) * z))
        )
        term = _log_add(s0, s1)
        # C(alpha, i) < 0 when an odd number of factors (alpha - m) are negative
        if i > first_negative and (i - first_negative) % 2 == 1:
            neg = _log_add(neg, term)
        else:
            pos = _log_add(pos, term)
        if s0 < last0 and s1 < last1 and max(s0, s1) < pos - 36:
            break
        last0, last1 = s0, s1
    log_a = pos + math.log1p(-math.exp(neg - pos)) if neg > -math.inf else pos
    return max(log_a / (alpha - 1), 0.0)


def _log_abs_binom(n: float, k: int) -> float:
    return float(gammaln(n + 1) - gammaln(k + 1) - gammaln(n - k + 1))


def rdp_curve(q: float, z: float, orders: Sequence[float] = DEFAULT_ORDERS) -> PrivacyCurve:
    """Single-step RDP over ``orders``."""
    values = []
    for a in orders:
        if float(a).is_integer():
            values.append(rdp_sampled_gaussian(q, z, int(a)))
        else:
            values.append(rdp_sampled_gaussian_frac(q, z, a))
    return PrivacyCurve(tuple(orders), tuple(values))


def compose(curve: PrivacyCurve, steps: int) -> PrivacyCurve:
    if steps < 0:
        raise ValueError("steps must be non-negative")
    return PrivacyCurve(curve.orders, tuple(steps * r for r in curve.rdp))


def to_epsilon(curve: PrivacyCurve, delta: float) -> tuple[float, float]:
    """``(eps, best_order)`` minimising ``rdp(a) + log(1/delta)/(a-1)``."""
    if not 0 < delta < 1:
        raise ValueError(f"delta must lie in (0, 1), got {delta}")
    if not curve.orders:
        raise ValueError("empty privacy curve")
    eps = [r + math.log(1 / delta) / (a - 1) for a, r in zip(curve.orders, curve.rdp)]
    i = int(np.argmin(eps))
    return float(eps[i]), curve.orders[i]


def epsilon_for_run(
    N: int,
    b: int,
    z: float,
    T: int,
    delta: float,
    orders: Sequence[float] = DEFAULT_ORDERS,
) -> float:
    """Epsilon after ``T`` epochs of fixed-size batches: ``K = T * floor(N / b)``."""
    return epsilon_and_order(N, b, z, T, delta, orders)[0]


def epsilon_and_order(N, b, z, T, delta, orders=DEFAULT_ORDERS) -> tuple[float, float]:
    if N < 1 or not 1 <= b <= N:
        raise ValueError("need 1 <= b <= N")
    if T < 0:
        raise ValueError("T must be non-negative")
    curve = compose(rdp_curve(b / N, z, orders), T * (N // b))
    return to_epsilon(curve, delta)


def rdp_table(curve: PrivacyCurve, delta: float) -> list[tuple[float, float, float]]:
    """Rows of ``(order, rdp, eps_at_order)`` for reporting."""
    return [(a, r, r + math.log(1 / delta) / (a - 1)) for a, r in zip(curve.orders, curve.rdp)]
