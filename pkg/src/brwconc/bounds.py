"""Closed-form tail bounds and their validity checks.

Every evaluator returns a :class:`BoundValue`. Bounds above 1 are kept as
computed (flagged ``vacuous``) so monotonicity in lambda and n holds
exactly.

The classical route to the Azuma constant goes through the two cosh
inequalities ``e^{tx} <= sinh(t) x + cosh(t)`` on [-1, 1] and
``cosh t <= e^{t^2/2}``. They are not exposed separately: the
exponential-moment inequality in :func:`mgf_bound` covers every use here.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidRegime, RangeError

KINDS = ("azuma_classic", "azuma_downgraded", "azuma_stated", "extended", "neighborhood", "mgf")

#: lambda >= WINDOW_FACTOR * sqrt(N) is our reading of "N^{1/2} << lambda"
WINDOW_FACTOR = 5.0


@dataclass(frozen=True)
class BoundParams:
    """Constants shared by the bound evaluators.

    ``A = 1 + L*M/N`` scales the exponential-moment parameter; ``K`` caps
    ``E exp(delta*A|X|)``.
    """

    delta: float = 1.0
    K: float = math.e
    L: float = 0.0
    A: float = 1.0
    c: float = 1.0
    lam: float = 0.0

    def __post_init__(self):
        if self.delta <= 0:
            raise ValueError("delta must be positive")
        if self.K < 1:
            raise ValueError("K must be >= 1 since E exp(delta A |X|) >= 1")
        if self.A < 1:
            raise ValueError("A must be >= 1")
        if self.L < 0 or self.c < 0 or self.lam < 0:
            raise ValueError("L, c and lambda must be nonnegative")

    @classmethod
    def from_scale(cls, *, delta, K, L, M, N, c=None, lam=0.0):
        if c is None:
            c = default_c(K, delta)
        return cls(delta=delta, K=K, L=L, A=1.0 + L * M / N, c=c, lam=lam)


@dataclass(frozen=True)
class BoundValue:
    value: float
    kind: str
    valid: bool = True
    reason: str = ""
    flags: tuple = ()

    @property
    def vacuous(self):
        return "vacuous" in self.flags


def _tail(value, kind, flags=(), valid=True, reason=""):
    flags = tuple(flags)
    if value >= 1.0:
        flags = flags + ("vacuous",)
    return BoundValue(float(value), kind, valid, reason, flags)


def _check_common(n, lam):
    if n < 1:
        raise ValueError("n must be >= 1")
    if lam < 0:
        raise ValueError("lambda must be nonnegative")


def default_c(K, delta):
    """Neighborhood constant c = K^2 / delta^2.

    This is the coefficient of n t^2 in the exponent of the extended bound's
    derivation; nothing else pins c down.
    """
    return K * K / (delta * delta)


def mgf_bound(t, delta, exp_moment):
    """Upper bounds on E[e^{tX}] for centred X given E[e^{delta|X|}].

    Returns ``(1 + (t/delta)^2 E, exp((t/delta)^2 E))``; valid for
    ``|t| <= delta``.
    """
    if delta <= 0:
        raise ValueError("delta must be positive")
    if abs(t) > delta:
        raise RangeError(f"|t|={abs(t)} exceeds delta={delta}")
    if exp_moment < 1:
        raise ValueError("exp_moment must be >= 1")
    x = (t / delta) ** 2 * exp_moment
    return 1.0 + x, math.exp(x) if x < 709.0 else math.inf


def azuma_bound(n, lam, c=1.0, variant="classic"):
    """Two-sided tail bound for a martingale with increments |X_i| <= c.

    variant
        ``classic``: 2 exp(-lam^2 / (2 n c^2)).
        ``downgraded``: 2 exp(-(lam^2/2n) / (2 e^c)), the constant obtained
        through the exponential-moment inequality.
        ``stated``: 2 exp(-lam^2 / n), the sharper constant sometimes quoted
        for c = 1. It is not a valid bound for coin tossing; it
        is exposed so that the discrepancy can be measured.
    """
    _check_common(n, lam)
    if c <= 0:
        raise ValueError("c must be positive")
    if variant == "classic":
        value = 2.0 * math.exp(-lam * lam / (2.0 * n * c * c))
    elif variant == "downgraded":
        value = 2.0 * math.exp(-(lam * lam / (2.0 * n)) / (2.0 * math.exp(c)))
    elif variant == "stated":
        value = 2.0 * math.exp(-lam * lam / n)
    else:
        raise ValueError(f"unknown variant {variant!r}")
    return _tail(value, f"azuma_{variant}")


def extended_bound(n, lam, delta, K):
    """2 exp(-(delta^2 / 4K^2) lam^2 / n) for drift-Lipschitz walks."""
    _check_common(n, lam)
    if delta <= 0:
        raise ValueError("delta must be positive")
    if K < 1:
        raise ValueError("K must be >= 1")
    value = 2.0 * math.exp(-(delta * delta / (4.0 * K * K)) * lam * lam / n)
    return _tail(value, "extended")


def optimal_t(lam, n, delta, K):
    """Minimiser of -t*lam + n t^2 K^2/delta^2, clamped to [0, delta].

    Returns ``(t, clamped)``; clamping happens when the unconstrained
    minimiser leaves the range where the moment inequality holds.
    """
    _check_common(n, lam)
    t = lam * delta * delta / (2.0 * n * K * K)
    if t > delta:
        return float(delta), True
    return float(t), False


def neighborhood_bound(n, lam, c, N, eps=None):
    """Lower bound (1 - 2 e^{-lam^2/(4cN)})^n on staying within lam.

    The bound is only claimed for ``sqrt(N) << lam < eps*N``. Outside that
    window the value is still returned but ``valid`` is False. A
    nonpositive base raises :class:`InvalidRegime`.
    """
    _check_common(n, lam)
    if N < 1 or c <= 0:
        raise ValueError("need N >= 1 and c > 0")
    q = 2.0 * math.exp(-lam * lam / (4.0 * c * N))
    if q >= 1.0:
        raise InvalidRegime(f"base 1 - 2exp(-lam^2/4cN) = {1 - q:.4g} is not positive")
    value = math.exp(n * math.log1p(-q))
    flags = [f"window_factor={WINDOW_FACTOR}"]
    valid, reason = True, ""
    if lam < WINDOW_FACTOR * math.sqrt(N):
        valid, reason = False, f"lambda < {WINDOW_FACTOR}*sqrt(N)"
    elif eps is not None and lam >= eps * N:
        valid, reason = False, "lambda >= eps*N"
    return BoundValue(value, "neighborhood", valid, reason, tuple(flags))


def evaluate(kind, *, n, lam, params: BoundParams, N=None):
    """Dispatch by bound kind; used by the experiment runner."""
    if kind == "extended":
        return extended_bound(n, lam, params.delta, params.K)
    if kind.startswith("azuma_"):
        return azuma_bound(n, lam, params.c, kind.split("_", 1)[1])
    if kind == "neighborhood":
        return neighborhood_bound(n, lam, params.c, N)
    raise ValueError(f"unknown bound kind {kind!r}")


def mgf_sweep(kernel, u, deltas, points=20):
    """Check E[e^{tX}|u] <= 1 + (t/delta)^2 E[e^{delta|X|}|u] on a grid.

    For each delta, ``points`` values of t span [-delta, delta]. Returns
    ``(checked, violations, worst_ratio)`` where the ratio is mgf/bound.
    """
    checked = violations = 0
    worst = 0.0
    for d in deltas:
        e = kernel.exp_abs_moment(u, d)
        for t in np.linspace(-d, d, points):
            lin, _ = mgf_bound(t, d, e)
            val = kernel.mgf(u, t)
            checked += 1
            worst = max(worst, val / lin)
            if val > lin * (1 + 1e-12):
                violations += 1
    return checked, violations, worst
