"""Deterministic propagation of the mean path, its variance and the
Lipschitz sensitivity of the mean to a perturbation of the start.

With Var_k = E(u_k - ubar_k)^2 and coefficients evaluated on the mean path,

    Var_{k+1} = a_k Var_k + b_k,
    a_k = 1 + (2 g' + nu''/(2N) - g g''/N) / N,
    b_k = (nu - g^2) / N^2,

starting from Var_{i0} = 0. Third and higher central moments are dropped;
``diagnostics=True`` accumulates an estimate of their size.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import DerivativeError, DomainError
from .models import derivatives


@dataclass(frozen=True)
class MeanPath:
    values: np.ndarray
    order: str = "first"
    i0: int = 0
    #: variance computed jointly for the second-order path, else None
    var: np.ndarray | None = None

    @property
    def n(self):
        return self.i0 + len(self.values) - 1

    def at(self, k):
        return float(self.values[k - self.i0])


@dataclass(frozen=True)
class RecurrenceCoeffs:
    a: np.ndarray
    b: np.ndarray


@dataclass(frozen=True)
class VarianceCurve:
    values: np.ndarray
    coeffs: RecurrenceCoeffs
    i0: int = 0
    source: str = "analytic"
    truncation: np.ndarray | None = None
    flags: tuple = field(default=())

    @property
    def terminal(self):
        return float(self.values[-1])


def _derivs(model, u, source):
    try:
        return derivatives(model, u, source=source)
    except DomainError as exc:
        raise DomainError(f"mean path left the kernel domain: {exc}") from None
    except DerivativeError:
        raise
    except Exception as exc:  # pragma: no cover - defensive
        raise DerivativeError(str(exc)) from exc


def _coeffs(model, u, source):
    N = model.N
    kern = model.displacement
    d = _derivs(model, u, source)
    g = float(kern.g(u))
    nu = float(kern.nu(u))
    a = 1.0 + (2.0 * d.g1 + d.nu2 / (2.0 * N) - g * d.g2 / N) / N
    b = (nu - g * g) / (N * N)
    return a, b, d, g


def _check_horizon(model, i0, n):
    if n < i0:
        raise ValueError("need i0 <= n")
    if n - i0 > 2 * model.N:
        warnings.warn(
            f"horizon n-i0={n - i0} is much larger than N={model.N}; the recurrence "
            "is derived for n ~ N", RuntimeWarning, stacklevel=3)


def mean_path(model, u0=None, i0=0, n=None, order="first", source="auto"):
    """ubar_{k+1} = ubar_k + g(ubar_k)/N (+ g''(ubar_k) Var_k / (2N) for
    ``order="second"``)."""
    u0 = model.u0 if u0 is None else float(u0)
    n = model.scale.n if n is None else n
    _check_horizon(model, i0, n)
    if order not in ("first", "second"):
        raise ValueError("order must be 'first' or 'second'")
    N = model.N
    kern = model.displacement
    steps = n - i0
    vals = np.empty(steps + 1)
    vals[0] = u = u0
    var = np.zeros(steps + 1) if order == "second" else None
    v = 0.0
    for k in range(steps):
        kern.check(u)
        if order == "first":
            u = u + float(kern.g(u)) / N
        else:
            a, b, d, g = _coeffs(model, u, source)
            u_next = u + (g + 0.5 * d.g2 * v) / N
            v = a * v + b
            var[k + 1] = v
            u = u_next
        vals[k + 1] = u
    try:
        kern.check(u)
    except DomainError as exc:
        raise DomainError(f"mean path left the kernel domain: {exc}") from None
    return MeanPath(vals, order, i0, var)


def variance_curve(model, mean: MeanPath, i0=None, n=None, source="auto",
                   diagnostics=False):
    """Iterate Var_{k+1} = a_k Var_k + b_k along ``mean``."""
    i0 = mean.i0 if i0 is None else i0
    n = mean.n if n is None else n
    if i0 < mean.i0 or n > mean.n:
        raise ValueError("mean path does not cover [i0, n]")
    N = model.N
    steps = n - i0
    a = np.empty(steps)
    b = np.empty(steps)
    vals = np.zeros(steps + 1)
    trunc = np.zeros(steps + 1) if diagnostics else None
    src = "analytic"
    v = 0.0
    for j in range(steps):
        u = mean.at(i0 + j)
        a[j], b[j], d, _ = _coeffs(model, u, source)
        if d.source != "analytic":
            src = d.source
        if diagnostics:
            # dropped: g'' E(u-ubar)^3 / N in the cross term and g''' E(u-ubar)^3 / 6 in the mean
            s3 = v ** 1.5
            trunc[j + 1] = trunc[j] + (abs(d.g2) * s3 + abs(d.g3) * s3 / 6.0) / N
        v = a[j] * v + b[j]
        vals[j + 1] = v
    flags = ()
    bound = variance_bound_constant(a, b, N) / N
    if vals[-1] > bound * (1 + 1e-9):
        flags = ("exceeds_C_over_N",)
    return VarianceCurve(vals, RecurrenceCoeffs(a, b), i0, src, trunc, flags)


def variance_bound_constant(a, b, N):
    """C with Var_n <= C/N, from the largest coefficients along the path.

    Var_n <= sum_j b_max a_max^j = b_max * steps * a_max^steps.
    """
    steps = len(a)
    if steps == 0:
        return 0.0
    a_max = max(1.0, float(np.max(a)))
    b_max = float(np.max(b))
    return N * b_max * steps * a_max ** steps


def closed_form_curve(model, mean: MeanPath, i0=None, n=None, source="auto"):
    """Truncated product-sum for Var_k, k = i0..n, with first-order factors:

        Var_n = N^-2 sum_{j=i0}^{n-1} (nu_j - g_j^2) prod_{k=j+1}^{n-1} (1 + 2 g'_k / N)

    evaluated for every k through Var_{k+1} = (1 + 2g'_k/N) Var_k + (nu_k - g_k^2)/N^2.
    """
    i0 = mean.i0 if i0 is None else i0
    n = mean.n if n is None else n
    N = model.N
    kern = model.displacement
    steps = n - i0
    out = np.zeros(steps + 1)
    if steps == 0:
        return out
    us = np.array([mean.at(i0 + j) for j in range(steps)])
    gap = np.asarray(kern.nu(us), float) - np.asarray(kern.g(us), float) ** 2
    fac = np.array([1.0 + 2.0 * _derivs(model, u, source).g1 / N for u in us])
    for j in range(steps):
        out[j + 1] = fac[j] * out[j] + gap[j] / (N * N)
    return out


def closed_form_variance(model, mean: MeanPath, i0=None, n=None, source="auto"):
    """Terminal value of :func:`closed_form_curve`."""
    return float(closed_form_curve(model, mean, i0, n, source)[-1])


def sensitivity_factor(model, mean: MeanPath, i, n, source="auto"):
    """prod_{k=i}^{n-1} (1 + g'(ubar_k)/N): d ubar_n / d ubar_i."""
    if i > n:
        raise ValueError("need i <= n")
    N = model.N
    out = 1.0
    for k in range(i, n):
        out *= 1.0 + _derivs(model, mean.at(k), source).g1 / N
    return out


def effective_lipschitz(model, mean: MeanPath, source="auto"):
    """sup over i < l <= n of |g'(ubar_{l-1})| * prod_{k=i}^{l-2} (1 + g'_k/N).

    This is the constant L of |E(X_l|u_i) - E(X_l|u_i')| <= L |u_i - u_i'|
    along the mean path.
    """
    N = model.N
    steps = len(mean.values) - 1
    if steps < 1:
        return 0.0
    g1 = np.array([_derivs(model, mean.values[k], source).g1 for k in range(steps)])
    fac = np.log(np.abs(1.0 + g1 / N))
    # log P_k = sum_{j<k} log fac_j; sens(i, l-1) = P_{l-1}/P_i
    logP = np.concatenate([[0.0], np.cumsum(fac)])[:steps]
    best = np.exp(logP - np.minimum.accumulate(logP))
    return float(np.max(np.abs(g1) * best))


def drift_slope(model, u, i, l, source="auto"):
    """d E(X_l | u_i = u) / du along the mean path started at u.

    Equals g'(ubar_{l-1}) * prod_{k=i}^{l-2} (1 + g'(ubar_k)/N); this is the
    deterministic counterpart of :func:`brwconc.mc.lipschitz_probe`.
    """
    if not i < l:
        raise ValueError("need i < l")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        mp = mean_path(model, u, i, l - 1)
    g1 = _derivs(model, mp.at(l - 1), source).g1
    return g1 * sensitivity_factor(model, mp, i, l - 1, source)


def recurrence_table(model, u0=None, i0=0, n=None, order="first"):
    """Rows (step, u_bar, var, a, b) plus terminal summary."""
    mp = mean_path(model, u0, i0, n, order)
    vc = variance_curve(model, mp)
    rows = []
    for j, u in enumerate(mp.values):
        a = vc.coeffs.a[j] if j < len(vc.coeffs.a) else math.nan
        b = vc.coeffs.b[j] if j < len(vc.coeffs.b) else math.nan
        rows.append((i0 + j, float(u), float(vc.values[j]), float(a), float(b)))
    summary = {
        "u_bar_n": float(mp.values[-1]),
        "var_n": vc.terminal,
        "closed_form_var_n": closed_form_variance(model, mp),
        "sensitivity_i0_n": sensitivity_factor(model, mp, i0, mp.n),
        "effective_lipschitz": effective_lipschitz(model, mp),
        "derivative_source": vc.source,
        "flags": list(vc.flags),
    }
    return rows, summary, mp, vc
