"""Deterministic transfer-operator evaluation of branching weights.

With T the one-step operator (T f)(U) = E[m(U'/N) f(U') | U], the expected
descendant weight of a particle at U with r generations to go is
Z_r = T^r 1, and the weighted occupation measure after n steps is
rho_n = (T^*)^n delta_{U_0}. Both are computed on a position grid. Lattice
kernels use the integer grid and the result is exact up to float rounding;
continuous kernels use linear interpolation between grid points.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import sparse

from ._engine import domain_bounds
from .recurrence import mean_path

#: grid spacing for continuous kernels, in units of the step standard deviation
CONTINUOUS_SPACING = 1.0 / 20.0
#: half-width of the continuous grid in standard deviations of S_steps
CONTINUOUS_WIDTH = 10.0


def _is_lattice(kern):
    return bool(getattr(kern, "lattice", False))


def _grid(model, U0, steps, h):
    lo, hi = domain_bounds(model)
    kern = model.displacement
    if _is_lattice(kern):
        h = 1.0
        r = steps * kern.max_abs_step()
        a, b = U0 - r, U0 + r
    else:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            mp = mean_path(model, U0 / model.N, 0, steps)
        gap = float(np.max(np.asarray(kern.nu(mp.values), float)
                           - np.asarray(kern.g(mp.values), float) ** 2))
        sd = math.sqrt(max(gap, 1e-12))
        if h is None:
            h = CONTINUOUS_SPACING * sd
        half = CONTINUOUS_WIDTH * sd * math.sqrt(steps) + 5 * sd
        a = model.N * float(mp.values.min()) - half
        b = model.N * float(mp.values.max()) + half
    # snap to U0 + h*j so the start is a grid point, then add the domain ends
    ja = math.floor(max(a, lo) - U0) / h if math.isfinite(lo) else (a - U0) / h
    jb = math.ceil(min(b, hi) - U0) / h if math.isfinite(hi) else (b - U0) / h
    x = U0 + h * np.arange(math.floor(ja), math.ceil(jb) + 1)
    x = x[(x >= lo) & (x <= hi)]
    extra = [v for v in (lo, hi) if math.isfinite(v) and a <= v <= b]
    if extra:
        x = np.unique(np.concatenate([x, extra]))
    return x, h


def _hat(x, y):
    """Indices and weights spreading each point of ``y`` onto grid ``x``."""
    y = np.clip(y, x[0], x[-1])
    j = np.clip(np.searchsorted(x, y, side="right") - 1, 0, len(x) - 2)
    span = x[j + 1] - x[j]
    f = np.clip((y - x[j]) / span, 0.0, 1.0)
    return j, f


class TransferOperator:
    """One-step weighted transition on a grid covering ``steps`` moves from U0.

    ``U0`` is unscaled. The matrix entry T[a, b] is the probability of moving
    from grid point a to b times m(x_b / N); children leaving the kernel
    domain are clamped to it, exactly as the path engines do.
    """

    def __init__(self, model, U0, steps, h=None):
        if steps < 0:
            raise ValueError("steps must be nonnegative")
        self.model = model
        self.U0 = float(U0)
        self.steps = int(steps)
        self.x, self.h = _grid(model, self.U0, max(self.steps, 1), h)
        self.start = int(np.argmin(np.abs(self.x - self.U0)))
        self.T = self._build()

    def _build(self):
        model = self.model
        N = model.N
        lo, hi = domain_bounds(model)
        x = self.x
        G = len(x)
        off, p = model.displacement.nodes(x / N)
        y = np.clip(x[:, None] + off, lo, hi)
        w = p * np.asarray(model.branching.m(y / N), float)
        rows = np.repeat(np.arange(G), off.shape[1])
        if G == 1:
            return sparse.csr_matrix((np.array([w.sum()]), ([0], [0])), shape=(1, 1))
        j, f = _hat(x, y.ravel())
        wv = w.ravel()
        data = np.concatenate([wv * (1.0 - f), wv * f])
        r = np.concatenate([rows, rows])
        c = np.concatenate([j, j + 1])
        return sparse.csr_matrix((data, (r, c)), shape=(G, G))

    def log_descendant_weight(self, remaining):
        """log Z_r on the grid, Z_r(U) = E[prod_{k=1..r} m(u_k) | U_0 = U]."""
        z = np.ones(len(self.x))
        offset = 0.0
        for _ in range(int(remaining)):
            z = self.T @ z
            top = float(z.max())
            if top <= 0:
                return np.full(len(self.x), -np.inf)
            z /= top
            offset += math.log(top)
        with np.errstate(divide="ignore"):
            return np.log(z) + offset

    def descendant_weight(self, remaining):
        """Callable U -> Z_r(U), interpolated in log space."""
        logz = self.log_descendant_weight(remaining)
        x = self.x

        def Z(U):
            return np.exp(np.interp(np.asarray(U, float), x, logz))

        return Z

    def forward(self, n):
        """Weighted occupation after n steps: (rho normalised, log total mass).

        rho_n(x) is proportional to E[prod_{k=1..n} m(u_k); U_n = x].
        """
        rho = np.zeros(len(self.x))
        rho[self.start] = 1.0
        log_mass = 0.0
        Tt = self.T.T.tocsr()
        for _ in range(int(n)):
            rho = Tt @ rho
            s = float(rho.sum())
            if s <= 0:
                raise ArithmeticError("weighted mass vanished")
            rho /= s
            log_mass += math.log(s)
        return rho, log_mass


@dataclass(frozen=True)
class WeightedMarginal:
    """Law of u_n under the measure reweighted by prod_{k=1..M} m(u_k)."""

    u: np.ndarray
    prob: np.ndarray
    log_norm: float
    """log E[prod_{k=1..M} m(u_k)]"""
    n: int
    horizon: int

    def expect(self, f=None):
        vals = self.u if f is None else np.asarray(f(self.u), float)
        return float(np.dot(self.prob, vals))

    @property
    def mean(self):
        return self.expect()

    @property
    def var(self):
        m = self.mean
        return float(np.dot(self.prob, (self.u - m) ** 2))


def weighted_marginal(model, n=None, horizon_M=None, u0=None, h=None):
    """Exact (lattice) or grid-accurate law of u_n under E^(M)."""
    horizon_M = model.scale.M if horizon_M is None else horizon_M
    n = model.scale.n if n is None else n
    if not 0 <= n <= horizon_M:
        raise ValueError("need 0 <= n <= horizon_M")
    u0 = model.u0 if u0 is None else u0
    op = TransferOperator(model, model.N * u0, horizon_M, h)
    rho, log_mass = op.forward(n)
    logz = op.log_descendant_weight(horizon_M - n)
    finite = np.isfinite(logz)
    top = float(logz[finite].max()) if finite.any() else 0.0
    w = rho * np.where(finite, np.exp(logz - top), 0.0)
    s = float(w.sum())
    return WeightedMarginal(op.x / model.N, w / s, log_mass + top + math.log(s), n, horizon_M)
