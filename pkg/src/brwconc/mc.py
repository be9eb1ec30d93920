"""Random-walk Monte Carlo: path ensembles, tail estimates with exact
binomial intervals, Lipschitz probes and Doob-increment probes."""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass

import numpy as np
from scipy import stats

from . import _engine
from .errors import BudgetError
from .models import exp_abs_moment
from .rng import DOOB, PAIR, as_rng

DOOB_COST_CAP = 5 * 10 ** 8


def fingerprint(model, n, rng):
    blob = json.dumps({"model": model.to_dict(), "n": n, "rng": rng.to_dict()},
                      sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class PathEnsemble:
    S: np.ndarray
    """terminal sums S_n = U_n - U_0 (unscaled)"""
    u_n: np.ndarray
    trials: int
    n: int
    fingerprint: str
    positions: np.ndarray | None = None
    """scaled positions u_0..u_n per path when kept"""
    last: np.ndarray | None = None
    clamped: int = 0
    envelope: tuple = (0.0, 0.0)
    N: int = 1


def simulate_paths(model, n=None, trials=1, rng=None, keep_full=False, workers=1, u0=None):
    """Simulate ``trials`` independent walks of ``n`` steps.

    Paths start at U_0 = N*u0 and move by X_k ~ p(.|u_{k-1}). Positions
    leaving the kernel domain are clamped to it and counted in
    ``clamped``.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    rng = as_rng(rng)
    n = model.scale.n if n is None else n
    u0 = model.u0 if u0 is None else u0
    out = _engine.run_blocks(model, n, model.N * u0, trials, rng,
                             keep_full=keep_full, workers=workers)
    return PathEnsemble(
        S=out["U"] - out["start"],
        u_n=out["U"] / model.N,
        trials=trials,
        n=n,
        fingerprint=fingerprint(model, n, rng),
        positions=out["full"],
        last=out["last"],
        clamped=out["clamped"],
        envelope=out["envelope"],
        N=model.N,
    )


@dataclass(frozen=True)
class TailEstimate:
    lam: float
    hits: float
    trials: float
    p_hat: float
    ci_low: float
    ci_high: float
    center: float
    weighted: bool = False


def clopper_pearson(hits, trials, level=0.95):
    """Exact binomial interval; accepts fractional counts for weighted data."""
    alpha = 1.0 - level
    lo = 0.0 if hits <= 0 else float(stats.beta.ppf(alpha / 2, hits, trials - hits + 1))
    hi = 1.0 if hits >= trials else float(stats.beta.ppf(1 - alpha / 2, hits + 1, trials - hits))
    return lo, hi


def tail_from_deviations(dev, lam, center, weights=None, level=0.95):
    """Tail estimate of P(dev >= lam), optionally under normalised weights.

    With equal weights this is exactly the unweighted count.
    """
    hit = dev >= lam
    if weights is None or np.all(weights == weights[0]):
        hits = int(np.count_nonzero(hit))
        trials = int(dev.size)
        p = hits / trials
        lo, hi = clopper_pearson(hits, trials, level)
        return TailEstimate(float(lam), hits, trials, p, lo, hi, float(center),
                            weights is not None)
    wsum = weights.sum()
    p = float(np.sum(weights[hit]) / wsum)
    ess = float(wsum * wsum / np.sum(weights * weights))
    lo, hi = clopper_pearson(p * ess, ess, level)
    return TailEstimate(float(lam), p * ess, ess, p, lo, hi, float(center), True)


def empirical_tail(ensemble, center=None, lam=0.0, level=0.95):
    """Fraction of paths with |S_n - center| >= lam with a Clopper-Pearson CI.

    ``center`` defaults to the ensemble mean of S_n.
    """
    if ensemble.trials < 1:
        raise ValueError("empty ensemble")
    if center is None:
        center = float(ensemble.S.mean())
    return tail_from_deviations(np.abs(ensemble.S - center), lam, center, level=level)


def binomial_two_sided_tail(n, lam):
    """Exact P(|S_n| >= lam) for n fair coin tosses."""
    k = math.ceil((n + lam) / 2 - 1e-12)
    upper = float(stats.binom.sf(k - 1, n, 0.5))
    if lam == 0:
        return 1.0
    return min(1.0, 2.0 * upper)


def joint_containment(ensemble, lam, centers=None):
    """P(|S_k - E S_k| <= lam for every k = 1..n) from full paths.

    ``centers`` gives E S_k for k = 0..n (defaults to per-step sample
    means). Returns (p_hat, ci_low, ci_high, hits, trials).
    """
    if ensemble.positions is None:
        raise ValueError("joint containment needs keep_full=True")
    S = (ensemble.positions - ensemble.positions[:, :1]) * ensemble.N
    if centers is None:
        centers = S.mean(axis=0)
    inside = np.all(np.abs(S[:, 1:] - np.asarray(centers)[1:]) <= lam, axis=1)
    hits = int(inside.sum())
    lo, hi = clopper_pearson(hits, ensemble.trials)
    return hits / ensemble.trials, lo, hi, hits, ensemble.trials


@dataclass(frozen=True)
class ProbeResult:
    value: float
    se: float
    diff: float
    trials: int


def lipschitz_probe(model, i, l, u, u_prime, trials, rng=None, crn=True):
    """|E(X_l | u_i=u) - E(X_l | u_i=u')| / |u - u'| by paired simulation.

    With ``crn`` both starts use the same random stream (common random
    numbers); every catalog sampler is driven by inverse transforms or
    standard normals, so paired paths stay coupled.
    """
    if not i < l:
        raise ValueError("need i < l")
    if u == u_prime:
        raise ValueError("need u != u_prime")
    rng = as_rng(rng)
    steps = l - i
    a = simulate_paths(model, steps, trials, rng, u0=u).last
    b = simulate_paths(model, steps, trials, rng if crn else rng.child(PAIR), u0=u_prime).last
    du = abs(u - u_prime)
    diff = float(a.mean() - b.mean())
    if crn:
        se = float(np.std(a - b, ddof=1) / math.sqrt(trials))
    else:
        se = float(math.sqrt(a.var(ddof=1) / trials + b.var(ddof=1) / trials))
    return ProbeResult(abs(diff) / du, se / du, diff, trials)


@dataclass(frozen=True)
class DoobIncrement:
    i: int
    d: float
    se: float
    sub_trials: int
    x: float


def _remaining_mean(model, U, steps, sub_trials, rng):
    if steps == 0:
        return 0.0, 0.0
    out = _engine.run_blocks(model, steps, U, sub_trials, rng)
    rem = out["U"] - out["start"]
    return float(rem.mean()), float(rem.std(ddof=1) / math.sqrt(sub_trials))


def restart_means(model, path, sub_trials, rng, ks):
    """R_k = restart estimate of E(S_n - S_k | u_k) with its standard error."""
    path = np.asarray(path, float)
    n = len(path) - 1
    return {k: _remaining_mean(model, path[k] * model.N, n - k, sub_trials, rng.child(DOOB, k))
            for k in ks}


def doob_increments(model, path, sub_trials, rng=None, indices=None, cost_cap=DOOB_COST_CAP):
    """Estimate d_i = E_i(X_i+...+X_n) - E_{i-1}(X_i+...+X_n) along a path.

    ``path`` holds scaled positions u_0..u_n. With R_k the restart estimate
    of E(S_n - S_k | u_k), d_i = X_i + R_i - R_{i-1}. Each R_k comes from
    ``sub_trials`` restarts on its own stream.
    """
    if sub_trials < 100:
        raise ValueError("sub_trials must be >= 100")
    rng = as_rng(rng)
    path = np.asarray(path, float)
    n = len(path) - 1
    indices = range(1, n + 1) if indices is None else sorted(set(indices))
    needed = sorted({k for i in indices for k in (i - 1, i)})
    cost = sum((n - k) * sub_trials for k in needed)
    if cost > cost_cap:
        raise BudgetError(f"nested simulation cost {cost} exceeds cap {cost_cap}")
    R = restart_means(model, path, sub_trials, rng, needed)
    U = path * model.N
    out = []
    for i in indices:
        x = U[i] - U[i - 1]
        (ri, si), (rp, sp) = R[i], R[i - 1]
        out.append(DoobIncrement(i, float(x + ri - rp), math.hypot(si, sp), sub_trials, float(x)))
    return out


def doob_sum_check(model, path, sub_trials, rng=None, mean_trials=100_000):
    """Compare sum_i d_i with S_n - E S_n, E S_n from an independent run.

    The sum telescopes to S_n - R_0, so the comparison error combines the
    standard errors of R_0 and of the independent mean.
    """
    rng = as_rng(rng)
    path = np.asarray(path, float)
    incs = doob_increments(model, path, sub_trials, rng)
    r0_se = restart_means(model, path, sub_trials, rng, [0])[0][1]
    n = len(path) - 1
    S_n = (path[-1] - path[0]) * model.N
    es, es_se = _remaining_mean(model, path[0] * model.N, n, mean_trials,
                                rng.child(DOOB, 1 << 20))
    total = sum(d.d for d in incs)
    se = math.hypot(r0_se, es_se)
    return {"sum_d": total, "deviation": S_n - es, "se": se,
            "z": (total - (S_n - es)) / se if se > 0 else 0.0}


@dataclass(frozen=True)
class KMeasurement:
    K: float
    u_at_max: float
    envelope: tuple
    t: float


def measure_k(model, envelope, delta, A=1.0, points=201):
    """K = sup over the position envelope of E[exp(delta*A*|X|) | u]."""
    lo, hi = envelope
    d_lo, d_hi = model.displacement.domain
    grid = np.linspace(max(lo, d_lo), min(hi, d_hi), points)
    t = delta * A
    vals = [exp_abs_moment(model, float(u), t) for u in grid]
    j = int(np.argmax(vals))
    return KMeasurement(float(vals[j]), float(grid[j]), (float(lo), float(hi)), float(t))
