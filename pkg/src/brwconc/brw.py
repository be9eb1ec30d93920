"""Branching random walks: population-weighted expectations E^(M), weighted
tails, the negative-association test and variance comparisons.

Two engines realise the weighted measure prod_{k=1..M} m(u_k) * P.

``paths``
    Plain walks carrying the weight product in log space, averaged by a
    self-normalised estimator.
``population``
    An explicit particle system. Each particle takes one step and then
    splits into Poisson(m(u)) copies at its new position (or, in
    ``expected`` mode, keeps one copy and multiplies its weight by m(u)).
    Systematic resampling holds the count near ``cap`` while preserving the
    total weight.

With unit branching both engines consume random numbers exactly like
:func:`brwconc.mc.simulate_paths`, so every statistic reduces bit-exactly to
its plain counterpart.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import _engine
from .errors import DegenerateWeights
from .models import UnitBranching
from .mc import TailEstimate, tail_from_deviations
from .rng import BLOCK_SIZE, REPLICATE, RESAMPLE, as_rng
from .transfer import TransferOperator

ESS_FLOOR = 100.0
POPULATION_MIN_CAP = 1000


def _weights(logw):
    """Normalised weights from log-weights; None when all are equal."""
    if logw is None or np.all(logw == logw[0]):
        return None
    w = np.exp(logw - logw.max())
    return w / w.sum()


def _ess(w, size):
    return float(size) if w is None else float(1.0 / np.sum(w * w))


def _wmean(x, w):
    return float(np.mean(x)) if w is None else float(np.dot(w, x))


def _wmean_se(x, w):
    """Delta-method standard error of a self-normalised mean."""
    mu = _wmean(x, w)
    if w is None:
        return float(np.std(x, ddof=1) / math.sqrt(len(x))) if len(x) > 1 else 0.0
    return float(math.sqrt(np.sum(w * w * (x - mu) ** 2)))


# --------------------------------------------------------------------------
# weighted samples


@dataclass
class WeightedSample:
    """Terminal data of a weighted run: S_n, u_n and normalised weights.

    ``w`` is None when every weight is equal (in particular for unit
    branching), in which case all statistics use plain averages.
    """

    S: np.ndarray
    u: np.ndarray
    w: np.ndarray | None
    n: int
    horizon: int
    engine: str
    log_norm: float
    """estimate of log E[prod_{k=1..M} m(u_k)]"""
    trials: int
    log_norm_se: float = math.nan
    replicates: list = field(default_factory=list)
    envelope: tuple = (math.nan, math.nan)
    """range of scaled positions visited"""

    @property
    def ess(self):
        return _ess(self.w, len(self.S))

    def mean(self, x):
        return _wmean(x, self.w)


def _resolve(model, horizon_M, n):
    horizon_M = model.scale.M if horizon_M is None else int(horizon_M)
    n = horizon_M if n is None else int(n)
    if horizon_M > model.scale.M:
        raise ValueError(f"horizon {horizon_M} exceeds the model's M={model.scale.M}")
    if not 0 <= n <= horizon_M:
        raise ValueError("need 0 <= n <= horizon_M")
    return horizon_M, n


def weighted_paths(model, horizon_M=None, n=None, trials=1, rng=None, workers=1):
    """Plain walks to generation M with weights prod_{k=1..M} m(u_k)."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    horizon_M, n = _resolve(model, horizon_M, n)
    rng = as_rng(rng)
    out = _engine.run_blocks(model, horizon_M, model.N * model.u0, trials, rng,
                             record=(n,), weights=True, workers=workers)
    Un = out["rec"][n]
    logw = out["logw"]
    top = float(logw.max())
    log_norm = top + math.log(float(np.mean(np.exp(logw - top))))
    return WeightedSample(Un - out["start"], Un / model.N, _weights(logw), n, horizon_M,
                          "paths", log_norm, trials, envelope=out["envelope"])


# --------------------------------------------------------------------------
# explicit population


@dataclass
class Population:
    """One generation of the particle system.

    Particle weights are exp(logw + log_scale); ``marks`` holds each
    particle's ancestral position at the recorded step (unscaled).
    """

    generation: int
    U: np.ndarray
    logw: np.ndarray
    log_scale: float
    marks: np.ndarray
    resample_count: int = 0

    @property
    def count(self):
        return len(self.U)

    @property
    def log_total(self):
        if self.count == 0:
            return -math.inf
        top = float(self.logw.max())
        return self.log_scale + top + math.log(float(np.sum(np.exp(self.logw - top))))

    def weights(self):
        return _weights(self.logw) if self.count else None

    @property
    def ess(self):
        return _ess(self.weights(), self.count)


@dataclass
class PopulationRun:
    final: Population
    summaries: list
    """per generation: (generation, count, log_total_weight, ess, resampled)"""
    resample_log: list
    extinct_at: int | None
    log_Z: float
    """log of the total-weight estimate of E[prod m] per founder"""
    founders: int
    generations: list = field(default_factory=list)
    envelope: tuple = (math.nan, math.nan)


def systematic_resample(w, size, gen):
    """Indices of ``size`` draws from normalised weights ``w`` by systematic
    resampling with one uniform offset."""
    edges = np.cumsum(w)
    edges[-1] = 1.0
    pos = (gen.random() + np.arange(size)) / size
    return np.searchsorted(edges, pos, side="right")


def simulate_population(model, horizon_M=None, cap=10_000, rng=None, founders=None,
                        offspring="poisson", record_step=None, keep=False, min_fraction=0.5):
    """Run the particle system for ``horizon_M`` generations.

    Particles in chunk j (indices j*BLOCK_SIZE onwards) always draw from the
    j-th block generator of ``rng``, so unit branching reproduces
    :func:`brwconc.mc.simulate_paths` bit-exactly. ``cap=None`` disables
    population control. Extinction ends the run early and is reported in
    ``extinct_at``.
    """
    if offspring not in ("poisson", "expected"):
        raise ValueError("offspring must be 'poisson' or 'expected'")
    if cap is not None and cap < POPULATION_MIN_CAP:
        raise ValueError(f"cap must be >= {POPULATION_MIN_CAP}")
    horizon_M, record_step = _resolve(model, horizon_M, record_step)
    rng = as_rng(rng)
    founders = (cap if cap is not None else 1) if founders is None else int(founders)
    lo, hi = _engine.domain_bounds(model)
    N = model.N
    unit = model.branching.is_unit
    gens = []
    resample_rng = rng.child(RESAMPLE)

    def gen_for(j):
        while len(gens) <= j:
            gens.append(rng.generator(len(gens)))
        return gens[j]

    U = np.full(founders, float(N * model.u0))
    pop = Population(0, U, np.zeros(founders), 0.0, U.copy())
    summaries = [(0, founders, pop.log_total, pop.ess, False)]
    history = [pop] if keep else []
    resample_log = []
    extinct_at = None
    env = [model.u0, model.u0]
    for k in range(1, horizon_M + 1):
        Unew = np.empty_like(pop.U)
        copies = None if unit or offspring == "expected" else np.empty(pop.count, np.int64)
        for j, s in enumerate(range(0, pop.count, BLOCK_SIZE)):
            e = min(s + BLOCK_SIZE, pop.count)
            gen = gen_for(j)
            Unew[s:e], _ = _engine.step(model, pop.U[s:e], gen, lo, hi)
            if copies is not None:
                copies[s:e] = gen.poisson(model.branching.m(Unew[s:e] / N))
        if len(Unew):
            env[0] = min(env[0], float(Unew.min()) / N)
            env[1] = max(env[1], float(Unew.max()) / N)
        logw, marks = pop.logw, pop.marks
        if k == record_step:
            marks = Unew.copy()
        if copies is not None:
            Unew = np.repeat(Unew, copies)
            logw = np.repeat(logw, copies)
            marks = np.repeat(marks, copies)
        elif not unit:
            logw = logw + model.branching.log_m(Unew / N)
        pop = Population(k, Unew, logw, pop.log_scale, marks, pop.resample_count)
        if pop.count == 0:
            extinct_at = k
            summaries.append((k, 0, -math.inf, 0.0, False))
            if keep:
                history.append(pop)
            break
        # renormalise by the mean weight
        top = float(pop.logw.max())
        shift = top + math.log(float(np.mean(np.exp(pop.logw - top))))
        pop.logw = pop.logw - shift
        pop.log_scale += shift
        resampled = False
        if cap is not None:
            w = pop.weights()
            if offspring == "poisson":
                need = pop.count > cap or pop.count < min_fraction * cap
            else:
                need = w is not None and pop.ess < 0.5 * pop.count
            if need:
                size = cap if offspring == "poisson" else pop.count
                ww = np.full(pop.count, 1.0 / pop.count) if w is None else w
                log_total = pop.log_total
                idx = systematic_resample(ww, size, resample_rng.generator(k))
                resample_log.append({"generation": k, "before": pop.count, "after": size,
                                     "ess_before": pop.ess})
                pop = Population(k, pop.U[idx], np.zeros(size), log_total - math.log(size),
                                 pop.marks[idx], pop.resample_count + 1)
                resampled = True
        summaries.append((k, pop.count, pop.log_total, pop.ess, resampled))
        if keep:
            history.append(pop)
    log_Z = (pop.log_total - math.log(founders)) if extinct_at is None else -math.inf
    return PopulationRun(pop, summaries, resample_log, extinct_at, log_Z, founders, history,
                         tuple(env))


def population_sample(model, horizon_M=None, n=None, cap=10_000, rng=None, replicates=1,
                      offspring="poisson", founders=None, min_fraction=0.5):
    """Pool the final generation of ``replicates`` independent populations.

    Each replicate contributes its particles weighted by its own total
    weight share; replicate-level spread gives the standard errors used by
    :func:`weighted_expectation`.
    """
    horizon_M, n = _resolve(model, horizon_M, n)
    rng = as_rng(rng)
    runs = []
    for r in range(replicates):
        sub = rng if replicates == 1 else rng.child(REPLICATE, r)
        runs.append(simulate_population(model, horizon_M, cap, sub, founders, offspring,
                                        record_step=n, min_fraction=min_fraction))
    alive = [r for r in runs if r.extinct_at is None]
    if not alive:
        raise DegenerateWeights("every replicate went extinct")
    logw = np.concatenate([r.final.logw + r.final.log_scale - r.final.log_total for r in alive])
    marks = np.concatenate([r.final.marks for r in alive])
    U0 = model.N * model.u0
    logs = np.array([r.log_Z for r in runs])
    top = float(np.max(logs))
    log_norm = top + math.log(float(np.mean(np.exp(logs - top))))
    se = (float(np.std(np.exp(logs - top), ddof=1) / math.sqrt(len(runs)))
          / math.exp(log_norm - top)) if len(runs) > 1 else math.nan
    env = (min(r.envelope[0] for r in runs), max(r.envelope[1] for r in runs))
    return WeightedSample(marks - U0, marks / model.N, _weights(logw), n, horizon_M,
                          "population", log_norm, len(marks), se, runs, env)


# --------------------------------------------------------------------------
# estimators


@dataclass(frozen=True)
class WeightedEstimate:
    value: float
    se: float
    ess: float
    horizon: int
    trials: int
    engine: str
    log_norm: float = math.nan


def weighted_expectation(model, f=None, horizon_M=None, trials=10_000, rng=None, n=None,
                         ess_floor=ESS_FLOOR, engine="paths", cap=10_000, replicates=1,
                         workers=1):
    """Self-normalised estimate of E^(M)(f(u_n)).

    ``f`` maps an array of u_n to values (identity by default). With the
    ``paths`` engine the standard error is the delta-method one; with the
    ``population`` engine and several replicates it is the spread of
    replicate estimates.
    """
    f = (lambda u: u) if f is None else f
    if engine == "paths":
        sample = weighted_paths(model, horizon_M, n, trials, rng, workers)
    elif engine == "population":
        sample = population_sample(model, horizon_M, n, cap, rng, replicates)
    else:
        raise ValueError(f"unknown engine {engine!r}")
    return _estimate(sample, f, ess_floor, model.N)


def _estimate(sample, f, ess_floor, N):
    ess = sample.ess
    if ess < ess_floor:
        raise DegenerateWeights(
            f"effective sample size {ess:.1f} below floor {ess_floor}; "
            "use the population engine or a shorter horizon")
    vals = np.asarray(f(sample.u), float)
    value = sample.mean(vals)
    if sample.engine == "population" and len(sample.replicates) > 1:
        reps = []
        for r in sample.replicates:
            if r.extinct_at is None:
                reps.append(_wmean(np.asarray(f(r.final.marks / N), float), r.final.weights()))
        se = float(np.std(reps, ddof=1) / math.sqrt(len(reps)))
    else:
        se = _wmean_se(vals, sample.w)
    return WeightedEstimate(value, se, ess, sample.horizon, sample.trials, sample.engine,
                            sample.log_norm)


def weighted_sample(model, horizon_M=None, n=None, trials=10_000, rng=None, engine="paths",
                    cap=10_000, replicates=1, workers=1):
    if engine == "paths":
        return weighted_paths(model, horizon_M, n, trials, rng, workers)
    if engine == "population":
        return population_sample(model, horizon_M, n, cap, rng, replicates)
    raise ValueError(f"unknown engine {engine!r}")


def sample_tail(sample, lam, center=None, level=0.95, ess_floor=0.0):
    """Weighted P(|S_n - center| >= lam); center defaults to the weighted mean."""
    if sample.ess < ess_floor:
        raise DegenerateWeights(f"effective sample size {sample.ess:.1f} below {ess_floor}")
    if center is None:
        center = sample.mean(sample.S)
    return tail_from_deviations(np.abs(sample.S - center), lam, center, sample.w, level)


def brw_tail(model, horizon_M=None, n=None, lam=0.0, engine="paths", trials=10_000, rng=None,
             cap=10_000, replicates=1, ess_floor=ESS_FLOOR) -> TailEstimate:
    """Pr^(M)(|S_n - Sbar_n| >= lam) with Sbar_n = E^(M)(S_n)."""
    sample = weighted_sample(model, horizon_M, n, trials, rng, engine, cap, replicates)
    return sample_tail(sample, lam, ess_floor=ess_floor)


# --------------------------------------------------------------------------
# negative association


DEFAULT_F_FAMILY = {
    "x": lambda x: x,
    "x^2": lambda x: x * x,
    "exp(x/2)": lambda x: np.exp(x / 2.0),
    "1{x>1}": lambda x: (x > 1.0).astype(float),
}


@dataclass(frozen=True)
class AssociationReport:
    f: str
    lhs: float
    """E[f(|X_i|) Z(X_i)]"""
    rhs: float
    """E[f(|X_i|)] E[Z(X_i)]"""
    margin: float
    se: float
    z: float
    trials: int
    z_method: str


def jackknife_margin(fx, Z):
    """margin = mean(f) mean(Z) - mean(f Z) and its leave-one-out jackknife SE."""
    T = len(fx)
    sf, sz, sfz = fx.sum(), Z.sum(), (fx * Z).sum()
    margin = (sf / T) * (sz / T) - sfz / T
    loo = ((sf - fx) / (T - 1)) * ((sz - Z) / (T - 1)) - (sfz - fx * Z) / (T - 1)
    se = math.sqrt((T - 1) / T * float(np.sum((loo - loo.mean()) ** 2)))
    return float(margin), se


def descendant_weights(model, U, remaining, rng, z_method="transfer", grid=None):
    """Z for particles at unscaled positions ``U`` with ``remaining`` generations.

    ``transfer`` evaluates the expected weight product E[prod m | U] on a
    grid (see :mod:`brwconc.transfer`); ``product`` realises one
    continuation path per particle and returns its weight product.
    """
    if remaining == 0:
        return np.ones(len(U))
    if z_method == "transfer":
        op = grid or TransferOperator(model, model.N * model.u0, model.scale.M)
        return op.descendant_weight(remaining)(U)
    if z_method == "product":
        out = _engine.run_blocks(model, remaining, U, len(U), rng, weights=True)
        return np.exp(out["logw"])
    raise ValueError(f"unknown z_method {z_method!r}")


def negative_association_test(model, i=1, horizon_M=None, f_family=None, trials=100_000,
                              rng=None, z_method="transfer", u_prev=None):
    """Estimate both sides of E[f(|X_i|) Z(X_i)] <= E[f(|X_i|)] E[Z(X_i)].

    X_i is drawn from p(.|u_{i-1}) with u_{i-1} = ``u_prev`` (the model's
    start when i = 1, else required). Z(X_i) is the expected descendant
    weight prod_{k=i+1..M} m(u_k) continued from u_i. A negative margin
    beyond noise is a violation of negative association.
    """
    horizon_M, _ = _resolve(model, horizon_M, None)
    if not 1 <= i < horizon_M:
        raise ValueError("need 1 <= i < horizon_M")
    if u_prev is None:
        if i != 1:
            raise ValueError("u_prev is required when i > 1")
        u_prev = model.u0
    rng = as_rng(rng)
    f_family = DEFAULT_F_FAMILY if f_family is None else f_family
    N = model.N
    gen = rng.generator(0)
    U_prev = np.full(trials, N * float(u_prev))
    lo, hi = _engine.domain_bounds(model)
    U_i, _ = _engine.step(model, U_prev, gen, lo, hi)
    X = np.abs(U_i - U_prev)
    grid = None
    if z_method == "transfer":
        grid = TransferOperator(model.with_u0(u_prev), N * float(u_prev), horizon_M - i + 1)
    Z = descendant_weights(model, U_i, horizon_M - i, rng.child(1), z_method, grid)
    Z = Z / Z.mean()
    reports = []
    for name, fn in f_family.items():
        fx = np.asarray(fn(X), float)
        margin, se = jackknife_margin(fx, Z)
        lhs = float(np.mean(fx * Z))
        rhs = float(np.mean(fx) * np.mean(Z))
        reports.append(AssociationReport(name, lhs, rhs, margin, se,
                                         margin / se if se > 0 else 0.0, trials, z_method))
    return reports


# --------------------------------------------------------------------------
# variance comparison and tower property


@dataclass(frozen=True)
class VarianceComparison:
    var_weighted: float
    var_plain: float
    se_weighted: float
    se_plain: float
    ess: float
    engine: str

    @property
    def separation(self):
        """(var_weighted - var_plain) in units of the combined SE."""
        se = math.hypot(self.se_weighted, self.se_plain)
        return (self.var_weighted - self.var_plain) / se if se > 0 else 0.0


def _wvar(x, w):
    """Self-normalised variance and its delta-method SE."""
    mu = _wmean(x, w)
    d2 = (x - mu) ** 2
    v = _wmean(d2, w)
    if w is None:
        se = float(np.std(d2, ddof=1) / math.sqrt(len(x)))
    else:
        se = float(math.sqrt(np.sum(w * w * (d2 - v) ** 2)))
    return v, se


def variance_comparison(model, horizon_M=None, n=None, trials=100_000, rng=None,
                        engine="paths", cap=10_000, replicates=10, ess_floor=ESS_FLOOR):
    """Variance of u_n under E^(M) against the unit-branching variance.

    The plain side always runs the ``paths`` engine with unit branching on
    the same stream. With the ``paths`` engine both sides share the same
    walks; for unit branching the two numbers are then equal exactly.
    """
    horizon_M, n = _resolve(model, horizon_M, n)
    rng = as_rng(rng)
    plain_model = model.with_branching(UnitBranching())
    if engine == "paths":
        s = weighted_paths(model, horizon_M, n, trials, rng)
        if s.ess < ess_floor:
            raise DegenerateWeights(f"effective sample size {s.ess:.1f} below {ess_floor}")
        vw, sew = _wvar(s.u, s.w)
        vp, sep = _wvar(s.u, None)
        return VarianceComparison(vw, vp, sew, sep, s.ess, engine)
    if engine == "population":
        s = population_sample(model, horizon_M, n, cap, rng, replicates)
        reps = [_wvar(r.final.marks / model.N, r.final.weights())[0]
                for r in s.replicates if r.extinct_at is None]
        vw = _wvar(s.u, s.w)[0]
        sew = float(np.std(reps, ddof=1) / math.sqrt(len(reps))) if len(reps) > 1 \
            else _wvar(s.u, s.w)[1]
        p = weighted_paths(plain_model, horizon_M, n, trials, rng)
        vp, sep = _wvar(p.u, None)
        return VarianceComparison(vw, vp, sew, sep, s.ess, engine)
    raise ValueError(f"unknown engine {engine!r}")


@dataclass(frozen=True)
class TowerCheck:
    direct: float
    direct_se: float
    two_stage: float
    two_stage_se: float

    @property
    def z(self):
        se = math.hypot(self.direct_se, self.two_stage_se)
        return (self.direct - self.two_stage) / se if se > 0 else 0.0


def tower_check(model, i, f=None, horizon_M=None, n=None, outer=2_000, inner=200,
                direct_trials=100_000, rng=None):
    """E^(M)(f(u_n)) directly and as E^(M)(E^(M)(f(u_n) | u_i)).

    The two-stage estimate draws ``outer`` walks to step i, restarts
    ``inner`` continuations from each u_i to generation M, and combines the
    inner self-normalised conditional means with outer weights
    prod_{k<=i} m(u_k) times the inner mean weight.
    """
    horizon_M, n = _resolve(model, horizon_M, n)
    if not 0 <= i <= n:
        raise ValueError("need 0 <= i <= n")
    f = (lambda u: u) if f is None else f
    rng = as_rng(rng)
    direct = _estimate(weighted_paths(model, horizon_M, n, direct_trials, rng), f, 0.0, model.N)
    N = model.N
    first = _engine.run_blocks(model, i, N * model.u0, outer, rng.child(1), weights=True)
    Ui = first["U"]
    starts = np.repeat(Ui, inner)
    rest = _engine.run_blocks(model, horizon_M - i, starts, outer * inner, rng.child(2),
                              record=(n - i,), weights=True)
    lw_in = rest["logw"].reshape(outer, inner)
    fv = np.asarray(f(rest["rec"][n - i] / N), float).reshape(outer, inner)
    top = float(max(lw_in.max(), 0.0))
    w_in = np.exp(lw_in - top)
    lw_out = first["logw"]
    w_out = np.exp(lw_out - lw_out.max())
    num = w_out * (w_in * fv).mean(axis=1)
    den = w_out * w_in.mean(axis=1)
    value = float(num.sum() / den.sum())
    # ratio-estimator SE over outer samples
    resid = (num - value * den) / den.mean()
    se = float(np.std(resid, ddof=1) / math.sqrt(outer))
    return TowerCheck(direct.value, direct.se, value, se)
