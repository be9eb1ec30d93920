"""Process models: displacement kernels p(x|u), branching kernels m(u) and
the quantities derived from them (drift g, second moment nu, exponential
moments, the one-step branching mean beta, derivatives).

A model is a value object. Kernels are frozen dataclasses so they pickle
cleanly into worker processes and round-trip through config files.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import ClassVar

import numpy as np
from scipy import integrate, special, stats

from .errors import ConfigError, DerivativeError, DivergenceError, DomainError

INF = math.inf

QUAD_RTOL = 1e-10
BETA_DRAWS = 100_000
# divergence cap for exponential moments
MOMENT_CAP = 1e300


def _as_array(u):
    return np.asarray(u, dtype=float)


def _scalar_or_array(x, like):
    return float(x) if np.ndim(like) == 0 else x


@dataclass(frozen=True)
class ScaleParams:
    """Scale divisor N, simulated horizon n and terminal generation M."""

    N: int
    n: int
    M: int
    max_ratio: float = 10.0

    def __post_init__(self):
        for name in ("N", "n", "M"):
            v = getattr(self, name)
            if int(v) != v or v < 1:
                raise ConfigError(f"must be a positive integer, got {v!r}", f"scale.{name}")
            object.__setattr__(self, name, int(v))
        if self.n > self.M:
            raise ConfigError(f"n={self.n} exceeds M={self.M} (need 1 <= n <= M)", "scale.n")
        if self.M > self.max_ratio * self.N:
            raise ConfigError(
                f"M={self.M} exceeds {self.max_ratio}*N={self.max_ratio * self.N} (need M = O(N))",
                "scale.M",
            )

    def to_dict(self):
        return {"N": self.N, "n": self.n, "M": self.M, "max_ratio": self.max_ratio}


@dataclass(frozen=True)
class KernelDerivatives:
    g1: float
    g2: float
    g3: float
    nu1: float
    nu2: float
    source: str = "analytic"


# --------------------------------------------------------------------------
# displacement kernels


@dataclass(frozen=True)
class DisplacementKernel:
    """Law of the unscaled increment X given the scaled position u.

    Subclasses implement ``sample``, ``g``, ``nu``, ``exp_abs_moment``,
    ``mgf`` and ``nodes``. ``analytic`` records, per quantity, whether a
    closed form is used ("closed"), an exact finite sum ("sum"), or
    adaptive quadrature ("quad").
    """

    id: ClassVar[str] = ""
    analytic: ClassVar[dict] = {}
    #: increments are integers, so positions stay on the integer lattice
    lattice: ClassVar[bool] = False

    @property
    def domain(self):
        return (-INF, INF)

    @property
    def kinks(self):
        return ()

    @property
    def centered(self):
        """True when E[X|u] = 0 on the whole domain."""
        return False

    def params(self):
        return {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}

    def check(self, u):
        lo, hi = self.domain
        a = _as_array(u)
        if np.any(a < lo) or np.any(a > hi) or np.any(np.isnan(a)):
            raise DomainError(f"{self.id}: u={u!r} outside domain [{lo}, {hi}]")

    def derivatives(self, u):
        """Analytic (g', g'', g''', nu', nu'') at u, or None."""
        return None

    def max_abs_step(self):
        """Bound on |X| for bounded kernels, else inf."""
        return INF


@dataclass(frozen=True)
class Rademacher(DisplacementKernel):
    """Fair coin tossing, X = +1 or -1."""

    id: ClassVar[str] = "rademacher"
    analytic: ClassVar[dict] = {"g": "closed", "nu": "closed", "exp_abs_moment": "closed"}
    lattice: ClassVar[bool] = True

    @property
    def centered(self):
        return True

    def sample(self, u, rng):
        return np.where(rng.random(np.shape(u)) < 0.5, 1.0, -1.0)

    def g(self, u):
        return _scalar_or_array(np.zeros_like(_as_array(u)), u)

    def nu(self, u):
        return _scalar_or_array(np.ones_like(_as_array(u)), u)

    def exp_abs_moment(self, u, t):
        return math.exp(t)

    def mgf(self, u, t):
        return math.cosh(t)

    def nodes(self, u):
        u = _as_array(u)
        off = np.broadcast_to([1.0, -1.0], u.shape + (2,))
        return off, np.full(u.shape + (2,), 0.5)

    def derivatives(self, u):
        return KernelDerivatives(0.0, 0.0, 0.0, 0.0, 0.0)

    def max_abs_step(self):
        return 1.0


@dataclass(frozen=True)
class BiasedDrift(DisplacementKernel):
    """X = +1 with probability (1 + kappa*u)/2 (clamped to [0, 1]), else -1.

    The drift g(u) = kappa*u is linear inside |kappa*u| <= 1, which is the
    declared domain.
    """

    kappa: float = 0.5
    id: ClassVar[str] = "biased_drift"
    analytic: ClassVar[dict] = {"g": "closed", "nu": "closed", "exp_abs_moment": "closed"}
    lattice: ClassVar[bool] = True

    @property
    def domain(self):
        if self.kappa == 0:
            return (-INF, INF)
        r = 1.0 / abs(self.kappa)
        return (-r, r)

    @property
    def centered(self):
        return self.kappa == 0

    def prob_up(self, u):
        return np.clip(0.5 * (1.0 + self.kappa * _as_array(u)), 0.0, 1.0)

    def sample(self, u, rng):
        return np.where(rng.random(np.shape(u)) < self.prob_up(u), 1.0, -1.0)

    def g(self, u):
        return _scalar_or_array(2.0 * self.prob_up(u) - 1.0, u)

    def nu(self, u):
        return _scalar_or_array(np.ones_like(_as_array(u)), u)

    def exp_abs_moment(self, u, t):
        return math.exp(t)

    def mgf(self, u, t):
        p = float(self.prob_up(u))
        return p * math.exp(t) + (1 - p) * math.exp(-t)

    def nodes(self, u):
        p = self.prob_up(u)
        off = np.broadcast_to([1.0, -1.0], p.shape + (2,))
        return off, np.stack([p, 1.0 - p], axis=-1)

    def derivatives(self, u):
        return KernelDerivatives(float(self.kappa), 0.0, 0.0, 0.0, 0.0)

    def max_abs_step(self):
        return 1.0


@dataclass(frozen=True)
class PoissonKernel(DisplacementKernel):
    """Poisson increments with rate mu(u) = mu0 + mu1*u.

    With ``centered`` the increment is Y - mu(u), a martingale difference.
    """

    mu0: float = 1.0
    mu1: float = 0.0
    centered_: bool = False
    id: ClassVar[str] = "poisson"
    lattice: ClassVar[bool] = False

    @property
    def analytic(self):
        return {
            "g": "closed",
            "nu": "closed",
            "exp_abs_moment": "sum" if self.centered_ else "closed",
        }

    def params(self):
        return {"mu0": self.mu0, "mu1": self.mu1, "centered": self.centered_}

    @property
    def domain(self):
        if self.mu1 > 0:
            return (-self.mu0 / self.mu1, INF)
        if self.mu1 < 0:
            return (-INF, -self.mu0 / self.mu1)
        return (-INF, INF)

    @property
    def centered(self):
        return self.centered_

    def rate(self, u):
        return self.mu0 + self.mu1 * _as_array(u)

    def check(self, u):
        super().check(u)
        if np.any(self.rate(u) <= 0):
            raise DomainError(f"poisson: rate must be positive at u={u!r}")

    def sample(self, u, rng):
        mu = np.maximum(self.rate(u), 1e-300)
        # inverse transform keeps common random numbers across paired runs
        y = stats.poisson.ppf(rng.random(np.shape(u)), mu)
        return y - mu if self.centered_ else y

    def g(self, u):
        mu = self.rate(u)
        out = np.zeros_like(mu) if self.centered_ else mu
        return _scalar_or_array(out, u)

    def nu(self, u):
        mu = self.rate(u)
        return _scalar_or_array(mu if self.centered_ else mu + mu * mu, u)

    def exp_abs_moment(self, u, t):
        mu = float(self.rate(u))
        if not self.centered_:
            val = math.exp(min(mu * math.expm1(t), 700.0)) if t < 700 else INF
            if not val < MOMENT_CAP:
                raise DivergenceError(f"E exp(t|X|) overflows at t={t}")
            return val
        # exact summation; summands are dominated by a Poisson(mu e^t) pmf
        kmax = _poisson_cutoff(mu * math.exp(min(t, 50.0)))
        if kmax > 10_000_000:
            raise DivergenceError(f"series for E exp(t|X|) too long at t={t}")
        k = np.arange(kmax + 1)
        logp = stats.poisson.logpmf(k, mu) + t * np.abs(k - mu)
        val = float(np.exp(special.logsumexp(logp)))
        if not np.isfinite(val) or val > MOMENT_CAP:
            raise DivergenceError(f"E exp(t|X|) did not converge at t={t}")
        return val

    def mgf(self, u, t):
        mu = float(self.rate(u))
        log_m = mu * math.expm1(t) - (t * mu if self.centered_ else 0.0)
        return math.exp(log_m)

    def nodes(self, u):
        mu = np.atleast_1d(self.rate(u))
        kmax = _poisson_cutoff(float(mu.max()))
        k = np.arange(kmax + 1, dtype=float)
        probs = stats.poisson.pmf(k[None, :], mu[:, None])
        off = k[None, :] - (mu[:, None] if self.centered_ else 0.0)
        shape = np.shape(u) + (kmax + 1,)
        return np.broadcast_to(off, (mu.size, kmax + 1)).reshape(shape), probs.reshape(shape)

    def derivatives(self, u):
        mu = float(self.rate(u))
        m1 = float(self.mu1)
        if self.centered_:
            return KernelDerivatives(0.0, 0.0, 0.0, m1, 0.0)
        return KernelDerivatives(m1, 0.0, 0.0, m1 * (1 + 2 * mu), 2 * m1 * m1)


def _poisson_cutoff(rate):
    """Support truncation point whose Poisson(rate) tail mass is below 1e-20."""
    return int(math.ceil(rate + 15.0 * math.sqrt(rate + 1.0) + 50.0))


_DRIFTS = ("zero", "const", "linear", "sin", "square")


@dataclass(frozen=True)
class Gaussian(DisplacementKernel):
    """X ~ Normal(g(u), sigma^2) with g from a small analytic family.

    ``drift`` selects g: zero, const (a), linear (a*u), sin (a*sin u) or
    square (a*u^2). With ``quadrature`` set, g, nu and the exponential
    moment are integrated numerically instead of using closed forms.
    """

    drift: str = "zero"
    a: float = 1.0
    sigma: float = 1.0
    quadrature: bool = False
    id: ClassVar[str] = "gaussian"
    n_nodes: ClassVar[int] = 40

    def __post_init__(self):
        if self.drift not in _DRIFTS:
            raise ConfigError(f"unknown drift {self.drift!r}; choose from {_DRIFTS}", "drift")
        if self.sigma <= 0:
            raise ConfigError("sigma must be positive", "sigma")

    @property
    def analytic(self):
        how = "quad" if self.quadrature else "closed"
        return {"g": how, "nu": how, "exp_abs_moment": how}

    @property
    def centered(self):
        return self.drift == "zero" or self.a == 0

    def mean(self, u):
        u = _as_array(u)
        a = self.a
        if self.drift == "zero":
            return np.zeros_like(u)
        if self.drift == "const":
            return np.full_like(u, a)
        if self.drift == "linear":
            return a * u
        if self.drift == "sin":
            return a * np.sin(u)
        return a * u * u

    def sample(self, u, rng):
        return self.mean(u) + self.sigma * rng.standard_normal(np.shape(u))

    def _quad(self, u, fn):
        mu = float(self.mean(u))
        s = self.sigma
        pdf = stats.norm(mu, s).pdf
        # split at 0 and at the mean so kinks of |x| are integration nodes
        pts = sorted({mu - 40 * s, min(0.0, mu), max(0.0, mu), mu + 40 * s})
        total = 0.0
        for lo, hi in zip(pts[:-1], pts[1:]):
            if hi > lo:
                val, _ = integrate.quad(lambda x: fn(x) * pdf(x), lo, hi,
                                        epsabs=0.0, epsrel=QUAD_RTOL, limit=200)
                total += val
        return total

    def g(self, u):
        if self.quadrature:
            return _vec(lambda v: self._quad(v, lambda x: x), u)
        return _scalar_or_array(self.mean(u), u)

    def nu(self, u):
        if self.quadrature:
            return _vec(lambda v: self._quad(v, lambda x: x * x), u)
        m = self.mean(u)
        return _scalar_or_array(m * m + self.sigma ** 2, u)

    def exp_abs_moment(self, u, t):
        if self.quadrature:
            val = self._quad(u, lambda x: math.exp(t * abs(x)))
        else:
            val = folded_normal_mgf(float(self.mean(u)), self.sigma, t)
        if not np.isfinite(val) or val > MOMENT_CAP:
            raise DivergenceError(f"E exp(t|X|) did not converge at t={t}")
        return val

    def mgf(self, u, t):
        return math.exp(float(self.mean(u)) * t + 0.5 * (self.sigma * t) ** 2)

    def nodes(self, u):
        z, w = np.polynomial.hermite_e.hermegauss(self.n_nodes)
        w = w / w.sum()
        mu = self.mean(u)
        off = mu[..., None] + self.sigma * z
        return off, np.broadcast_to(w, off.shape)

    def derivatives(self, u):
        u = float(u)
        a = self.a
        if self.drift in ("zero", "const"):
            g1 = g2 = g3 = 0.0
        elif self.drift == "linear":
            g1, g2, g3 = a, 0.0, 0.0
        elif self.drift == "sin":
            g1, g2, g3 = a * math.cos(u), -a * math.sin(u), -a * math.cos(u)
        else:
            g1, g2, g3 = 2 * a * u, 2 * a, 0.0
        g0 = float(self.mean(u))
        # nu = g^2 + sigma^2
        return KernelDerivatives(g1, g2, g3, 2 * g0 * g1, 2 * (g1 * g1 + g0 * g2))


def folded_normal_mgf(mu, sigma, t):
    """E exp(t|X|) for X ~ Normal(mu, sigma^2)."""
    half = 0.5 * (sigma * t) ** 2
    la = mu * t + half + stats.norm.logcdf(mu / sigma + sigma * t)
    lb = -mu * t + half + stats.norm.logcdf(-mu / sigma + sigma * t)
    return float(np.exp(np.logaddexp(la, lb)))


@dataclass(frozen=True)
class ConstantStep(DisplacementKernel):
    """Deterministic increment X = c."""

    c: float = 1.0
    id: ClassVar[str] = "constant"
    analytic: ClassVar[dict] = {"g": "closed", "nu": "closed", "exp_abs_moment": "closed"}

    @property
    def centered(self):
        return self.c == 0

    @property
    def lattice(self):
        return float(self.c).is_integer()

    def sample(self, u, rng):
        return np.full(np.shape(u), float(self.c))

    def g(self, u):
        return _scalar_or_array(np.full_like(_as_array(u), self.c), u)

    def nu(self, u):
        return _scalar_or_array(np.full_like(_as_array(u), self.c * self.c), u)

    def exp_abs_moment(self, u, t):
        return math.exp(t * abs(self.c))

    def mgf(self, u, t):
        return math.exp(t * self.c)

    def nodes(self, u):
        u = _as_array(u)
        return np.full(u.shape + (1,), float(self.c)), np.ones(u.shape + (1,))

    def derivatives(self, u):
        return KernelDerivatives(0.0, 0.0, 0.0, 0.0, 0.0)

    def max_abs_step(self):
        return abs(self.c)


def _vec(fn, u):
    if np.ndim(u) == 0:
        return fn(float(u))
    return np.array([fn(float(v)) for v in np.ravel(u)]).reshape(np.shape(u))


# --------------------------------------------------------------------------
# branching kernels


@dataclass(frozen=True)
class BranchingKernel:
    """Birth rate m(u) >= 0: expected offspring count at birthplace u."""

    id: ClassVar[str] = ""

    @property
    def domain(self):
        return (-INF, INF)

    @property
    def kinks(self):
        return ()

    @property
    def is_unit(self):
        return False

    def params(self):
        return {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}

    def check(self, u):
        lo, hi = self.domain
        a = _as_array(u)
        if np.any(a < lo) or np.any(a > hi) or np.any(np.isnan(a)):
            raise DomainError(f"{self.id}: u={u!r} outside domain [{lo}, {hi}]")

    def log_m(self, u):
        with np.errstate(divide="ignore"):
            return np.log(self.m(u))


@dataclass(frozen=True)
class UnitBranching(BranchingKernel):
    id: ClassVar[str] = "unit"

    @property
    def is_unit(self):
        return True

    def m(self, u):
        return _scalar_or_array(np.ones_like(_as_array(u)), u)

    def log_m(self, u):
        return np.zeros_like(_as_array(u))


@dataclass(frozen=True)
class ConstantBranching(BranchingKernel):
    rate: float = 2.0
    id: ClassVar[str] = "constant"

    def __post_init__(self):
        if self.rate < 0:
            raise ConfigError("rate must be nonnegative", "rate")

    @property
    def is_unit(self):
        return self.rate == 1.0

    def m(self, u):
        return _scalar_or_array(np.full_like(_as_array(u), self.rate), u)


@dataclass(frozen=True)
class KsatLike(BranchingKernel):
    """m(u) = 1 - u^K clamped to [0, 1]."""

    K: int = 2
    id: ClassVar[str] = "ksat_like"

    @property
    def domain(self):
        return (-1.0, 1.0)

    @property
    def kinks(self):
        # odd K: 1 - u^K exceeds 1 for u < 0 and is clamped there
        return (0.0,) if int(self.K) % 2 else ()

    def m(self, u):
        u = _as_array(u)
        return _scalar_or_array(np.clip(1.0 - u ** int(self.K), 0.0, 1.0), u)


@dataclass(frozen=True)
class Scatter(BranchingKernel):
    """m(u) = 1 + delta*|u|: rewards positions far from the origin."""

    delta: float = 1.0
    id: ClassVar[str] = "scatter"

    @property
    def kinks(self):
        return (0.0,)

    def m(self, u):
        u = _as_array(u)
        return _scalar_or_array(1.0 + self.delta * np.abs(u), u)

    def log_m(self, u):
        return np.log1p(self.delta * np.abs(_as_array(u)))


@dataclass(frozen=True)
class Squeeze(BranchingKernel):
    """m(u) = 1 / (1 + delta*|u|): penalises positions far from the origin."""

    delta: float = 1.0
    id: ClassVar[str] = "squeeze"

    @property
    def kinks(self):
        return (0.0,)

    def m(self, u):
        u = _as_array(u)
        return _scalar_or_array(1.0 / (1.0 + self.delta * np.abs(u)), u)

    def log_m(self, u):
        return -np.log1p(self.delta * np.abs(_as_array(u)))


DISPLACEMENTS = {k.id: k for k in (Rademacher, BiasedDrift, PoissonKernel, Gaussian, ConstantStep)}
BRANCHINGS = {k.id: k for k in (UnitBranching, ConstantBranching, KsatLike, Scatter, Squeeze)}


def make_displacement(kind, **params):
    try:
        cls = DISPLACEMENTS[kind]
    except KeyError:
        raise ConfigError(f"unknown displacement kernel {kind!r}", "model.displacement") from None
    if cls is PoissonKernel and "centered" in params:
        params = dict(params)
        params["centered_"] = bool(params.pop("centered"))
    try:
        return cls(**params)
    except TypeError as exc:
        raise ConfigError(str(exc), "model.displacement_params") from None


def make_branching(kind, **params):
    try:
        cls = BRANCHINGS[kind]
    except KeyError:
        raise ConfigError(f"unknown branching kernel {kind!r}", "model.branching") from None
    try:
        return cls(**params)
    except TypeError as exc:
        raise ConfigError(str(exc), "model.branching_params") from None


# --------------------------------------------------------------------------
# the model


@dataclass(frozen=True)
class ModelSpec:
    scale: ScaleParams
    displacement: DisplacementKernel
    branching: BranchingKernel = field(default_factory=UnitBranching)
    u0: float = 0.0
    catalog_id: str | None = None

    def __post_init__(self):
        try:
            self.displacement.check(self.u0)
            self.branching.check(self.u0)
        except DomainError as exc:
            raise ConfigError(str(exc), "model.u0") from None

    @property
    def N(self):
        return self.scale.N

    def with_branching(self, branching):
        return dataclasses.replace(self, branching=branching)

    def with_u0(self, u0):
        return dataclasses.replace(self, u0=float(u0))

    def to_dict(self):
        return {
            "displacement": self.displacement.id,
            "displacement_params": self.displacement.params(),
            "branching": self.branching.id,
            "branching_params": self.branching.params(),
            "u0": self.u0,
            "scale": self.scale.to_dict(),
            "catalog_id": self.catalog_id,
        }

    @classmethod
    def from_dict(cls, d):
        scale = d.get("scale", {})
        return make_model(
            d["displacement"],
            d.get("branching", "unit"),
            N=scale.get("N"),
            n=scale.get("n"),
            M=scale.get("M"),
            max_ratio=scale.get("max_ratio", 10.0),
            u0=d.get("u0", 0.0),
            displacement_params=d.get("displacement_params") or {},
            branching_params=d.get("branching_params") or {},
            catalog_id=d.get("catalog_id"),
        )


def make_model(displacement="rademacher", branching="unit", *, N, n=None, M=None, u0=0.0,
               displacement_params=None, branching_params=None, max_ratio=10.0,
               catalog_id=None):
    """Build a ModelSpec from catalog ids. ``n`` and ``M`` default to N."""
    for name, v in (("N", N),):
        if v is None:
            raise ConfigError("missing", f"scale.{name}")
    M = N if M is None else M
    n = M if n is None else n
    disp = make_displacement(displacement, **(displacement_params or {}))
    br = make_branching(branching, **(branching_params or {}))
    return ModelSpec(ScaleParams(N, n, M, max_ratio), disp, br, float(u0), catalog_id)


# --------------------------------------------------------------------------
# operations


def eval_g(model, u):
    """E[X | u]."""
    model.displacement.check(u)
    return model.displacement.g(u)


def eval_nu(model, u):
    """E[X^2 | u]."""
    model.displacement.check(u)
    return model.displacement.nu(u)


def exp_abs_moment(model, u, t):
    """E[exp(t|X|) | u] for t >= 0."""
    if t < 0:
        raise ValueError("t must be nonnegative")
    model.displacement.check(u)
    if t == 0:
        return 1.0
    # E exp(t|X|) >= 1; only rounding can push a closed form below it
    return max(1.0, model.displacement.exp_abs_moment(u, t))


@dataclass(frozen=True)
class BetaEstimate:
    value: float
    se: float
    method: str


def eval_beta(model, u, method="auto", draws=BETA_DRAWS, rng=None):
    """beta(u) = E[m(u + X/N) | u].

    ``method="exact"`` sums over the kernel's quadrature nodes (exact for
    discrete kernels, Gauss-Hermite for Gaussian ones); ``"mc"`` averages
    ``draws`` sampled increments and reports the standard error. Children
    landing outside the branching domain are clamped to it.
    """
    model.displacement.check(u)
    model.branching.check(u)
    if model.branching.is_unit:
        return BetaEstimate(1.0, 0.0, "exact")
    if method == "auto":
        method = "exact"
    N = model.N
    lo, hi = model.branching.domain
    if method == "exact":
        off, p = model.displacement.nodes(np.asarray(float(u)))
        child = np.clip(float(u) + off / N, lo, hi)
        return BetaEstimate(float(np.sum(p * model.branching.m(child))), 0.0, "exact")
    if method != "mc":
        raise ValueError(f"unknown method {method!r}")
    if rng is None:
        rng = np.random.default_rng()
    x = model.displacement.sample(np.full(int(draws), float(u)), rng)
    mv = model.branching.m(np.clip(float(u) + x / N, lo, hi))
    return BetaEstimate(float(mv.mean()), float(mv.std(ddof=1) / math.sqrt(draws)), "mc")


def _fd(fn, u, h):
    f = [float(fn(u + k * h)) for k in (-2, -1, 0, 1, 2)]
    d1 = (f[3] - f[1]) / (2 * h)
    d2 = (f[3] - 2 * f[2] + f[1]) / (h * h)
    d3 = (f[4] - 2 * f[3] + 2 * f[1] - f[0]) / (2 * h ** 3)
    return d1, d2, d3


def derivatives(model, u, h=1e-4, source="auto"):
    """Derivatives g', g'', g''', nu', nu'' at u.

    ``source`` is "analytic", "fd" (central differences with step h) or
    "auto" (analytic when the kernel provides it).
    """
    kern = model.displacement
    if source in ("auto", "analytic"):
        kern.check(u)
        d = kern.derivatives(u)
        if d is not None:
            return d
        if source == "analytic":
            raise DerivativeError(f"{kern.id} has no analytic derivatives")
    if source not in ("auto", "fd", "analytic"):
        raise ValueError(f"unknown source {source!r}")
    if h <= 0:
        raise ValueError("h must be positive")
    kern.check(u - 2 * h)
    kern.check(u + 2 * h)
    g1, g2, g3 = _fd(kern.g, u, h)
    n1, n2, _ = _fd(kern.nu, u, h)
    return KernelDerivatives(g1, g2, g3, n1, n2, source="fd")


def smooth_grid(model, lo, hi, points=41, window=1e-3):
    """Evaluation grid on [lo, hi] that skips kink exclusion windows."""
    grid = np.linspace(lo, hi, points)
    kinks = tuple(model.displacement.kinks) + tuple(model.branching.kinks)
    keep = np.ones(grid.shape, bool)
    for k in kinks:
        keep &= np.abs(grid - k) >= window
    return grid[keep]


def variance_gap(model, grid):
    """nu(u) - g(u)^2 on a grid; nonnegative for every valid kernel."""
    grid = _as_array(grid)
    g = np.asarray(eval_g(model, grid), float)
    return np.asarray(eval_nu(model, grid), float) - g * g


def catalog(kink_window=1e-3):
    """Listing of every catalog kernel with its parameter schema."""
    rows = []
    for role, table in (("displacement", DISPLACEMENTS), ("branching", BRANCHINGS)):
        for kid, cls in table.items():
            inst = cls()
            params = {}
            for f in dataclasses.fields(cls):
                name = "centered" if f.name == "centered_" else f.name
                params[name] = {"type": type(f.default).__name__, "default": f.default}
            rows.append({
                "id": kid,
                "role": role,
                "params": params,
                "domain": [_json_float(x) for x in inst.domain],
                "kinks": list(inst.kinks),
                "kink_window": kink_window if inst.kinks else 0.0,
                "doc": (cls.__doc__ or "").strip().splitlines()[0] if cls.__doc__ else "",
            })
    return rows


def _json_float(x):
    return None if math.isinf(x) else x
