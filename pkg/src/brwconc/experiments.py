"""Config-driven experiment runner.

A config names a pipeline, a model and its scale, the engine budget, a
lambda grid and the bounds to compare against. Running it writes one fresh
directory holding CSV tables and a JSON manifest; rerunning the manifest's
``config`` reproduces every CSV byte for byte.
"""
from __future__ import annotations

import copy
import csv
import hashlib
import io
import json
import math
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__, bounds, brw, mc, recurrence
from .errors import BrwError, ConfigError, InvalidRegime, MissingOutput
from .models import ModelSpec, catalog
from .rng import RngSpec

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

PIPELINES = ("simulate-rw", "simulate-brw", "bounds", "recurrence", "probe-lipschitz",
             "probe-doob", "test-association")
TAIL_BOUNDS = ("azuma_classic", "azuma_downgraded", "azuma_stated", "extended")

DEFAULTS = {
    "pipeline": "simulate-rw",
    "seed": 0,
    "workers": 1,
    "out": "runs",
    "model": {"displacement": "rademacher", "branching": "unit", "u0": 0.0,
              "displacement_params": {}, "branching_params": {}},
    "scale": {"N": 100, "n": None, "M": None, "max_ratio": 10.0},
    "engine": {"kind": "paths", "trials": 100_000, "cap": 10_000, "replicates": 10,
               "offspring": "poisson", "ess_floor": brw.ESS_FLOOR},
    "lambda": {"values": [1.0, 1.5, 2.0, 2.5, 3.0], "units": "sqrt_n", "center": "mean"},
    "bounds": {"kinds": ["azuma_classic", "extended"], "delta": 1.0, "K": "measured",
               "L": "measured", "c": None, "increment_bound": 1.0, "verify": False},
    "probe": {"i": 0, "l": None, "u": None, "u_prime": None, "sub_trials": 1000,
              "indices": 20, "crn": True, "sum_check": False},
    "association": {"i": 1, "f_family": ["x", "x^2", "exp(x/2)", "1{x>1}"],
                    "z_method": "transfer", "u_prev": None},
    "recurrence": {"order": "first", "mc_trials": 10_000},
}


def _merge(base, over, prefix=""):
    out = copy.deepcopy(base)
    for k, v in over.items():
        if k not in base:
            raise ConfigError("unknown key", f"{prefix}{k}")
        if isinstance(base[k], dict) and k not in ("displacement_params", "branching_params"):
            if not isinstance(v, dict):
                raise ConfigError("expected a table", f"{prefix}{k}")
            out[k] = _merge(base[k], v, f"{prefix}{k}.")
        else:
            out[k] = v
    return out


@dataclass
class ExperimentConfig:
    """Resolved experiment configuration; see ``DEFAULTS`` for the schema."""

    data: dict

    @classmethod
    def from_mapping(cls, mapping):
        data = _merge(DEFAULTS, dict(mapping))
        cfg = cls(data)
        cfg.validate()
        return cfg

    @property
    def pipeline(self):
        return self.data["pipeline"]

    def validate(self):
        d = self.data
        if d["pipeline"] not in PIPELINES:
            raise ConfigError(f"unknown pipeline {d['pipeline']!r}", "pipeline")
        seed = d["seed"]
        if not isinstance(seed, int) or not 0 <= seed < 2 ** 64:
            raise ConfigError("must be an unsigned 64-bit integer", "seed")
        if not isinstance(d["workers"], int) or d["workers"] < 1:
            raise ConfigError("must be a positive integer", "workers")
        self.model()
        lam = d["lambda"]
        if lam["units"] not in ("absolute", "sqrt_n"):
            raise ConfigError("must be 'absolute' or 'sqrt_n'", "lambda.units")
        if d["pipeline"] in ("simulate-rw", "simulate-brw", "bounds"):
            if not lam["values"]:
                raise ConfigError("grid is empty", "lambda.values")
            if any(v < 0 for v in lam["values"]):
                raise ConfigError("values must be nonnegative", "lambda.values")
        for k in d["bounds"]["kinds"]:
            if k not in bounds.KINDS:
                raise ConfigError(f"unknown bound kind {k!r}", "bounds.kinds")
        if d["engine"]["kind"] not in ("paths", "population"):
            raise ConfigError("must be 'paths' or 'population'", "engine.kind")
        if int(d["engine"]["trials"]) < 1:
            raise ConfigError("must be >= 1", "engine.trials")
        for name in d["association"]["f_family"]:
            if name not in brw.DEFAULT_F_FAMILY:
                raise ConfigError(f"unknown function {name!r}", "association.f_family")

    def model(self):
        d = self.data
        spec = dict(d["model"])
        spec["scale"] = d["scale"]
        try:
            return ModelSpec.from_dict(spec)
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc), "model") from None

    def rng(self):
        return RngSpec(int(self.data["seed"]))

    def lambdas(self, n):
        lam = self.data["lambda"]
        scale = math.sqrt(n) if lam["units"] == "sqrt_n" else 1.0
        return [float(v) * scale for v in lam["values"]]

    def to_dict(self):
        return copy.deepcopy(self.data)

    def digest(self):
        blob = json.dumps(self.data, sort_keys=True, default=str)
        return hashlib.sha256(blob.encode()).hexdigest()


def load_config(path):
    """Read a TOML config, a JSON config, or a run manifest (its ``config``)."""
    path = Path(path)
    try:
        text = path.read_bytes()
    except OSError as exc:
        raise ConfigError(str(exc), "config") from None
    if path.suffix == ".json":
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(str(exc), "config") from None
        if "config" in raw and "version" in raw:
            raw = raw["config"]
    else:
        try:
            raw = tomllib.loads(text.decode())
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(str(exc), "config") from None
    return ExperimentConfig.from_mapping(raw)


@dataclass
class RunManifest:
    config: dict
    version: str
    run_dir: str
    outputs: dict
    """file name -> sha256 digest"""
    wall_time: float = 0.0
    measured: dict = field(default_factory=dict)
    summary: dict = field(default_factory=dict)
    violations: int = 0

    def to_dict(self):
        return asdict(self)

    @classmethod
    def load(cls, path):
        path = Path(path)
        if path.is_dir():
            path = path / "manifest.json"
        if not path.exists():
            raise MissingOutput(f"no manifest at {path}")
        return cls(**json.loads(path.read_text()))


# --------------------------------------------------------------------------
# helpers


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if v is None:
        return ""
    return str(v)


def write_csv(path, header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    data = buf.getvalue().encode()
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def new_run_dir(base, pipeline, cfg_digest):
    base = Path(base)
    base.mkdir(parents=True, exist_ok=True)
    stem = f"{pipeline}_{cfg_digest[:10]}"
    k = 0
    while True:
        d = base / f"{stem}_{k:03d}"
        try:
            d.mkdir()
            return d
        except FileExistsError:
            k += 1


def bound_params(cfg, model, envelope):
    """Resolve delta, K, L, A and c, measuring K and L from the model when asked."""
    b = cfg.data["bounds"]
    delta = float(b["delta"])
    if b["L"] == "measured":
        mp = recurrence.mean_path(model) if model.scale.n <= 2 * model.N else None
        L = recurrence.effective_lipschitz(model, mp) if mp is not None else 0.0
    else:
        L = float(b["L"])
    A = 1.0 + L * model.scale.M / model.N
    measured = {"L": L, "A": A, "delta": delta, "envelope": list(envelope)}
    if b["K"] == "measured":
        km = mc.measure_k(model, envelope, delta, A)
        K = km.K
        measured.update({"K": K, "K_at_u": km.u_at_max, "K_t": km.t})
    else:
        K = float(b["K"])
        measured["K"] = K
    c = bounds.default_c(K, delta) if b["c"] is None else float(b["c"])
    measured["c"] = c
    measured["c_choice"] = "K^2/delta^2" if b["c"] is None else "configured"
    return bounds.BoundParams(delta=delta, K=max(K, 1.0), L=L, A=A, c=c), measured


def _tail_bound(kind, n, lam, params, cfg):
    if kind == "extended":
        return bounds.extended_bound(n, lam, params.delta, params.K)
    c = float(cfg.data["bounds"]["increment_bound"])
    return bounds.azuma_bound(n, lam, c, kind.split("_", 1)[1])


def _tail_rows(cfg, n, estimates, params):
    kinds = [k for k in cfg.data["bounds"]["kinds"] if k in TAIL_BOUNDS]
    header = ["lambda", "hits", "trials", "p_hat", "ci_low", "ci_high", "center"]
    header += [f"bound_{k}" for k in kinds] + ["violated"]
    rows, violations = [], 0
    for t in estimates:
        vals = [_tail_bound(k, n, t.lam, params, cfg).value for k in kinds]
        # the stated Azuma constant is known to be invalid; it never counts
        checked = [v for k, v in zip(kinds, vals) if k != "azuma_stated"]
        bad = any(t.p_hat > v for v in checked)
        violations += bad
        rows.append([t.lam, t.hits, t.trials, t.p_hat, t.ci_low, t.ci_high, t.center, *vals, bad])
    return header, rows, violations


# --------------------------------------------------------------------------
# pipelines


def _center(cfg):
    c = cfg.data["lambda"]["center"]
    if c == "mean":
        return None
    if c == "zero":
        return 0.0
    return float(c)


def _run_rw(cfg, model, run_dir):
    e = cfg.data["engine"]
    n = model.scale.n
    ens = mc.simulate_paths(model, n, int(e["trials"]), cfg.rng(), workers=cfg.data["workers"])
    params, measured = bound_params(cfg, model, ens.envelope)
    ests = [mc.empirical_tail(ens, _center(cfg), lam) for lam in cfg.lambdas(n)]
    header, rows, viol = _tail_rows(cfg, n, ests, params)
    outputs = {"tail.csv": write_csv(run_dir / "tail.csv", header, rows)}
    measured["clamped"] = ens.clamped
    summary = {"fingerprint": ens.fingerprint, "mean_S": float(ens.S.mean())}
    return outputs, measured, summary, viol


def _run_brw(cfg, model, run_dir):
    e = cfg.data["engine"]
    n = model.scale.n
    M = model.scale.M
    rng = cfg.rng()
    if e["kind"] == "paths":
        sample = brw.weighted_paths(model, M, n, int(e["trials"]), rng, cfg.data["workers"])
    else:
        sample = brw.population_sample(model, M, n, int(e["cap"]), rng, int(e["replicates"]),
                                       e["offspring"])
    params, measured = bound_params(cfg, model, sample.envelope)
    center = _center(cfg)
    ests = [brw.sample_tail(sample, lam, center, ess_floor=float(e["ess_floor"]))
            for lam in cfg.lambdas(n)]
    header, rows, viol = _tail_rows(cfg, n, ests, params)
    outputs = {"tail.csv": write_csv(run_dir / "tail.csv", header, rows)}
    summary = {"ess": sample.ess, "log_norm": sample.log_norm, "engine": sample.engine,
               "weighted_mean_u_n": sample.mean(sample.u)}
    if sample.engine == "population":
        prow = []
        for r, run in enumerate(sample.replicates):
            for g, count, log_total, ess, resampled in run.summaries:
                prow.append([r, g, count, log_total, ess, resampled])
        outputs["population.csv"] = write_csv(
            run_dir / "population.csv",
            ["replicate", "generation", "count", "log_total_weight", "ess", "resampled"], prow)
        summary["resample_log"] = [dict(ev, replicate=r)
                                   for r, run in enumerate(sample.replicates)
                                   for ev in run.resample_log]
        summary["extinct"] = [run.extinct_at for run in sample.replicates]
    return outputs, measured, summary, viol


def _run_bounds(cfg, model, run_dir):
    n = model.scale.n
    N = model.N
    params, measured = bound_params(cfg, model, (model.u0, model.u0))
    rows = []
    for kind in cfg.data["bounds"]["kinds"]:
        for lam in cfg.lambdas(n):
            if kind == "mgf":
                continue
            try:
                if kind in TAIL_BOUNDS:
                    bv = _tail_bound(kind, n, lam, params, cfg)
                else:
                    bv = bounds.neighborhood_bound(n, lam, params.c, N)
                rows.append([kind, n, lam, params.delta, params.K, params.c, N, bv.value,
                             bv.valid, bv.reason, ";".join(bv.flags)])
            except InvalidRegime as exc:
                rows.append([kind, n, lam, params.delta, params.K, params.c, N, None, False,
                             str(exc), "invalid_regime"])
    header = ["bound_kind", "n", "lambda", "delta", "K", "c", "N", "value", "valid", "reason",
              "flags"]
    return {"bounds.csv": write_csv(run_dir / "bounds.csv", header, rows)}, measured, {}, 0


def _run_recurrence(cfg, model, run_dir):
    r = cfg.data["recurrence"]
    rows, summary, mp, vc = recurrence.recurrence_table(model, order=r["order"])
    closed = recurrence.closed_form_curve(model, mp)
    trials = int(r["mc_trials"])
    header = ["step", "u_bar", "var_recurrence", "var_closed_form", "a", "b"]
    body = [[s, u, v, closed[j], a, b] for j, (s, u, v, a, b) in enumerate(rows)]
    if trials > 1:
        ens = mc.simulate_paths(model, model.scale.n, trials, cfg.rng(), keep_full=True,
                                workers=cfg.data["workers"])
        var = ens.positions.var(axis=0, ddof=1)
        # normal-theory standard error of a sample variance
        se = var * math.sqrt(2.0 / (trials - 1))
        header += ["var_monte_carlo", "var_monte_carlo_se"]
        for j, row in enumerate(body):
            row += [var[j], se[j]]
        summary["var_monte_carlo_n"] = float(var[-1])
    out = {"recurrence.csv": write_csv(run_dir / "recurrence.csv", header, body)}
    return out, {}, summary, 0


def _run_lipschitz(cfg, model, run_dir):
    p = cfg.data["probe"]
    i = int(p["i"])
    l = int(p["l"]) if p["l"] is not None else model.scale.n
    u = model.u0 if p["u"] is None else float(p["u"])
    up = u + 0.01 if p["u_prime"] is None else float(p["u_prime"])
    res = mc.lipschitz_probe(model, i, l, u, up, int(cfg.data["engine"]["trials"]), cfg.rng(),
                             crn=bool(p["crn"]))
    slope = recurrence.drift_slope(model, 0.5 * (u + up), i, l)
    header = ["i", "l", "u", "u_prime", "value", "se", "diff", "trials", "drift_slope"]
    rows = [[i, l, u, up, res.value, res.se, res.diff, res.trials, abs(slope)]]
    out = {"lipschitz.csv": write_csv(run_dir / "lipschitz.csv", header, rows)}
    return out, {}, {"value": res.value, "se": res.se, "drift_slope": abs(slope)}, 0


def _run_doob(cfg, model, run_dir):
    p = cfg.data["probe"]
    n = model.scale.n
    rng = cfg.rng()
    path = mc.simulate_paths(model, n, 1, rng, keep_full=True).positions[0]
    k = int(p["indices"])
    idx = sorted({int(round(v)) for v in np.linspace(1, n, min(k, n))})
    incs = mc.doob_increments(model, path, int(p["sub_trials"]), rng.child(1), idx)
    rows = [[d.i, d.x, d.d, d.se, d.sub_trials] for d in incs]
    out = {"doob.csv": write_csv(run_dir / "doob.csv", ["i", "x", "d", "se", "sub_trials"], rows)}
    summary = {"S_n": float((path[-1] - path[0]) * model.N)}
    if p["sum_check"]:
        summary["sum_check"] = mc.doob_sum_check(model, path, int(p["sub_trials"]), rng.child(2))
    return out, {}, summary, 0


def _run_association(cfg, model, run_dir):
    a = cfg.data["association"]
    fam = {name: brw.DEFAULT_F_FAMILY[name] for name in a["f_family"]}
    reps = brw.negative_association_test(model, int(a["i"]), model.scale.M, fam,
                                         int(cfg.data["engine"]["trials"]), cfg.rng(),
                                         a["z_method"], a["u_prev"])
    header = ["f", "lhs", "rhs", "margin", "se", "z", "trials", "z_method"]
    rows = [[r.f, r.lhs, r.rhs, r.margin, r.se, r.z, r.trials, r.z_method] for r in reps]
    out = {"association.csv": write_csv(run_dir / "association.csv", header, rows)}
    return out, {}, {"min_z": min(r.z for r in reps)}, 0


_RUNNERS = {
    "simulate-rw": _run_rw,
    "simulate-brw": _run_brw,
    "bounds": _run_bounds,
    "recurrence": _run_recurrence,
    "probe-lipschitz": _run_lipschitz,
    "probe-doob": _run_doob,
    "test-association": _run_association,
}


def run_experiment(config, out=None):
    """Execute the configured pipeline in a new run directory."""
    if not isinstance(config, ExperimentConfig):
        config = ExperimentConfig.from_mapping(config)
    model = config.model()
    base = config.data["out"] if out is None else out
    run_dir = new_run_dir(base, config.pipeline, config.digest())
    t0 = time.perf_counter()
    try:
        outputs, measured, summary, viol = _RUNNERS[config.pipeline](config, model, run_dir)
    except BrwError as exc:
        raise type(exc)(f"{config.pipeline}: {exc}") from exc
    manifest = RunManifest(
        config=config.to_dict(),
        version=__version__,
        run_dir=str(run_dir),
        outputs=outputs,
        wall_time=time.perf_counter() - t0,
        measured=_jsonable(measured),
        summary=_jsonable(summary),
        violations=int(viol),
    )
    (run_dir / "manifest.json").write_text(json.dumps(manifest.to_dict(), indent=2,
                                                      sort_keys=True) + "\n")
    return manifest


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else str(v)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def list_models():
    return catalog()


# --------------------------------------------------------------------------
# plot data

_BOUND_SERIES = {"bound_extended": "extended_bound", "bound_azuma_classic": "azuma_classic",
                 "bound_azuma_downgraded": "azuma_downgraded",
                 "bound_azuma_stated": "azuma_stated"}


def _read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def emit_plot_data(run):
    """Write ``plot_data.csv`` (series, x, y, y_low, y_high) for a run.

    ``run`` is a :class:`RunManifest`, a run directory or a manifest path.
    Raises :class:`MissingOutput` when the run has no rows to plot.
    """
    if not isinstance(run, RunManifest):
        run = RunManifest.load(run)
    run_dir = Path(run.run_dir)
    rows_out = []
    if "tail.csv" in run.outputs:
        src = run_dir / "tail.csv"
        if not src.exists():
            raise MissingOutput(f"{src} is missing")
        rows = _read_rows(src)
        for r in rows:
            rows_out.append(["empirical", r["lambda"], r["p_hat"], r["ci_low"], r["ci_high"]])
        for col, name in _BOUND_SERIES.items():
            for r in rows:
                if col in r:
                    rows_out.append([name, r["lambda"], r[col], "", ""])
    elif "recurrence.csv" in run.outputs:
        src = run_dir / "recurrence.csv"
        if not src.exists():
            raise MissingOutput(f"{src} is missing")
        rows = _read_rows(src)
        for r in rows:
            rows_out.append(["var_recurrence", r["step"], r["var_recurrence"], "", ""])
        for r in rows:
            rows_out.append(["var_closed_form", r["step"], r["var_closed_form"], "", ""])
        for r in rows:
            if "var_monte_carlo" in r:
                v, se = float(r["var_monte_carlo"]), float(r["var_monte_carlo_se"])
                rows_out.append(["var_monte_carlo", r["step"], r["var_monte_carlo"],
                                 repr(v - 1.96 * se), repr(v + 1.96 * se)])
    else:
        raise MissingOutput("run has neither tail nor recurrence output")
    if not rows_out:
        raise MissingOutput(f"{src.name} has no rows")
    digest = write_csv(run_dir / "plot_data.csv", ["series", "x", "y", "y_low", "y_high"],
                       rows_out)
    return run_dir / "plot_data.csv", digest
