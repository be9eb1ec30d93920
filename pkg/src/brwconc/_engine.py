"""Vectorised stepping shared by the plain and weighted path engines."""
from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from .rng import blocks


def domain_bounds(model):
    """Intersection of the kernel domains in unscaled units."""
    d_lo, d_hi = model.displacement.domain
    b_lo, b_hi = model.branching.domain
    N = model.N
    return max(d_lo, b_lo) * N, min(d_hi, b_hi) * N


def step(model, U, gen, lo, hi):
    """Advance unscaled positions by one increment; returns (U, clamped)."""
    X = model.displacement.sample(U / model.N, gen)
    U = U + X
    clamped = 0
    if lo > -math.inf or hi < math.inf:
        out = (U < lo) | (U > hi)
        clamped = int(out.sum())
        if clamped:
            U = np.clip(U, lo, hi)
    return U, clamped


def run_block(model, steps, U0, size, gen, record=(), keep_full=False, weights=False):
    """Simulate ``size`` paths for ``steps`` steps from unscaled start U0.

    Returns a dict with final positions ``U``, last increment ``last``,
    recorded positions ``rec`` (step -> U), full scaled paths when asked,
    log-weights sum_{k=1..steps} log m(u_k), clamp count and the envelope of
    visited scaled positions.
    """
    N = model.N
    lo, hi = domain_bounds(model)
    U = np.broadcast_to(np.asarray(U0, float), (size,)).copy()
    start = U.copy()
    rec = {}
    if 0 in record:
        rec[0] = U.copy()
    full = np.empty((size, steps + 1)) if keep_full else None
    if keep_full:
        full[:, 0] = U / N
    logw = np.zeros(size) if weights else None
    unit = model.branching.is_unit
    clamped = 0
    env_lo = env_hi = float(U[0] / N) if size else 0.0
    last = np.zeros(size)
    for k in range(1, steps + 1):
        prev = U
        U, c = step(model, U, gen, lo, hi)
        clamped += c
        if k == steps:
            last = U - prev
        u = U / N
        if keep_full:
            full[:, k] = u
        if weights and not unit:
            logw += model.branching.log_m(u)
        if k in record:
            rec[k] = U.copy()
        if size:
            env_lo = min(env_lo, float(u.min()))
            env_hi = max(env_hi, float(u.max()))
    return {
        "U": U, "start": start, "last": last, "rec": rec, "full": full,
        "logw": logw, "clamped": clamped, "envelope": (env_lo, env_hi),
    }


def _job(args):
    model, steps, U0, rng, b, n, record, keep_full, weights = args
    return run_block(model, steps, U0, n, rng.generator(b), record, keep_full, weights)


def run_blocks(model, steps, U0, trials, rng, record=(), keep_full=False, weights=False,
               workers=1):
    """Run every block of ``trials`` and merge in block order."""
    jobs = []
    for b, s, e in blocks(trials):
        u0 = U0 if np.ndim(U0) == 0 else np.asarray(U0)[s:e]
        jobs.append((model, steps, u0, rng, b, e - s, tuple(record), keep_full, weights))
    if workers and workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_job, jobs))
    else:
        parts = [_job(j) for j in jobs]
    return merge(parts)


def merge(parts):
    out = {}
    for key in ("U", "start", "last"):
        out[key] = np.concatenate([p[key] for p in parts])
    out["rec"] = {k: np.concatenate([p["rec"][k] for p in parts]) for k in parts[0]["rec"]}
    out["full"] = (np.concatenate([p["full"] for p in parts])
                   if parts[0]["full"] is not None else None)
    out["logw"] = (np.concatenate([p["logw"] for p in parts])
                   if parts[0]["logw"] is not None else None)
    out["clamped"] = sum(p["clamped"] for p in parts)
    out["envelope"] = (min(p["envelope"][0] for p in parts),
                       max(p["envelope"][1] for p in parts))
    return out
