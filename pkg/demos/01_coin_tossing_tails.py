"""Coin-tossing walk: empirical tails against the exact binomial law and
the martingale tail bounds.

The classic bound 2exp(-lam^2/(2n)) holds everywhere; the sharper-looking
constant 2exp(-lam^2/n) fails near lam = 2 sqrt(n).
"""
import math

from brwconc import bounds, mc
from brwconc.models import make_model

n = 100
model = make_model("rademacher", N=100, n=n)
ens = mc.simulate_paths(model, n, 200_000, 7)

print(f"{'lambda':>6} {'p_hat':>9} {'95% CI':>21} {'exact':>9} {'classic':>9} {'stated':>9}")
for lam in (5, 10, 15, 20, 25, 30):
    t = mc.empirical_tail(ens, 0.0, lam)
    exact = mc.binomial_two_sided_tail(n, lam)
    classic = bounds.azuma_bound(n, lam, 1.0, "classic").value
    stated = bounds.azuma_bound(n, lam, 1.0, "stated").value
    mark = "  <- stated constant fails" if exact > stated else ""
    print(f"{lam:6d} {t.p_hat:9.5f} [{t.ci_low:9.5f},{t.ci_high:9.5f}] {exact:9.5f} "
          f"{min(classic, 1):9.5f} {min(stated, 1):9.5f}{mark}")

print(f"\ntail scale: deviations of order sqrt(n) = {math.sqrt(n):.0f}")
