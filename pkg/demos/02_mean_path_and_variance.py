"""Position-dependent drift: the mean path, the variance recurrence and the
sensitivity of the endpoint to an early perturbation.

With P(step = +1) = (1 + u)/2 the scaled mean grows like 0.1 * 1.001^k and
the variance of u_n stays of order 1/N.
"""
from brwconc import mc, recurrence
from brwconc.models import make_model

model = make_model("biased_drift", N=1000, n=1000, u0=0.1, displacement_params={"kappa": 1.0})
mp = recurrence.mean_path(model)
vc = recurrence.variance_curve(model, mp)
closed = recurrence.closed_form_curve(model, mp)
ens = mc.simulate_paths(model, 1000, 20_000, 3, keep_full=True)
mc_mean = ens.positions.mean(axis=0)
mc_var = ens.positions.var(axis=0, ddof=1)

print(f"{'step':>5} {'mean path':>10} {'mc mean':>10} {'var rec':>11} {'closed':>11} {'mc var':>11}")
for k in range(0, 1001, 200):
    print(f"{k:5d} {mp.values[k]:10.5f} {mc_mean[k]:10.5f} {vc.values[k]:11.3e} "
          f"{closed[k]:11.3e} {mc_var[k]:11.3e}")

print(f"\nN * Var(u_n) = {model.N * vc.values[-1]:.3f} (order one)")
print(f"d ubar_1000 / d u_0 = {recurrence.sensitivity_factor(model, mp, 0, 1000):.4f}")
probe = mc.lipschitz_probe(model, 0, 500, 0.1, 0.11, 100_000, 5)
print(f"Lipschitz probe at l=500: {probe.value:.3f} +- {probe.se:.3f}, "
      f"predicted {recurrence.drift_slope(model, 0.105, 0, 500):.3f}")
