"""Walk one state through the safety filter by hand.

Builds the decrease constraint b.tau <= c - margin from the analytic energy
certificate at a tracking state, shows what the filter does to a few raw
torques, and compares against the no-authority (b = 0) case.
"""
import numpy as np
import torch

from lyapshield import shield as sh
from lyapshield.closedloop import AnalyticCertificate, Context, Drift, Setup, sl_torque
from lyapshield import dynamics as dyn

setup = Setup()
p = setup.plant(0.8)
x = dyn.make_state([0.3, -0.5], [0.4, 0.1], 0.0, setup.ref, setup.lam)
x[dyn.E] += [0.15, -0.1]
x[dyn.S] = x[dyn.ED] + setup.lam @ x[dyn.E]
ctx = Context.single(0.0, 0.8, p.friction_scale, dyn.base_parameters(setup.base))

h, g = Drift("true", setup).fields(torch.as_tensor(x)[None], ctx)
co = sh.coefficients(AnalyticCertificate(), x, h[0].numpy(), g[0].numpy(), alpha=1.0)
print(f"V = {co.V:.4f}, a = {co.a:.4f}, b = {np.round(co.b, 4)}, c = {co.c:.4f}")

tau_sl = sl_torque(torch.as_tensor(x)[None], ctx, setup)[0].numpy()
for name, tau in [("Slotine-Li", tau_sl), ("zero", np.zeros(2)), ("push away", tau_sl + 20 * co.b)]:
    out = sh.project(tau, co)
    print(f"{name:>10}: raw {np.round(tau, 3)} -> safe {np.round(out.tau_safe, 3)}  "
          f"active={bool(out.active)} slack={float(out.slack):.3f}")

for c in (0.2, -0.2):
    out = sh.project(np.array([1.0, -1.0]), sh.ShieldCoefficients(a=0.0, b=np.zeros(2), c=c, V=0.0))
    print(f"b = 0, c = {c:+.1f}: degenerate={bool(out.degenerate)} "
          f"infeasible={bool(out.infeasible_at_degenerate)}")
