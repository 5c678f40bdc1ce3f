#!/usr/bin/env python3
# %% [markdown]
# # Checking the built-in guarantees
#
# The parameterization promises contraction, an incremental quadratic
# constraint and, as consequences, a gain of at most 10 from the filter's own
# sensor fault and at most 0.1 from faults elsewhere. Here we check them by
# paired rollouts on a bank loaded from disk (run 02 first) or, failing that,
# an untrained one.

# %%
import numpy as np
from pathlib import Path

from renfdi import dataset as ds
from renfdi import ren as rc
from renfdi import training as tr
from renfdi import verify as vf
from renfdi.cli import random_bank
from renfdi.signals import FAULT_SPEC, multisine

bank_dir = Path("demo_output/bank")
bank = tr.FilterBank.load(bank_dir) if bank_dir.is_dir() else random_bank(0)
healthy = ds.build_scenarios(ds.ScenarioConfig(composition=(((), 5),)), 3)
U = np.stack([ds.filter_input(s) for s in healthy])

# %%
# Contraction: two initial states, same input.
rng = np.random.default_rng(0)
ren = bank.rens[0]
c = vf.contraction_test(ren, U[0], rng.normal(size=ren.n_z), rng.normal(size=ren.n_z))
print("distance ratio, geometric mean:", round(c.geometric_mean, 3),
      "| below 1e-10 of start at sample", c.converged_at)

# %%
# Fault gains for filter 1.
spec = bank.specs[0]
f = multisine(FAULT_SPEC, 0, 1)[:80].copy()
f[:40] = 0
own = vf.sensitivity_bound_check(ren, spec, U[1], f)
other = np.zeros((80, 4))
other[:, 1] = f
cross = vf.insensitivity_bound_check(ren, spec, U[1], other)
print(f"own-sensor fault: |dr| / |f| = {own.lhs[-1] / own.rhs[-1] * own.gain:.3f} (<= 10)")
print(f"sensor-2 fault:   |dr| / |f| = {cross.lhs[-1] / cross.rhs[-1] * cross.gain:.4f} (<= 0.1)")

# %%
# The whole suite, as the CLI runs it.
records = vf.run_suite(bank.dims, bank.specs, bank.params, U, seed=0, trials=20)
for r in records:
    print(f"{'ok ' if r['pass'] else 'BAD'} {r['name']:<30} {r['worst_margin']:.3g}")

# %%
# Well-posedness certificates of a freshly drawn parameter vector.
p = rc.init_params(bank.dims, spec, seed=123, scale=5.0)
print(vf.check_wellposed(bank.dims, spec, p))
