#!/usr/bin/env python3
# %% [markdown]
# # Training the four-filter bank
#
# Filter i reads both road inputs and all four measured sensors, and is
# trained to reproduce the fault on sensor i while ignoring faults on the
# other sensors. Full-batch Adam, gradients by hand-written reverse mode.

# %%
import time

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
from pathlib import Path

from renfdi import dataset as ds
from renfdi import training as tr

out = Path("demo_output")
out.mkdir(exist_ok=True)

train = ds.build_scenarios(ds.ScenarioConfig(), master_seed=0)
config = tr.TrainConfig()
print(config)

# %%
specs, params, reports = [], [], []
t0 = time.perf_counter()
for i in range(1, 5):
    spec = config.spec(i)
    p, rep = tr.train_filter(i, config.dims(), spec, train, config)
    specs.append(spec)
    params.append(p)
    reports.append(rep)
    print(f"filter {i}: J {rep.initial_loss:.3g} -> {rep.final_loss:.3g}")
print(f"{time.perf_counter() - t0:.0f} s")
bank = tr.FilterBank(config.dims(), specs, params)
(out / "bank").mkdir(exist_ok=True)
bank.save(out / "bank", seed=config.seed)

fig, ax = plt.subplots(figsize=(6, 3))
for i, rep in enumerate(reports, 1):
    ax.semilogy(rep.losses, label=f"filter {i}")
ax.set_xlabel("epoch")
ax.set_ylabel("J")
ax.legend()
fig.tight_layout()
fig.savefig(out / "training_curves.svg")

# %%
# Fresh test scenarios: faults on sensor 1, sensor 2, and both.
comp = tuple((s, 100) for s, _ in ds.TEST_COMPOSITION)
test = ds.build_scenarios(ds.ScenarioConfig(composition=comp), master_seed=1)
table, counts = tr.evaluate_rmse(bank, test)
print(tr.format_table(table))

# %%
# Residuals on one scenario with both faults active.
s = next(s for s in test if s.label == (1, 2))
r = bank.residuals(ds.filter_input(s))
t = np.arange(len(r)) / s.filter_rate
fig, ax = plt.subplots(4, 1, figsize=(7, 7), sharex=True)
for j in range(4):
    ax[j].plot(t, s.faults[:, j], "k--", lw=1)
    ax[j].plot(t, r[:, j])
    ax[j].set_ylabel(f"r{j + 1} [m]")
ax[-1].set_xlabel("time [s]")
fig.tight_layout()
fig.savefig(out / "residuals.svg")
