# %% [markdown]
# # Which buses does each actuator reach?
# One constant-load episode per actuator, random commands to that actuator only.
# The covariance of the actuator bus voltage with every other bus shows its reach.

# %%
import numpy as np

from voltgrid.experiments import run_sensitivity
from voltgrid.graph import graph_for
from voltgrid.grid import load_circuit

c = load_circuit("feeder13")
for sel in ("regulator:0", "capacitor:0", "capacitor:1", "battery:0"):
    res = run_sensitivity(c, sel, episode_seed=0)
    cov = res.covariance / np.abs(res.covariance).max()
    print("%-12s bus %2d  " % (sel, res.bus) + " ".join("%5.2f" % x for x in cov))

# %% [markdown]
# The regulator moves its whole subtree, so the augmented graph wires its bus straight to every
# descendant. Edge counts before and after:

# %%
print(len(graph_for(c).edges), "->", len(graph_for(c, augmented=True).edges))
