# %% [markdown]
# # Short PPO runs and corrupted observations
# Dense and graph policies for a few hundred episodes, then the percent reward change when
# a fraction of bus voltages is masked or noised. Raise `EPISODES` for real numbers.

# %%
import tempfile

import numpy as np

from voltgrid.env import EnvConfig, VoltVarEnv
from voltgrid.experiments import PerturbationSpec, run_robustness
from voltgrid.grid import load_circuit
from voltgrid.policy import PolicySpec
from voltgrid.ppo import PPOConfig, evaluate_policy, random_actor, train

EPISODES = 320
c = load_circuit("feeder13")
out = tempfile.mkdtemp(prefix="voltgrid_demo_")

# %%
nets = {}
for kind in ("dense", "graph"):
    res = train(c, EnvConfig(), PolicySpec.for_circuit(c, kind, hidden_dim=32),
                PPOConfig(episodes_total=EPISODES, seed=0), f"{out}/{kind}")
    nets[kind] = res.net
    curve = [r["mean_reward"] for r in res.log_rows]
    print(kind, "first update %.3f  last update %.3f" % (curve[0], curve[-1]))

env = VoltVarEnv(c, EnvConfig())
print("random policy %.3f" % evaluate_policy(env, random_actor(env), 20).mean())

# %%
# Short runs often give 0% here: masking rescales the logits but keeps every
# per-head argmax. The 2000-episode policies in the acceptance suite do react.
rep = run_robustness([(k, 0, n) for k, n in nets.items()], c, [0.25, 0.75], PerturbationSpec(n_subsets=3),
                     n_eval_episodes=10, modes=("mask", "noise"))
for (pol, mode, frac), (m, s, n) in sorted(rep.cells.items()):
    print("%-6s %-5s %.2f  %7.2f%% +- %.2f" % (pol, mode, frac, m, s))
