# %% [markdown]
# # Power flow on the bundled 13-bus feeder
# Solve one snapshot, then sweep the regulator tap and watch the downstream voltages move.

# %%
import numpy as np

from voltgrid.grid import load_circuit
from voltgrid.powerflow import Injections, power_loss, solve_distflow, voltage_violation

c = load_circuit("feeder13")
print(c.n_buses, "buses,", len(c.lines), "lines")
print("actuator buses", c.actuator_buses, "action dims", c.action_dims)

# %%
inj = Injections.from_circuit(c, load_multiplier=1.0, bat_power=[0.0], cap_status=[0, 0])
reg = c.regulators[0]
flow = solve_distflow(c, inj, [reg.ratio_sq(reg.middle_tap)])
print("iterations", flow.iterations, "converged", flow.converged)
print("v  ", np.round(flow.v, 4))
print("loss %.5f  violation %.5f" % (power_loss(c, flow), voltage_violation(flow, 0.95, 1.05)))

# %% [markdown]
# Tap sweep. Buses upstream of the regulator barely react; everything below it shifts together.

# %%
taps = np.arange(0, reg.num_taps, 4)
v = np.array([solve_distflow(c, inj, [reg.ratio_sq(int(t))]).v for t in taps])
print("tap   v[1]    v[6]    v[12]")
for t, row in zip(taps, v):
    print("%3d  %.4f  %.4f  %.4f" % (t, row[1], row[6], row[12]))

# %% [markdown]
# Capacitors raise the local voltage and trim the loss.

# %%
for caps in ([0, 0], [1, 0], [0, 1], [1, 1]):
    f = solve_distflow(c, Injections.from_circuit(c, 1.0, [0.0], caps), [1.0])
    print(caps, "v[12] %.4f  v[9] %.4f  loss %.5f" % (f.v[12], f.v[9], power_loss(c, f)))
