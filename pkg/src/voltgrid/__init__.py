"""Volt-var control laboratory: radial power flow, an RL environment, dense and
graph-convolutional PPO policies, and robustness/sensitivity experiments."""

from .env import Action, EnvConfig, Observation, VoltVarEnv, observation_graph, observation_vector
from .graph import GraphRep, augment_regulator_edges, build_graph
from .grid import Circuit, descendants, generate_feeder, load_circuit, validate_circuit
from .policy import ActorCritic, PolicySpec
from .powerflow import Injections, power_loss, solve_distflow, voltage_violation
from .ppo import PPOConfig, train

__version__ = "0.1.0"
