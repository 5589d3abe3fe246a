"""Volt-var control environment over a radial feeder.

Actions are absolute actuator settings in canonical order (regulator taps,
capacitor statuses, battery levels). Each step solves one power flow and
returns the weighted penalty reward ``alpha_v*r_v + alpha_c*r_c + alpha_p*r_p``.
"""
from __future__ import annotations

import copy
import csv
import itertools
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .grid import Circuit
from .powerflow import (DEFAULT_MAX_ITER, DEFAULT_TOL, FlowState, Injections, PowerFlowError,
                        power_loss, solve_distflow, voltage_violation)

TRACE_HEADER = ["step", "load_multiplier", "reward", "r_v", "r_c", "r_p", "converged", "collapsed",
                "power_loss"]

# Base daily load shape, one multiplier per hourly step; peak (1.0) at step 18.
DIURNAL_SHAPE = np.array([
    0.62, 0.58, 0.55, 0.54, 0.55, 0.60, 0.68, 0.76, 0.82, 0.85, 0.87, 0.88,
    0.88, 0.87, 0.87, 0.88, 0.91, 0.96, 1.00, 0.98, 0.93, 0.85, 0.75, 0.67,
])


class EnvLifecycleError(RuntimeError):
    pass


class ActionRangeError(ValueError):
    pass


@dataclass
class EnvConfig:
    horizon: int = 24
    alpha_v: float = 1.0
    alpha_c: float = 0.1
    alpha_p: float = 0.02
    v_min: float = 0.95
    v_max: float = 1.05
    reg_change_cost: float = 0.1
    cap_change_cost: float = 0.2
    bat_change_cost: float = 0.1
    load_scale_range: tuple[float, float] = (0.8, 1.2)
    seed: int = 0
    tol: float = DEFAULT_TOL
    max_iter: int = DEFAULT_MAX_ITER

    def __post_init__(self):
        self.load_scale_range = tuple(float(x) for x in self.load_scale_range)
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if min(self.alpha_v, self.alpha_c, self.alpha_p, self.reg_change_cost,
               self.cap_change_cost, self.bat_change_cost) < 0:
            raise ValueError("reward weights and change costs must be >= 0")
        if not self.v_min < self.v_max:
            raise ValueError("need v_min < v_max")
        lo, hi = self.load_scale_range
        if not 0 <= lo <= hi:
            raise ValueError("load_scale_range must satisfy 0 <= lo <= hi")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["load_scale_range"] = list(self.load_scale_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EnvConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown env keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class ActuatorState:
    reg_taps: np.ndarray
    cap_status: np.ndarray
    bat_level: np.ndarray
    bat_soc: np.ndarray

    def copy(self) -> "ActuatorState":
        return ActuatorState(self.reg_taps.copy(), self.cap_status.copy(),
                             self.bat_level.copy(), self.bat_soc.copy())

    @classmethod
    def defaults(cls, circuit: Circuit) -> "ActuatorState":
        return cls(
            np.array([r.middle_tap for r in circuit.regulators], dtype=int),
            np.zeros(len(circuit.capacitors), dtype=int),
            np.array([b.zero_level for b in circuit.batteries], dtype=int),
            np.array([b.soc_init for b in circuit.batteries], dtype=float),
        )


@dataclass
class Action:
    reg_taps: list[int] = field(default_factory=list)
    cap_status: list[int] = field(default_factory=list)
    bat_level: list[int] = field(default_factory=list)

    def flat(self) -> np.ndarray:
        return np.array([*self.reg_taps, *self.cap_status, *self.bat_level], dtype=int)

    @classmethod
    def from_flat(cls, circuit: Circuit, a) -> "Action":
        a = [int(x) for x in np.asarray(a).ravel()]
        nr, nc = len(circuit.regulators), len(circuit.capacitors)
        return cls(a[:nr], a[nr:nr + nc], a[nr + nc:])


@dataclass
class Observation:
    v: np.ndarray
    actuators: ActuatorState
    step_index: int


@dataclass
class StepResult:
    observation: Observation
    reward: float
    reward_components: tuple[float, float, float]
    done: bool
    info: dict


def observation_vector(obs: Observation, circuit: Circuit) -> np.ndarray:
    """Flat layout: ``[v (N), reg taps in [0,1], cap status, bat soc, bat level in [-1,1]]``."""
    act = obs.actuators
    taps = np.array([t / (r.num_taps - 1) for t, r in zip(act.reg_taps, circuit.regulators)])
    levels = np.array([2.0 * lv / (b.num_levels - 1) - 1.0 if b.num_levels > 1 else 0.0
                       for lv, b in zip(act.bat_level, circuit.batteries)])
    return np.concatenate([np.asarray(obs.v, dtype=float), taps,
                           act.cap_status.astype(float), act.bat_soc.astype(float), levels])


GRAPH_FEATURES = ("v", "cap_status", "reg_tap_norm", "bat_soc", "bat_level_norm")


def observation_graph(obs: Observation, rep) -> np.ndarray:
    """Node feature matrix ``N x 5``; buses without an actuator carry zeros in its column.

    Actuators sharing a bus add their features together.
    """
    circuit = rep.circuit
    act = obs.actuators
    feats = np.zeros((circuit.n_buses, len(GRAPH_FEATURES)))
    feats[:, 0] = obs.v
    for cap, st in zip(circuit.capacitors, act.cap_status):
        feats[cap.bus, 1] += st
    for k, (reg, tap) in enumerate(zip(circuit.regulators, act.reg_taps)):
        feats[circuit.regulator_bus(k), 2] += tap / (reg.num_taps - 1)
    for bat, soc, lv in zip(circuit.batteries, act.bat_soc, act.bat_level):
        feats[bat.bus, 3] += soc
        if bat.num_levels > 1:
            feats[bat.bus, 4] += 2.0 * lv / (bat.num_levels - 1) - 1.0
    return feats


class VoltVarEnv:
    """Single-threaded episode driver; many instances may share one Circuit."""

    def __init__(self, circuit: Circuit, config: EnvConfig | None = None):
        self.circuit = circuit
        self.config = config or EnvConfig()
        self.action_dims = circuit.action_dims
        self.profile = np.ones(self.config.horizon)
        self.actuators = ActuatorState.defaults(circuit)
        self.step_index = 0
        self.flow: FlowState | None = None
        self._active = False
        self._last_v = np.full(circuit.n_buses, np.sqrt(circuit.v_source))
        self._trace_dir: Path | None = None
        self._trace_rows: list | None = None
        self._trace_name = ""

    def enable_trace(self, directory) -> None:
        """Write one ``trace_<episode_seed>.csv`` of step diagnostics per episode."""
        self._trace_dir = Path(directory)
        self._trace_dir.mkdir(parents=True, exist_ok=True)

    def _flush_trace(self) -> None:
        with open(self._trace_dir / self._trace_name, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(TRACE_HEADER)
            w.writerows(self._trace_rows)
        self._trace_rows = None

    # episode lifecycle
    def sample_profile(self, episode_seed: int) -> np.ndarray:
        h = self.config.horizon
        rng = np.random.default_rng([self.config.seed, episode_seed])
        lo, hi = self.config.load_scale_range
        scale = rng.uniform(lo, hi)
        shape = np.resize(DIURNAL_SHAPE, h)
        return shape * scale

    def reset(self, episode_seed: int = 0, profile=None) -> Observation:
        """Start an episode; ``profile`` overrides the sampled per-step load multipliers."""
        if profile is None:
            self.profile = self.sample_profile(episode_seed)
        else:
            self.profile = np.asarray(profile, dtype=float)
            if self.profile.shape != (self.config.horizon,) or np.any(self.profile < 0):
                raise ValueError("profile must hold horizon non-negative multipliers")
        self.actuators = ActuatorState.defaults(self.circuit)
        self.step_index = 0
        inj = Injections.from_circuit(self.circuit, self.profile[0],
                                      np.zeros(len(self.circuit.batteries)), self.actuators.cap_status)
        self.flow = solve_distflow(self.circuit, inj, self._ratios(), self.config.tol,
                                   self.config.max_iter)
        self._last_v = self.flow.v
        self._active = True
        if self._trace_dir is not None:
            self._trace_rows, self._trace_name = [], f"trace_{episode_seed}.csv"
        return self.observation()

    def observation(self) -> Observation:
        return Observation(self._last_v.copy(), self.actuators.copy(), self.step_index)

    def _ratios(self) -> list[float]:
        return [r.ratio_sq(int(t)) for r, t in zip(self.circuit.regulators, self.actuators.reg_taps)]

    def _check_action(self, a: np.ndarray) -> None:
        if a.shape != (len(self.action_dims),):
            raise ActionRangeError(f"action must have {len(self.action_dims)} components, got {a.shape}")
        c = self.circuit
        names = ([f"regulator {k}" for k in range(len(c.regulators))]
                 + [f"capacitor {k}" for k in range(len(c.capacitors))]
                 + [f"battery {k}" for k in range(len(c.batteries))])
        for val, dim, name in zip(a, self.action_dims, names):
            if not 0 <= val < dim:
                raise ActionRangeError(f"{name}: action {val} outside [0, {dim - 1}]")

    def step(self, action) -> StepResult:
        if not self._active:
            raise EnvLifecycleError("step() called on a finished or unstarted episode; call reset()")
        a = action.flat() if isinstance(action, Action) else np.asarray(action, dtype=int).ravel()
        self._check_action(a)
        cfg, c = self.config, self.circuit
        nr, nc = len(c.regulators), len(c.capacitors)
        new_taps, new_caps, new_levels = a[:nr], a[nr:nr + nc], a[nr + nc:]
        old = self.actuators

        # battery dynamics with soc clamping
        bat_power = np.zeros(len(c.batteries))
        new_soc = old.bat_soc.copy()
        for k, bat in enumerate(c.batteries):
            p_cmd = bat.power(int(new_levels[k]))
            soc = float(np.clip(old.bat_soc[k] - p_cmd / bat.capacity, 0.0, 1.0))
            bat_power[k] = (old.bat_soc[k] - soc) * bat.capacity
            new_soc[k] = soc

        def norm_level(lv):
            return np.array([2.0 * x / (b.num_levels - 1) if b.num_levels > 1 else 0.0
                             for x, b in zip(lv, c.batteries)])

        tap_span = np.array([r.num_taps - 1 for r in c.regulators], dtype=float)
        change = (cfg.reg_change_cost * float((np.abs(new_taps - old.reg_taps) / tap_span).sum())
                  + cfg.cap_change_cost * float(np.abs(new_caps - old.cap_status).sum())
                  + cfg.bat_change_cost * float(np.abs(norm_level(new_levels) - norm_level(old.bat_level)).sum()))
        self.actuators = ActuatorState(new_taps.copy(), new_caps.copy(), new_levels.copy(), new_soc)

        mult = float(self.profile[self.step_index])
        inj = Injections.from_circuit(c, mult, bat_power, new_caps)
        info = {"load_multiplier": mult, "bat_power": bat_power.copy()}
        try:
            flow = solve_distflow(c, inj, self._ratios(), cfg.tol, cfg.max_iter)
            collapsed = False
        except PowerFlowError as exc:
            flow, collapsed = None, True
            info["error"] = str(exc)
        if flow is not None and flow.converged:
            r_v = -voltage_violation(flow, cfg.v_min, cfg.v_max)
            loss = power_loss(c, flow)
            self._last_v = flow.v
        else:
            r_v = -c.n_buses * (cfg.v_max - cfg.v_min)
            loss = power_loss(c, flow) if flow is not None else 0.0
            if flow is not None:
                self._last_v = flow.v
        self.flow = flow
        r_p = -loss
        r_c = -change
        reward = cfg.alpha_v * r_v + cfg.alpha_c * r_c + cfg.alpha_p * r_p
        self.step_index += 1
        done = self.step_index == cfg.horizon
        if done:
            self._active = False
        info.update(converged=bool(flow is not None and flow.converged), collapsed=collapsed,
                    power_loss=loss, violation=-r_v)
        if self._trace_rows is not None:
            self._trace_rows.append([self.step_index - 1, repr(mult), repr(reward), repr(r_v), repr(r_c), repr(r_p),
                                     int(info["converged"]), int(collapsed), repr(loss)])
            if done:
                self._flush_trace()
        return StepResult(self.observation(), reward, (r_v, r_c, r_p), done, info)

    # helpers
    def action_space_size(self) -> int:
        return int(np.prod(self.action_dims)) if self.action_dims else 1

    def all_actions(self):
        return (np.array(a, dtype=int) for a in itertools.product(*(range(d) for d in self.action_dims)))

    def best_single_step_action(self):
        """Exhaustively evaluate every action from the current state.

        Returns ``(best_action, best_reward, rewards)``; the environment is not advanced.
        """
        rewards = {}
        for a in self.all_actions():
            trial = copy.deepcopy(self)
            trial._trace_rows = None
            rewards[tuple(int(x) for x in a)] = trial.step(a).reward
        best = max(rewards, key=lambda k: rewards[k])
        return np.array(best), rewards[best], rewards

    def noop_action(self) -> np.ndarray:
        s = self.actuators
        return np.concatenate([s.reg_taps, s.cap_status, s.bat_level]).astype(int)

    def random_action(self, rng: np.random.Generator) -> np.ndarray:
        return np.array([rng.integers(0, d) for d in self.action_dims], dtype=int)
