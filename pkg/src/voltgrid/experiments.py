"""Evaluation protocols: observation robustness, actuator sensitivity, and the
augmentation x readout case study."""
from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .env import ActuatorState, EnvConfig, Observation, VoltVarEnv
from .grid import Circuit
from .policy import ActorCritic, PolicySpec
from .ppo import PPOConfig, evaluate_policy, policy_actor, train

ROBUSTNESS_HEADER = ["policy", "mode", "fraction", "subset", "seed", "nominal", "perturbed", "pct_diff"]


@dataclass
class PerturbationSpec:
    mode: str = "mask"
    fraction: float = 0.25
    noise_amplitude: float = 0.05
    n_subsets: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("mask", "noise"):
            raise ValueError("mode must be 'mask' or 'noise'")
        if not 0 < self.fraction <= 1:
            raise ValueError("fraction must lie in (0, 1]")
        if self.mode == "noise" and not self.noise_amplitude > 0:
            raise ValueError("noise_amplitude must be > 0 in noise mode")
        if self.n_subsets < 1:
            raise ValueError("n_subsets must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "PerturbationSpec":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown perturbation keys: {sorted(unknown)}")
        return cls(**d)


def subset_size(n: int, fraction: float) -> int:
    return max(1, int(np.floor(fraction * n + 0.5)))


def sample_subset(n: int, fraction: float, seed: int, index: int) -> np.ndarray:
    """Sorted bus ids drawn without replacement, deterministic in (seed, fraction, index)."""
    rng = np.random.default_rng([seed, int(round(fraction * 1_000_000)), index])
    return np.sort(rng.choice(n, subset_size(n, fraction), replace=False))


def perturb_observation(obs: Observation, subset, spec: PerturbationSpec,
                        rng: np.random.Generator | None = None) -> Observation:
    """Zero (mask) or add uniform noise to the voltages of ``subset``; actuator data untouched."""
    v = np.array(obs.v, dtype=float)
    subset = np.asarray(subset, dtype=int)
    if subset.size:
        if spec.mode == "mask":
            v[subset] = 0.0
        else:
            a = spec.noise_amplitude
            v[subset] += rng.uniform(-a, a, subset.size)
    return Observation(v, obs.actuators.copy(), obs.step_index)


@dataclass
class RobustnessReport:
    rows: list[dict]
    nominal: dict            # (policy, seed) -> nominal mean episodic reward
    cells: dict = field(default_factory=dict)   # (policy, mode, fraction) -> (mean, std, n)

    def cell(self, policy: str, fraction: float, mode: str = "mask") -> tuple[float, float, int]:
        return self.cells[(policy, mode, float(fraction))]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(ROBUSTNESS_HEADER)
            for r in self.rows:
                w.writerow([r["policy"], r["mode"], repr(float(r["fraction"])), r["subset"], r["seed"],
                            repr(float(r["nominal"])), repr(float(r["perturbed"])), repr(float(r["pct_diff"]))])

    def write_summary(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["policy", "mode", "fraction", "mean_pct_diff", "std_pct_diff", "n"])
            for (pol, mode, frac), (m, s, n) in sorted(self.cells.items()):
                w.writerow([pol, mode, repr(frac), repr(m), repr(s), n])


def percent_difference(perturbed: float, nominal: float) -> float:
    return 100.0 * (perturbed - nominal) / abs(nominal)


def _aggregate(rows) -> dict:
    groups: dict = {}
    for r in rows:
        groups.setdefault((r["policy"], r["mode"], float(r["fraction"])), []).append(r["pct_diff"])
    return {k: (float(np.mean(v)), float(np.std(v, ddof=1)) if len(v) > 1 else 0.0, len(v))
            for k, v in groups.items()}


def run_robustness(policies, circuit: Circuit, fractions, template: PerturbationSpec,
                   n_eval_episodes: int = 20, env_config: EnvConfig | None = None,
                   modes=None, eval_seed: int = 0) -> RobustnessReport:
    """Percent reward change under corrupted voltage observations.

    ``policies`` is an iterable of ``(label, seed, net_or_checkpoint_path)``.
    Subsets are shared across all policies for a given fraction (paired design).
    """
    env = VoltVarEnv(circuit, env_config or EnvConfig())
    modes = list(modes) if modes else [template.mode]
    rows, nominal = [], {}
    n = circuit.n_buses
    for label, seed, net in policies:
        if not isinstance(net, ActorCritic):
            net = ActorCritic.load(net, circuit)
        act = policy_actor(net, circuit, deterministic=True)
        nom = float(evaluate_policy(env, act, n_eval_episodes, eval_seed).mean())
        nominal[(label, seed)] = nom
        for mode in modes:
            for frac in fractions:
                spec = replace(template, mode=mode, fraction=float(frac))
                for s in range(spec.n_subsets):
                    subset = sample_subset(n, spec.fraction, spec.seed, s)

                    def perturb(obs, ep, t, subset=subset, spec=spec, s=s):
                        rng = np.random.default_rng(
                            [spec.seed, int(round(spec.fraction * 1_000_000)), s, ep, t])
                        return perturb_observation(obs, subset, spec, rng)

                    pert = float(evaluate_policy(env, act, n_eval_episodes, eval_seed, perturb).mean())
                    rows.append({"policy": label, "mode": mode, "fraction": spec.fraction, "subset": s,
                                 "seed": seed, "nominal": nom, "perturbed": pert,
                                 "pct_diff": percent_difference(pert, nom)})
    return RobustnessReport(rows, nominal, _aggregate(rows))


# sensitivity

def parse_actuator(circuit: Circuit, selector: str) -> tuple[str, int]:
    kind, _, idx = selector.partition(":")
    kind = {"reg": "regulator", "cap": "capacitor", "bat": "battery"}.get(kind, kind)
    counts = {"regulator": len(circuit.regulators), "capacitor": len(circuit.capacitors),
              "battery": len(circuit.batteries)}
    if kind not in counts or not idx.isdigit() or int(idx) >= counts[kind]:
        raise KeyError(f"unknown actuator {selector!r}")
    return kind, int(idx)


def actuator_bus(circuit: Circuit, kind: str, k: int) -> int:
    if kind == "regulator":
        return circuit.regulator_bus(k)
    if kind == "capacitor":
        return circuit.capacitors[k].bus
    return circuit.batteries[k].bus


def population_cov(a, b) -> float:
    """Two-pass population covariance (divides by n)."""
    # shift by the first sample so constant series give exactly 0
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    a, b = a - a[0], b - b[0]
    return float(np.mean((a - a.mean()) * (b - b.mean())))


@dataclass
class SensitivityResult:
    bus: int
    covariance: np.ndarray
    voltages: np.ndarray     # H x N trace

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write("# population covariance (divide by n) with the voltage at bus "
                     f"{self.bus}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["bus", "covariance"])
            for j, c in enumerate(self.covariance):
                w.writerow([j, repr(float(c))])


def run_sensitivity(circuit: Circuit, actuator: str | None, episode_seed: int = 0,
                    env_config: EnvConfig | None = None, reference_bus: int | None = None
                    ) -> SensitivityResult:
    """One constant-load episode with uniformly random commands to a single actuator.

    Every other actuator stays at its default setting. With ``actuator=None``
    nothing moves and ``reference_bus`` picks the bus to correlate against.
    """
    env = VoltVarEnv(circuit, env_config or EnvConfig())
    defaults = ActuatorState.defaults(circuit)
    base = np.concatenate([defaults.reg_taps, defaults.cap_status, defaults.bat_level]).astype(int)
    if actuator is None:
        if reference_bus is None:
            raise ValueError("reference_bus is required when no actuator is active")
        slot, bus = None, reference_bus
    else:
        kind, k = parse_actuator(circuit, actuator)
        offset = {"regulator": 0, "capacitor": len(circuit.regulators),
                  "battery": len(circuit.regulators) + len(circuit.capacitors)}[kind]
        slot = offset + k
        bus = actuator_bus(circuit, kind, k) if reference_bus is None else reference_bus
    rng = np.random.default_rng([episode_seed, 11])
    env.reset(episode_seed, profile=np.ones(env.config.horizon))
    trace = []
    done = False
    while not done:
        a = base.copy()
        if slot is not None:
            a[slot] = rng.integers(0, env.action_dims[slot])
        res = env.step(a)
        trace.append(res.observation.v)
        done = res.done
    trace = np.array(trace)
    cov = np.array([population_cov(trace[:, bus], trace[:, j]) for j in range(circuit.n_buses)])
    return SensitivityResult(bus, cov, trace)


# case study

VARIANTS = (("base", "mean_pool"), ("base", "local"), ("augmented", "mean_pool"), ("augmented", "local"))


def variant_name(topology: str, readout: str) -> str:
    return f"{topology}_{readout}"


@dataclass
class CaseStudyResult:
    table: list[dict]
    runs: dict
    robustness: dict

    def write_csv(self, path) -> None:
        keys = list(self.table[0])
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(keys)
            for row in self.table:
                w.writerow([repr(float(row[k])) if isinstance(row[k], float) else row[k] for k in keys])


def run_case_study(circuit: Circuit, env_config: EnvConfig, base_spec: PolicySpec, ppo_config: PPOConfig,
                   out_dir, fractions=(0.25, 0.5, 0.75), template: PerturbationSpec | None = None,
                   n_eval_episodes: int = 20, final_window: int = 100) -> CaseStudyResult:
    """Train every {base, augmented} x {mean_pool, local} Graph-PPO variant with identical seeds."""
    if not circuit.regulators:
        raise ValueError("case study needs at least one regulator")
    template = template or PerturbationSpec()
    out = Path(out_dir)
    table, runs, robustness = [], {}, {}
    for topology, readout in VARIANTS:
        name = variant_name(topology, readout)
        spec = replace(base_spec, kind="graph", readout=readout, augmented=topology == "augmented")
        res = train(circuit, env_config, spec, ppo_config, out / name)
        runs[name] = res
        rep = run_robustness([(name, ppo_config.seed, res.net)], circuit, fractions, template,
                             n_eval_episodes, env_config, modes=("mask", "noise"))
        rep.write_csv(out / name / "robustness.csv")
        robustness[name] = rep
        final = res.final_rewards(final_window)
        row = {"variant": name, "augmented": topology == "augmented", "readout": readout,
               "final_reward": float(final.mean()),
               "final_se": float(final.std(ddof=1) / np.sqrt(len(final))) if len(final) > 1 else 0.0}
        for mode in ("mask", "noise"):
            for f in fractions:
                m, s, _ = rep.cell(name, f, mode)
                row[f"{mode}_{int(round(f * 100))}_mean"] = m
                row[f"{mode}_{int(round(f * 100))}_std"] = s
        table.append(row)
    result = CaseStudyResult(table, runs, robustness)
    result.write_csv(out / "case_study.csv")
    return result
