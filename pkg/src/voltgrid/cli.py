"""Command-line front end.

    voltgrid <command> [--config run.toml] [--section.key=value ...]

Every leaf of the experiment config can be overridden with a dotted flag,
e.g. ``--ppo.lr=1e-3`` or ``--robustness.fractions=0.25,0.75``. Overrides win
over the file; the resolved config is copied into the output directory.

Exit codes: 0 ok, 2 config error, 3 runtime error, 4 checkpoint mismatch.
"""
from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib
import tomli_w

from .autodiff import CheckpointError
from .env import ActuatorState, EnvConfig, VoltVarEnv
from .experiments import PerturbationSpec, run_case_study, run_robustness, run_sensitivity
from .graph import graph_for
from .grid import Circuit, CircuitError, InfeasibleFeederError, generate_feeder, load_circuit
from .policy import ActorCritic, PolicySpec
from .powerflow import Injections, PowerFlowError, power_loss, solve_distflow, voltage_violation
from .ppo import PPOConfig, PPONumericError, evaluate_policy, policy_actor, random_actor, train

log = logging.getLogger("voltgrid")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_CHECKPOINT = 0, 2, 3, 4
SEED_ENV = "VOLTGRID_SEED"


class ConfigError(ValueError):
    pass


class SolverError(RuntimeError):
    pass


# config blocks

@dataclass
class PolicyBlock:
    kind: str = "graph"
    hidden_dim: int = 64
    num_layers: int = 3
    readout: str = "mean_pool"
    augmented: bool = False
    v_center: float = 1.0
    v_scale: float = 0.05


@dataclass
class SimulateBlock:
    load_multiplier: float = 1.0
    reg_taps: list = field(default_factory=list)     # empty -> middle tap
    cap_status: list = field(default_factory=list)   # empty -> open
    bat_levels: list = field(default_factory=list)   # empty -> zero level


@dataclass
class EvalBlock:
    checkpoint: str = ""
    n_episodes: int = 100
    eval_seed: int = 0


@dataclass
class RobustnessBlock:
    fractions: list = field(default_factory=lambda: [0.25, 0.5, 0.75])
    modes: list = field(default_factory=lambda: ["mask", "noise"])
    noise_amplitude: float = 0.05
    n_subsets: int = 5
    n_eval_episodes: int = 20
    eval_seed: int = 0
    subset_seed: int = 0
    # each entry: {label, seed, path}
    checkpoints: list = field(default_factory=list)


@dataclass
class SensitivityBlock:
    actuator: str = "regulator:0"   # "none" keeps every actuator fixed
    episode_seed: int = 0
    reference_bus: int = -1         # -1: the actuator's own bus


@dataclass
class CaseStudyBlock:
    episodes: int = 1000
    fractions: list = field(default_factory=lambda: [0.25, 0.5, 0.75])
    n_eval_episodes: int = 20
    final_window: int = 100


@dataclass
class MakeFeederBlock:
    n_buses: int = 34
    n_regulators: int = 2
    n_capacitors: int = 2
    n_batteries: int = 2
    seed: int = 0
    name: str = ""
    output: str = ""


BLOCKS = {"env": EnvConfig, "policy": PolicyBlock, "ppo": PPOConfig, "simulate": SimulateBlock,
          "eval": EvalBlock, "robustness": RobustnessBlock, "sensitivity": SensitivityBlock,
          "case_study": CaseStudyBlock, "makefeeder": MakeFeederBlock}
TOP_LEVEL = {"circuit", "out_dir", "seed"}


def _block(cls, raw: dict, name: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"[{name}] must be a table")
    unknown = set(raw) - {f.name for f in fields(cls)}
    if unknown:
        raise ConfigError(f"unknown keys in [{name}]: {sorted(unknown)}")
    try:
        return cls(**raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{name}]: {exc}") from None


@dataclass
class ExperimentConfig:
    circuit: str = "feeder13"
    out_dir: str = "runs/default"
    seed: int = 0
    env: EnvConfig = field(default_factory=EnvConfig)
    policy: PolicyBlock = field(default_factory=PolicyBlock)
    ppo: PPOConfig = field(default_factory=PPOConfig)
    simulate: SimulateBlock = field(default_factory=SimulateBlock)
    eval: EvalBlock = field(default_factory=EvalBlock)
    robustness: RobustnessBlock = field(default_factory=RobustnessBlock)
    sensitivity: SensitivityBlock = field(default_factory=SensitivityBlock)
    case_study: CaseStudyBlock = field(default_factory=CaseStudyBlock)
    makefeeder: MakeFeederBlock = field(default_factory=MakeFeederBlock)

    @classmethod
    def from_dict(cls, raw: dict, environ=None) -> "ExperimentConfig":
        """Build from a nested mapping; the global seed seeds every block that leaves its own unset."""
        environ = os.environ if environ is None else environ
        raw = {k: (dict(v) if isinstance(v, dict) else v) for k, v in raw.items()}
        unknown = set(raw) - TOP_LEVEL - set(BLOCKS)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if "seed" in raw:
            seed = raw["seed"]
        elif environ.get(SEED_ENV, "").strip():
            try:
                seed = int(environ[SEED_ENV])
            except ValueError:
                raise ConfigError(f"{SEED_ENV} must be an integer, got {environ[SEED_ENV]!r}") from None
        else:
            seed = 0
        if not isinstance(seed, int) or isinstance(seed, bool):
            raise ConfigError("seed must be an integer")
        for name in ("env", "ppo"):
            raw.setdefault(name, {}).setdefault("seed", seed)
        raw.setdefault("robustness", {}).setdefault("subset_seed", seed)
        raw.setdefault("sensitivity", {}).setdefault("episode_seed", seed)
        raw.setdefault("makefeeder", {}).setdefault("seed", seed)
        env_raw = raw["env"]
        if "load_scale_range" in env_raw:
            env_raw["load_scale_range"] = tuple(env_raw["load_scale_range"])
        blocks = {name: _block(cls_, raw.get(name, {}), name) for name, cls_ in BLOCKS.items()}
        return cls(circuit=str(raw.get("circuit", "feeder13")), out_dir=str(raw.get("out_dir", "runs/default")),
                   seed=seed, **blocks)

    def to_dict(self) -> dict:
        d = {"circuit": self.circuit, "out_dir": self.out_dir, "seed": self.seed}
        for name in BLOCKS:
            blk = getattr(self, name)
            d[name] = blk.to_dict() if hasattr(blk, "to_dict") else asdict(blk)
        return d

    def write(self, path) -> None:
        Path(path).write_bytes(tomli_w.dumps(self.to_dict()).encode())

    def load_circuit(self) -> Circuit:
        return load_circuit(self.circuit)

    def policy_spec(self, circuit: Circuit) -> PolicySpec:
        try:
            return PolicySpec.for_circuit(circuit, **asdict(self.policy))
        except ValueError as exc:
            raise ConfigError(f"[policy]: {exc}") from None


def parse_value(text: str):
    """TOML scalar/array syntax, bare comma lists, else a plain string."""
    try:
        return tomllib.loads(f"x = {text}")["x"]
    except tomllib.TOMLDecodeError:
        pass
    if "," in text:
        return [parse_value(t.strip()) for t in text.split(",")]
    return text


def apply_overrides(raw: dict, overrides: list[str]) -> dict:
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        parts = key.split(".")
        node = raw
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r} descends into a non-table")
        node[parts[-1]] = parse_value(value)
    return raw


def split_dotted(argv: list[str]) -> tuple[list[str], list[str]]:
    """Separate ``--a.b=v`` / ``--a.b v`` flags from the regular argv."""
    rest, dotted = [], []
    i = 0
    while i < len(argv):
        arg = argv[i]
        if arg.startswith("--") and "." in arg.split("=", 1)[0]:
            if "=" in arg:
                dotted.append(arg[2:])
            elif i + 1 < len(argv):
                dotted.append(f"{arg[2:]}={argv[i + 1]}")
                i += 1
            else:
                raise ConfigError(f"flag {arg} needs a value")
        else:
            rest.append(arg)
        i += 1
    return rest, dotted


def resolve_config(config_path, overrides: list[str], environ=None) -> ExperimentConfig:
    raw: dict = {}
    if config_path:
        path = Path(config_path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            raw = tomllib.loads(path.read_text())
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
    return ExperimentConfig.from_dict(apply_overrides(raw, overrides), environ)


# commands

def _out(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.write(out / "config.toml")
    return out


def _settings(circuit: Circuit, blk: SimulateBlock):
    d = ActuatorState.defaults(circuit)
    taps = np.array(blk.reg_taps or d.reg_taps, dtype=int)
    caps = np.array(blk.cap_status or d.cap_status, dtype=int)
    levels = np.array(blk.bat_levels or d.bat_level, dtype=int)
    if (len(taps), len(caps), len(levels)) != (len(circuit.regulators), len(circuit.capacitors),
                                               len(circuit.batteries)):
        raise ConfigError("[simulate] settings do not match the circuit's actuator counts")
    for reg, t in zip(circuit.regulators, taps):
        if not 0 <= t < reg.num_taps:
            raise ConfigError(f"[simulate] tap {t} outside [0, {reg.num_taps - 1}]")
    for bat, lv in zip(circuit.batteries, levels):
        if not 0 <= lv < bat.num_levels:
            raise ConfigError(f"[simulate] battery level {lv} outside [0, {bat.num_levels - 1}]")
    return taps, caps, levels


def cmd_simulate(cfg: ExperimentConfig, args) -> int:
    circuit = cfg.load_circuit()
    taps, caps, levels = _settings(circuit, cfg.simulate)
    bat_p = [b.power(int(lv)) for b, lv in zip(circuit.batteries, levels)]
    inj = Injections.from_circuit(circuit, cfg.simulate.load_multiplier, bat_p, caps)
    ratios = [r.ratio_sq(int(t)) for r, t in zip(circuit.regulators, taps)]
    flow = solve_distflow(circuit, inj, ratios, cfg.env.tol, cfg.env.max_iter)
    out = _out(cfg)
    with open(out / "buses.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bus", "name", "v", "v_sq"])
        for b, v, vs in zip(circuit.buses, flow.v, flow.v_sq):
            w.writerow([b.id, b.name, repr(float(v)), repr(float(vs))])
    with open(out / "lines.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["line", "from", "to", "p", "q", "l"])
        for k, ln in enumerate(circuit.lines):
            w.writerow([k, ln.from_bus, ln.to_bus, repr(float(flow.p_line[k])), repr(float(flow.q_line[k])),
                        repr(float(flow.l_line[k]))])
    print(f"loss={power_loss(circuit, flow):.6g} violation="
          f"{voltage_violation(flow, cfg.env.v_min, cfg.env.v_max):.6g} "
          f"converged={flow.converged} iterations={flow.iterations}")
    if not flow.converged:
        raise SolverError(f"power flow did not converge in {flow.iterations} iterations")
    return EXIT_OK


def cmd_train(cfg: ExperimentConfig, args) -> int:
    circuit = cfg.load_circuit()
    spec = cfg.policy_spec(circuit)
    out = _out(cfg)
    res = train(circuit, cfg.env, spec, cfg.ppo, out, progress=True)
    final = res.final_rewards()
    print(f"trained {cfg.ppo.episodes_total} episodes; final-{len(final)} mean reward {final.mean():.6g}")
    print(f"checkpoint: {res.final_checkpoint}")
    return EXIT_OK


def _require_file(path: str, what: str) -> Path:
    if not path:
        raise ConfigError(f"{what} is required")
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"{what} not found: {p}")
    return p


def cmd_eval(cfg: ExperimentConfig, args) -> int:
    circuit = cfg.load_circuit()
    ckpt = _require_file(cfg.eval.checkpoint, "checkpoint")
    net = ActorCritic.load(ckpt, circuit)
    env = VoltVarEnv(circuit, cfg.env)
    n, seed = cfg.eval.n_episodes, cfg.eval.eval_seed
    out = _out(cfg)
    if args.trace:
        env.enable_trace(out / "traces")
    pol = evaluate_policy(env, policy_actor(net, circuit), n, seed)
    if args.trace:
        env = VoltVarEnv(circuit, cfg.env)
    rnd = evaluate_policy(env, random_actor(env, seed), n, seed)
    with open(out / "eval.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["episode", "policy_reward", "random_reward"])
        for i, (a, b) in enumerate(zip(pol, rnd)):
            w.writerow([i, repr(float(a)), repr(float(b))])
    diff = pol - rnd
    se = diff.std(ddof=1) / np.sqrt(n) if n > 1 else float("nan")
    print(f"policy {pol.mean():.6g}  random {rnd.mean():.6g}  paired gain {diff.mean():.6g} "
          f"({diff.mean() / se:.1f} SE)")
    return EXIT_OK


def _checkpoint_list(cfg: ExperimentConfig, flags: list[str]) -> list[tuple[str, int, Path]]:
    entries = list(cfg.robustness.checkpoints)
    for f in flags or []:
        # LABEL[:SEED]=PATH
        label, sep, path = f.partition("=")
        if not sep:
            label, path = Path(f).parent.name or "policy", f
        label, _, seed = label.partition(":")
        entries.append({"label": label, "seed": int(seed) if seed else cfg.seed, "path": path})
    if not entries:
        raise ConfigError("robustness needs at least one checkpoint (--checkpoint LABEL[:SEED]=PATH)")
    out = []
    for e in entries:
        unknown = set(e) - {"label", "seed", "path"}
        if unknown or "path" not in e:
            raise ConfigError(f"bad checkpoint entry {e!r}")
        out.append((str(e.get("label", "policy")), int(e.get("seed", cfg.seed)),
                    _require_file(str(e["path"]), "checkpoint")))
    return out


def cmd_robustness(cfg: ExperimentConfig, args) -> int:
    circuit = cfg.load_circuit()
    blk = cfg.robustness
    policies = [(label, seed, ActorCritic.load(path, circuit))
                for label, seed, path in _checkpoint_list(cfg, args.checkpoint)]
    try:
        template = PerturbationSpec(mode=blk.modes[0], noise_amplitude=blk.noise_amplitude,
                                    n_subsets=blk.n_subsets, seed=blk.subset_seed)
    except (ValueError, IndexError) as exc:
        raise ConfigError(f"[robustness]: {exc}") from None
    out = _out(cfg)
    rep = run_robustness(policies, circuit, [float(f) for f in blk.fractions], template, blk.n_eval_episodes,
                         cfg.env, modes=blk.modes, eval_seed=blk.eval_seed)
    rep.write_csv(out / "robustness.csv")
    rep.write_summary(out / "robustness_summary.csv")
    print(f"{'policy':<12}{'mode':<7}{'fraction':>9}{'mean %':>10}{'std':>8}")
    for (pol, mode, frac), (m, s, _) in sorted(rep.cells.items()):
        print(f"{pol:<12}{mode:<7}{frac:>9.2f}{m:>10.2f}{s:>8.2f}")
    return EXIT_OK


def cmd_sensitivity(cfg: ExperimentConfig, args) -> int:
    circuit = cfg.load_circuit()
    blk = cfg.sensitivity
    actuator = None if blk.actuator.lower() == "none" else blk.actuator
    ref = None if blk.reference_bus < 0 else blk.reference_bus
    if ref is not None and ref >= circuit.n_buses:
        raise ConfigError(f"[sensitivity] reference_bus {ref} outside the circuit")
    try:
        res = run_sensitivity(circuit, actuator, blk.episode_seed, cfg.env, ref)
    except KeyError as exc:
        raise ConfigError(str(exc.args[0])) from None
    except ValueError as exc:
        raise ConfigError(f"[sensitivity]: {exc}") from None
    out = _out(cfg)
    res.write_csv(out / "sensitivity.csv")
    with open(out / "voltage_trace.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step"] + [f"v{j}" for j in range(circuit.n_buses)])
        for t, row in enumerate(res.voltages):
            w.writerow([t] + [repr(float(x)) for x in row])
    print(f"covariance against bus {res.bus}: " + " ".join(f"{c:.3g}" for c in res.covariance))
    return EXIT_OK


def cmd_casestudy(cfg: ExperimentConfig, args) -> int:
    circuit = cfg.load_circuit()
    blk = cfg.case_study
    ppo = PPOConfig.from_dict({**cfg.ppo.to_dict(), "episodes_total": blk.episodes})
    template = PerturbationSpec(noise_amplitude=cfg.robustness.noise_amplitude,
                                n_subsets=cfg.robustness.n_subsets, seed=cfg.robustness.subset_seed)
    out = _out(cfg)
    res = run_case_study(circuit, cfg.env, cfg.policy_spec(circuit), ppo, out, [float(f) for f in blk.fractions],
                         template, blk.n_eval_episodes, blk.final_window)
    for row in res.table:
        print(f"{row['variant']:<20} final {row['final_reward']:.4g} +- {row['final_se']:.2g}")
    return EXIT_OK


def cmd_makefeeder(cfg: ExperimentConfig, args) -> int:
    blk = cfg.makefeeder
    try:
        c = generate_feeder(blk.n_buses, blk.n_regulators, blk.n_capacitors, blk.n_batteries, blk.seed,
                            blk.name or None)
    except ValueError as exc:
        raise ConfigError(f"[makefeeder]: {exc}") from None
    path = Path(blk.output) if blk.output else _out(cfg) / f"{c.name}.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(c.to_json() + "\n")
    print(f"wrote {path} ({c.n_buses} buses)")
    return EXIT_OK


def _plot_series(plt, x, ys: dict, xlabel: str, stem: Path) -> list[Path]:
    written = []
    for name, y in ys.items():
        fig, ax = plt.subplots(figsize=(5, 3.2))
        ax.plot(x, y, lw=1.2)
        ax.set_xlabel(xlabel)
        ax.set_ylabel(name)
        ax.grid(alpha=0.3)
        fig.tight_layout()
        path = stem.with_name(f"{stem.name}_{name}.svg")
        fig.savefig(path, metadata={"Date": None})
        plt.close(fig)
        written.append(path)
    return written


def _plot_bars(plt, rows: list[dict], stem: Path) -> list[Path]:
    written = []
    for mode in sorted({r["mode"] for r in rows}):
        sub = [r for r in rows if r["mode"] == mode]
        pols = sorted({r["policy"] for r in sub})
        fracs = sorted({float(r["fraction"]) for r in sub})
        fig, ax = plt.subplots(figsize=(5, 3.2))
        width = 0.8 / max(len(pols), 1)
        for i, pol in enumerate(pols):
            cell = {float(r["fraction"]): r for r in sub if r["policy"] == pol}
            xs = np.arange(len(fracs)) + i * width
            ax.bar(xs, [float(cell[f]["mean_pct_diff"]) for f in fracs], width,
                   yerr=[float(cell[f]["std_pct_diff"]) for f in fracs], label=pol, capsize=2)
        ax.set_xticks(np.arange(len(fracs)) + width * (len(pols) - 1) / 2, [f"{f:g}" for f in fracs])
        ax.set_xlabel("fraction of buses perturbed")
        ax.set_ylabel("reward change (%)")
        ax.set_title(mode)
        ax.legend(fontsize=8)
        fig.tight_layout()
        path = stem.with_name(f"{stem.name}_{mode}.svg")
        fig.savefig(path, metadata={"Date": None})
        plt.close(fig)
        written.append(path)
    return written


def cmd_plot(cfg: ExperimentConfig, args) -> int:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    plt.rcParams["svg.hashsalt"] = "voltgrid"
    if not args.input:
        raise ConfigError("plot needs --input CSV")
    written = []
    for src in args.input:
        path = _require_file(src, "plot input")
        with open(path, newline="") as fh:
            rows = [r for r in csv.DictReader(line for line in fh if not line.startswith("#"))]
        header = set(rows[0]) if rows else set()
        out_stem = (Path(args.out) / path.stem) if args.out else path.with_suffix("")
        out_stem.parent.mkdir(parents=True, exist_ok=True)
        if {"episodes", "mean_reward", "r_v", "r_c", "r_p"} <= header:
            x = [int(r["episodes"]) for r in rows]
            ys = {k: [float(r[k]) for r in rows] for k in ("mean_reward", "r_v", "r_c", "r_p")}
            written += _plot_series(plt, x, ys, "episodes", out_stem)
        elif {"episode", "reward"} <= header:
            x = [int(r["episode"]) for r in rows]
            ys = {k: [float(r[k]) for r in rows] for k in ("reward", "r_v", "r_c", "r_p") if k in header}
            written += _plot_series(plt, x, ys, "episode", out_stem)
        elif {"mean_pct_diff", "std_pct_diff"} <= header:
            written += _plot_bars(plt, rows, out_stem)
        elif {"policy", "mode", "fraction", "pct_diff"} <= header:
            groups: dict = {}
            for r in rows:
                groups.setdefault((r["policy"], r["mode"], float(r["fraction"])), []).append(float(r["pct_diff"]))
            agg = [{"policy": p, "mode": m, "fraction": f, "mean_pct_diff": np.mean(v),
                    "std_pct_diff": np.std(v, ddof=1) if len(v) > 1 else 0.0} for (p, m, f), v in groups.items()]
            written += _plot_bars(plt, agg, out_stem)
        elif {"bus", "covariance"} <= header:
            fig, ax = plt.subplots(figsize=(5, 3.2))
            ax.bar([int(r["bus"]) for r in rows], [float(r["covariance"]) for r in rows])
            ax.set_xlabel("bus")
            ax.set_ylabel("voltage covariance")
            fig.tight_layout()
            p = out_stem.with_name(f"{out_stem.name}_covariance.svg")
            fig.savefig(p, metadata={"Date": None})
            plt.close(fig)
            written.append(p)
        else:
            raise ConfigError(f"{path}: unrecognised CSV layout")
    for p in written:
        print(p)
    return EXIT_OK


def cmd_graph(cfg: ExperimentConfig, args) -> int:
    if args.action != "export":
        raise ConfigError(f"unknown graph action {args.action!r}")
    circuit = cfg.load_circuit()
    rep = graph_for(circuit, cfg.policy.augmented)
    out = Path(args.out or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "edges.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["u", "v"])
        w.writerows(sorted(rep.edges))
    with open(out / "norm_adj.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([""] + list(range(rep.n)))
        for i, row in enumerate(rep.norm_adj):
            w.writerow([i] + [repr(float(x)) for x in row])
    print(f"wrote {out / 'edges.csv'} and {out / 'norm_adj.csv'}")
    return EXIT_OK


COMMANDS = {"simulate": cmd_simulate, "train": cmd_train, "eval": cmd_eval, "robustness": cmd_robustness,
            "sensitivity": cmd_sensitivity, "casestudy": cmd_casestudy, "makefeeder": cmd_makefeeder,
            "plot": cmd_plot, "graph": cmd_graph}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="voltgrid", description=__doc__.split("\n\n")[0],
                                     epilog="Any config leaf can be set with --section.key=value.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="TOML experiment config")
        p.add_argument("--circuit", help="circuit JSON path or bundled feeder name")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int, help="global seed (falls back to $VOLTGRID_SEED)")
        if name == "graph":
            p.add_argument("action", choices=["export"])
            p.add_argument("--augmented", action="store_true", help="add regulator edges")
        if name in ("train", "casestudy"):
            p.add_argument("--episodes", type=int)
        if name in ("eval", "robustness"):
            p.add_argument("--checkpoint", action="append",
                           help="checkpoint path; for robustness LABEL[:SEED]=PATH, repeatable")
        if name == "eval":
            p.add_argument("--trace", action="store_true", help="write per-episode step diagnostics")
        if name == "robustness":
            p.add_argument("--fractions", help="comma-separated fractions")
        if name == "sensitivity":
            p.add_argument("--actuator", help="e.g. regulator:0, capacitor:1, battery:0 or none")
        if name == "plot":
            p.add_argument("--input", action="append", help="CSV to plot; repeatable")
        if name == "makefeeder":
            p.add_argument("--n-buses", type=int)
            p.add_argument("--output")
    return parser


def _shortcut_overrides(args) -> list[str]:
    """Translate convenience flags into dotted overrides."""
    out = []
    if args.circuit:
        out.append(f"circuit={_quote(args.circuit)}")
    if args.out and args.command != "plot":
        out.append(f"out_dir={_quote(args.out)}")
    if args.seed is not None:
        out.append(f"seed={args.seed}")
    if getattr(args, "episodes", None) is not None:
        key = "case_study.episodes" if args.command == "casestudy" else "ppo.episodes_total"
        out.append(f"{key}={args.episodes}")
    if args.command == "eval" and args.checkpoint:
        out.append(f"eval.checkpoint={_quote(args.checkpoint[-1])}")
    if getattr(args, "fractions", None):
        out.append(f"robustness.fractions=[{args.fractions}]")
    if getattr(args, "actuator", None):
        out.append(f"sensitivity.actuator={_quote(args.actuator)}")
    if getattr(args, "augmented", False):
        out.append("policy.augmented=true")
    if getattr(args, "n_buses", None) is not None:
        out.append(f"makefeeder.n_buses={args.n_buses}")
    if getattr(args, "output", None):
        out.append(f"makefeeder.output={_quote(args.output)}")
    return out


def _quote(s: str) -> str:
    return tomli_w.dumps({"x": s})[4:].strip()


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        rest, dotted = split_dotted(argv)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    parser = build_parser()
    try:
        args = parser.parse_args(rest)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = resolve_config(args.config, _shortcut_overrides(args) + dotted)
        return COMMANDS[args.command](cfg, args)
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except (ConfigError, CircuitError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (PowerFlowError, SolverError, PPONumericError, InfeasibleFeederError, FloatingPointError,
            RuntimeError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
