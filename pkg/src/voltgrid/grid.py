"""Radial circuit data model, file format, validation and synthetic feeders.

All quantities are per-unit. Bus 0 is the substation; lines are directed
parent -> child and must form a spanning tree rooted at bus 0.
"""
from __future__ import annotations

import json
from collections import deque
from dataclasses import asdict, dataclass, field
from functools import cached_property
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np


class CircuitError(ValueError):
    """Raised when a circuit file cannot be parsed or fails validation."""


@dataclass(frozen=True)
class Bus:
    id: int
    name: str
    base_load_p: float = 0.0
    base_load_q: float = 0.0


@dataclass(frozen=True)
class Line:
    from_bus: int
    to_bus: int
    r: float
    x: float
    is_regulator: bool = False


@dataclass(frozen=True)
class Regulator:
    line_index: int
    num_taps: int = 33
    ratio_min: float = 0.9
    ratio_max: float = 1.1

    def ratio(self, tap: int) -> float:
        step = (self.ratio_max - self.ratio_min) / (self.num_taps - 1)
        return self.ratio_min + tap * step

    def ratio_sq(self, tap: int) -> float:
        return self.ratio(tap) ** 2

    @property
    def middle_tap(self) -> int:
        return (self.num_taps - 1) // 2


@dataclass(frozen=True)
class Capacitor:
    bus: int
    q_rated: float


@dataclass(frozen=True)
class Battery:
    bus: int
    p_rated: float
    capacity: float
    num_levels: int = 5
    soc_init: float = 0.5

    def power(self, level: int) -> float:
        """Injection for a discrete level; positive is discharge."""
        return self.p_rated * (2.0 * level / (self.num_levels - 1) - 1.0)

    @property
    def zero_level(self) -> int:
        return (self.num_levels - 1) // 2


@dataclass(frozen=True)
class Circuit:
    buses: tuple[Bus, ...]
    lines: tuple[Line, ...]
    regulators: tuple[Regulator, ...] = ()
    capacitors: tuple[Capacitor, ...] = ()
    batteries: tuple[Battery, ...] = ()
    v_source: float = 1.0
    name: str = "circuit"

    @property
    def n_buses(self) -> int:
        return len(self.buses)

    @cached_property
    def parent(self) -> np.ndarray:
        """parent[j] for every bus; -1 at the root."""
        par = np.full(self.n_buses, -1, dtype=int)
        for ln in self.lines:
            par[ln.to_bus] = ln.from_bus
        return par

    @cached_property
    def parent_line(self) -> np.ndarray:
        """Index of the line feeding each bus; -1 at the root."""
        idx = np.full(self.n_buses, -1, dtype=int)
        for k, ln in enumerate(self.lines):
            idx[ln.to_bus] = k
        return idx

    @cached_property
    def children(self) -> tuple[tuple[int, ...], ...]:
        kids: list[list[int]] = [[] for _ in range(self.n_buses)]
        for ln in self.lines:
            kids[ln.from_bus].append(ln.to_bus)
        return tuple(tuple(k) for k in kids)

    @cached_property
    def bfs_order(self) -> tuple[int, ...]:
        """Buses in breadth-first order from the root."""
        order = []
        queue = deque([0])
        while queue:
            b = queue.popleft()
            order.append(b)
            queue.extend(self.children[b])
        return tuple(order)

    @cached_property
    def depth(self) -> int:
        d = np.zeros(self.n_buses, dtype=int)
        for b in self.bfs_order[1:]:
            d[b] = d[self.parent[b]] + 1
        return int(d.max())

    def regulator_bus(self, k: int) -> int:
        """Child bus of regulator ``k``'s line (where its features live)."""
        return self.lines[self.regulators[k].line_index].to_bus

    @property
    def actuator_buses(self) -> list[int]:
        """Buses of every actuator in canonical order: regulators, capacitors, batteries."""
        return ([self.regulator_bus(k) for k in range(len(self.regulators))]
                + [c.bus for c in self.capacitors]
                + [b.bus for b in self.batteries])

    @property
    def action_dims(self) -> list[int]:
        return ([r.num_taps for r in self.regulators]
                + [2] * len(self.capacitors)
                + [b.num_levels for b in self.batteries])

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "v_source": self.v_source,
            "buses": [{"id": b.id, "name": b.name, "p": b.base_load_p, "q": b.base_load_q}
                      for b in self.buses],
            "lines": [{"from": ln.from_bus, "to": ln.to_bus, "r": ln.r, "x": ln.x,
                       "regulator": ln.is_regulator} for ln in self.lines],
            "regulators": [{"line": r.line_index, "num_taps": r.num_taps,
                            "ratio_min": r.ratio_min, "ratio_max": r.ratio_max}
                           for r in self.regulators],
            "capacitors": [asdict(c) for c in self.capacitors],
            "batteries": [asdict(b) for b in self.batteries],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"


_NUM = {"type": "number"}
_INT = {"type": "integer"}


def _obj(props: dict, required: list[str] | None = None) -> dict:
    return {"type": "object", "properties": props, "additionalProperties": False,
            "required": list(props) if required is None else required}


CIRCUIT_SCHEMA = _obj(
    {
        "name": {"type": "string"},
        "v_source": _NUM,
        "buses": {"type": "array", "items": _obj(
            {"id": _INT, "name": {"type": "string"}, "p": _NUM, "q": _NUM}, ["id", "p", "q"])},
        "lines": {"type": "array", "items": _obj(
            {"from": _INT, "to": _INT, "r": _NUM, "x": _NUM, "regulator": {"type": "boolean"}},
            ["from", "to", "r", "x"])},
        "regulators": {"type": "array", "items": _obj(
            {"line": _INT, "num_taps": _INT, "ratio_min": _NUM, "ratio_max": _NUM}, ["line"])},
        "capacitors": {"type": "array", "items": _obj({"bus": _INT, "q_rated": _NUM})},
        "batteries": {"type": "array", "items": _obj(
            {"bus": _INT, "p_rated": _NUM, "capacity": _NUM, "num_levels": _INT, "soc_init": _NUM},
            ["bus", "p_rated", "capacity"])},
    },
    required=["buses", "lines"],
)


def circuit_from_dict(doc: dict) -> Circuit:
    """Build a circuit from a parsed document; raises CircuitError on schema or invariant failure."""
    try:
        jsonschema.validate(doc, CIRCUIT_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise CircuitError(f"schema error at {where}: {exc.message}") from None
    circuit = Circuit(
        buses=tuple(Bus(b["id"], b.get("name", str(b["id"])), float(b["p"]), float(b["q"]))
                    for b in doc["buses"]),
        lines=tuple(Line(ln["from"], ln["to"], float(ln["r"]), float(ln["x"]),
                         bool(ln.get("regulator", False))) for ln in doc["lines"]),
        regulators=tuple(Regulator(r["line"], r.get("num_taps", 33), float(r.get("ratio_min", 0.9)),
                                   float(r.get("ratio_max", 1.1)))
                         for r in doc.get("regulators", [])),
        capacitors=tuple(Capacitor(c["bus"], float(c["q_rated"])) for c in doc.get("capacitors", [])),
        batteries=tuple(Battery(b["bus"], float(b["p_rated"]), float(b["capacity"]),
                                b.get("num_levels", 5), float(b.get("soc_init", 0.5)))
                        for b in doc.get("batteries", [])),
        v_source=float(doc.get("v_source", 1.0)),
        name=doc.get("name", "circuit"),
    )
    problems = validate_circuit(circuit)
    if problems:
        raise CircuitError(problems[0])
    return circuit


def load_circuit(path: str | Path) -> Circuit:
    """Read and validate a circuit file.

    ``path`` may also name a bundled feeder (``feeder13``, ``feeder34.json``, ...).
    """
    p = Path(path)
    if not p.exists():
        bundled = bundled_feeder_path(str(path))
        if bundled is None:
            raise CircuitError(f"circuit file not found: {path}")
        p = bundled
    try:
        doc = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CircuitError(f"parse error in {p}: {exc}") from None
    return circuit_from_dict(doc)


def bundled_feeder_path(name: str) -> Path | None:
    stem = name[:-5] if name.endswith(".json") else name
    if "/" in stem or "\\" in stem:
        return None
    candidate = resources.files("voltgrid").joinpath("feeders").joinpath(f"{stem}.json")
    return Path(str(candidate)) if candidate.is_file() else None


def _topology_violations(circuit: Circuit) -> list[str]:
    n = circuit.n_buses
    out = []
    if n == 0:
        return ["circuit has no buses"]
    if [b.id for b in circuit.buses] != list(range(n)):
        return ["bus ids must be 0..N-1 in order"]
    parents: dict[int, int] = {}
    for k, ln in enumerate(circuit.lines):
        for b in (ln.from_bus, ln.to_bus):
            if not 0 <= b < n:
                return [f"line {k} references unknown bus {b}"]
        if ln.from_bus == ln.to_bus:
            return [f"not a tree: line {k} is a self-loop"]
        if ln.to_bus == 0:
            return [f"not a tree: line {k} feeds the root bus"]
        if ln.to_bus in parents:
            return [f"not a tree: bus {ln.to_bus} has more than one parent (cycle detected)"]
        parents[ln.to_bus] = ln.from_bus
    if len(circuit.lines) != n - 1:
        out.append(f"not a tree: expected {n - 1} lines, found {len(circuit.lines)}")
    # walk every bus to the root; a walk longer than n means a cycle
    for j in range(1, n):
        b, steps = j, 0
        while b != 0:
            if b not in parents:
                return out + [f"not a tree: orphan bus {b}"]
            b = parents[b]
            steps += 1
            if steps > n:
                return out + [f"not a tree: cycle detected through bus {j}"]
    return out


def validate_circuit(circuit: Circuit) -> list[str]:
    """Return every violated invariant; an empty list means the circuit is valid."""
    out = _topology_violations(circuit)
    if out:
        return out
    n = circuit.n_buses
    if not circuit.v_source > 0:
        out.append("v_source must be positive")
    for b in circuit.buses:
        if b.base_load_p < 0:
            out.append(f"bus {b.id}: load p must be >= 0")
        if abs(b.base_load_q) > 10 * b.base_load_p + 1:
            out.append(f"bus {b.id}: |q| exceeds 10*p + 1")
    root = circuit.buses[0]
    if root.base_load_p != 0 or root.base_load_q != 0:
        out.append("root bus must carry no load")
    reg_lines: dict[int, int] = {}
    for k, r in enumerate(circuit.regulators):
        if not 0 <= r.line_index < len(circuit.lines):
            out.append(f"regulator {k} references unknown line {r.line_index}")
            continue
        if r.line_index in reg_lines:
            out.append(f"line {r.line_index} has more than one regulator")
        reg_lines[r.line_index] = k
        if not circuit.lines[r.line_index].is_regulator:
            out.append(f"regulator {k} sits on line {r.line_index} which is not flagged regulator")
        if r.num_taps < 2:
            out.append(f"regulator {k}: num_taps must be >= 2")
        if not 0 < r.ratio_min < r.ratio_max:
            out.append(f"regulator {k}: need 0 < ratio_min < ratio_max")
    for k, ln in enumerate(circuit.lines):
        if ln.r < 0 or ln.x < 0:
            out.append(f"line {k}: r and x must be >= 0")
        if ln.is_regulator:
            if ln.r != 0 or ln.x != 0:
                out.append(f"line {k}: regulator line must have R=X=0")
            if k not in reg_lines:
                out.append(f"line {k}: flagged regulator but no regulator entry")
    for k, c in enumerate(circuit.capacitors):
        if not 0 <= c.bus < n:
            out.append(f"capacitor {k} references unknown bus {c.bus}")
        if not c.q_rated > 0:
            out.append(f"capacitor {k}: q_rated must be > 0")
    for k, b in enumerate(circuit.batteries):
        if not 0 <= b.bus < n:
            out.append(f"battery {k} references unknown bus {b.bus}")
        if not b.p_rated > 0 or not b.capacity > 0:
            out.append(f"battery {k}: p_rated and capacity must be > 0")
        if b.num_levels < 1 or b.num_levels % 2 == 0:
            out.append(f"battery {k}: num_levels must be odd")
        if not 0 <= b.soc_init <= 1:
            out.append(f"battery {k}: soc_init must lie in [0, 1]")
    return out


def descendants(circuit: Circuit, bus: int) -> set[int]:
    """All buses strictly below ``bus`` in the rooted tree."""
    if not 0 <= bus < circuit.n_buses:
        raise KeyError(f"unknown bus id {bus}")
    out: set[int] = set()
    stack = list(circuit.children[bus])
    while stack:
        b = stack.pop()
        out.add(b)
        stack.extend(circuit.children[b])
    return out


def hop_distances(circuit: Circuit, source: int) -> np.ndarray:
    """Undirected hop count from ``source`` to every bus."""
    n = circuit.n_buses
    adj: list[list[int]] = [[] for _ in range(n)]
    for ln in circuit.lines:
        adj[ln.from_bus].append(ln.to_bus)
        adj[ln.to_bus].append(ln.from_bus)
    dist = np.full(n, -1, dtype=int)
    dist[source] = 0
    queue = deque([source])
    while queue:
        b = queue.popleft()
        for nb in adj[b]:
            if dist[nb] < 0:
                dist[nb] = dist[b] + 1
                queue.append(nb)
    return dist


class InfeasibleFeederError(RuntimeError):
    pass


# acceptance window for the unactuated nominal-load solution of a generated feeder
FEEDER_V_RANGE = (0.88, 1.0)
FEEDER_MAX_ATTEMPTS = 100


@dataclass
class _Draft:
    parent: list[int] = field(default_factory=list)
    r: list[float] = field(default_factory=list)
    x: list[float] = field(default_factory=list)


def generate_feeder(n_buses: int, n_regulators: int = 0, n_capacitors: int = 0,
                    n_batteries: int = 0, seed: int = 0, name: str | None = None) -> Circuit:
    """Random radial feeder; a pure function of its arguments.

    Each bus ``j >= 1`` attaches to a parent drawn uniformly from ``0..j-1``.
    Loads are resampled until the unactuated nominal solution keeps every
    voltage inside ``FEEDER_V_RANGE``.
    """
    from .powerflow import Injections, solve_distflow, PowerFlowError

    if n_buses < 2:
        raise ValueError("n_buses must be >= 2")
    if n_regulators > n_buses - 1 or n_capacitors > n_buses - 1 or n_batteries > n_buses - 1:
        raise ValueError("more actuators requested than feasible placements")
    rng = np.random.default_rng(seed)
    parent = [-1] + [int(rng.integers(0, j)) for j in range(1, n_buses)]
    r = rng.uniform(0.005, 0.03, n_buses - 1)
    x = rng.uniform(0.005, 0.04, n_buses - 1)
    reg_lines = sorted(int(k) for k in rng.choice(n_buses - 1, n_regulators, replace=False))
    for k in reg_lines:
        r[k] = x[k] = 0.0
    lines = tuple(Line(parent[j], j, float(r[j - 1]), float(x[j - 1]), (j - 1) in reg_lines)
                  for j in range(1, n_buses))
    cap_buses = sorted(int(b) for b in rng.choice(np.arange(1, n_buses), n_capacitors, replace=False))
    bat_buses = sorted(int(b) for b in rng.choice(np.arange(1, n_buses), n_batteries, replace=False))
    # total nominal demand scales roughly inversely with feeder size
    p_mean = 0.6 / (n_buses - 1)
    capacitors = tuple(Capacitor(b, round(float(rng.uniform(1.0, 3.0)) * p_mean, 6)) for b in cap_buses)
    batteries = tuple(Battery(b, round(float(rng.uniform(1.5, 3.0)) * p_mean, 6),
                              round(float(rng.uniform(6.0, 10.0)) * 2.0 * p_mean, 6))
                      for b in bat_buses)
    regulators = tuple(Regulator(k) for k in reg_lines)
    level = 1.0
    for _ in range(FEEDER_MAX_ATTEMPTS):
        p = rng.uniform(0.0, 2.0 * p_mean, n_buses) * level
        q = p * rng.uniform(0.3, 0.6, n_buses)
        p[0] = q[0] = 0.0
        buses = tuple(Bus(j, f"b{j}", round(float(p[j]), 6), round(float(q[j]), 6))
                      for j in range(n_buses))
        circuit = Circuit(buses, lines, regulators, capacitors, batteries, 1.0,
                          name or f"gen{n_buses}_s{seed}")
        try:
            flow = solve_distflow(circuit, Injections.from_circuit(circuit),
                                  [reg.ratio_sq(reg.middle_tap) for reg in regulators])
        except PowerFlowError:
            flow = None
        if flow is not None and flow.converged:
            v = np.sqrt(flow.v_sq)
            if v.min() >= FEEDER_V_RANGE[0] and v.max() <= FEEDER_V_RANGE[1]:
                return circuit
            # heavier than the window allows: lighten future draws
            level *= 0.9 if v.min() < FEEDER_V_RANGE[0] else 1.0
        else:
            level *= 0.9
    raise InfeasibleFeederError(
        f"no feasible load draw after {FEEDER_MAX_ATTEMPTS} attempts (n_buses={n_buses}, seed={seed})")
