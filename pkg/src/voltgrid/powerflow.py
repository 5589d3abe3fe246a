"""Branch-flow (DistFlow) solver for radial feeders by backward/forward sweep.

Per line (i, j), with p_ij, q_ij the sending-end flows:

    p_ij = p_j - p_bat_j + R_ij * l_ij + sum_k p_jk
    q_ij = q_j - q_cap_j + X_ij * l_ij + sum_k q_jk
    l_ij = (p_ij**2 + q_ij**2) / v_i**2
    v_j**2 = r * v_i**2                       (regulator line)
    v_j**2 = v_i**2 - 2 (R p_ij + X q_ij) + (R**2 + X**2) l_ij

Voltages are carried squared throughout (``v_sq``).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid import Circuit

DEFAULT_TOL = 1e-8
DEFAULT_MAX_ITER = 50


class PowerFlowError(RuntimeError):
    def __init__(self, message: str, bus: int | None = None):
        super().__init__(message)
        self.bus = bus


@dataclass
class Injections:
    """Per-bus demand and actuator injections, indexed by bus id."""

    p_load: np.ndarray
    q_load: np.ndarray
    p_bat: np.ndarray
    q_cap: np.ndarray

    @classmethod
    def from_circuit(cls, circuit: Circuit, load_multiplier: float = 1.0,
                     bat_power=None, cap_status=None) -> "Injections":
        """Scale base loads and place actuator outputs on their buses.

        ``bat_power`` holds the effective injection of each battery,
        ``cap_status`` the 0/1 status of each capacitor.
        """
        n = circuit.n_buses
        p = np.array([b.base_load_p for b in circuit.buses]) * load_multiplier
        q = np.array([b.base_load_q for b in circuit.buses]) * load_multiplier
        p_bat = np.zeros(n)
        q_cap = np.zeros(n)
        if bat_power is not None:
            for bat, pw in zip(circuit.batteries, bat_power):
                p_bat[bat.bus] += pw
        if cap_status is not None:
            for cap, st in zip(circuit.capacitors, cap_status):
                q_cap[cap.bus] += st * cap.q_rated
        return cls(p, q, p_bat, q_cap)

    @classmethod
    def zeros(cls, n: int) -> "Injections":
        return cls(np.zeros(n), np.zeros(n), np.zeros(n), np.zeros(n))


@dataclass
class FlowState:
    p_line: np.ndarray
    q_line: np.ndarray
    l_line: np.ndarray
    v_sq: np.ndarray
    converged: bool
    iterations: int

    @property
    def v(self) -> np.ndarray:
        return np.sqrt(np.maximum(self.v_sq, 0.0))


def _regulator_ratio_map(circuit: Circuit, reg_ratios_sq) -> dict[int, float]:
    ratios = list(reg_ratios_sq) if reg_ratios_sq is not None else [1.0] * len(circuit.regulators)
    if len(ratios) != len(circuit.regulators):
        raise ValueError(f"expected {len(circuit.regulators)} regulator ratios, got {len(ratios)}")
    out = {}
    for reg, r in zip(circuit.regulators, ratios):
        lo, hi = reg.ratio_min ** 2, reg.ratio_max ** 2
        if not lo - 1e-12 <= r <= hi + 1e-12:
            raise ValueError(f"regulator ratio {r} outside [{lo}, {hi}]")
        out[reg.line_index] = float(r)
    return out


def solve_distflow(circuit: Circuit, inj: Injections, reg_ratios_sq=None,
                   tol: float = DEFAULT_TOL, max_iter: int = DEFAULT_MAX_ITER) -> FlowState:
    """Fixed-point sweep until the largest change in any squared voltage is below ``tol``.

    Non-convergence is reported through ``FlowState.converged``; a squared
    voltage that reaches zero or below raises PowerFlowError.
    """
    if tol <= 0 or max_iter < 1:
        raise ValueError("need tol > 0 and max_iter >= 1")
    reg_r = _regulator_ratio_map(circuit, reg_ratios_sq)
    n = circuit.n_buses
    m = len(circuit.lines)
    order = circuit.bfs_order
    parent = circuit.parent
    pline = circuit.parent_line
    R = np.array([ln.r for ln in circuit.lines])
    X = np.array([ln.x for ln in circuit.lines])
    net_p = inj.p_load - inj.p_bat
    net_q = inj.q_load - inj.q_cap

    v_sq = np.full(n, float(circuit.v_source))
    p = np.zeros(m)
    q = np.zeros(m)
    ell = np.zeros(m)
    # accumulators over children, reused per sweep
    child_p = np.zeros(n)
    child_q = np.zeros(n)

    converged = False
    it = 0
    with np.errstate(over="ignore", invalid="ignore"):
        for it in range(1, max_iter + 1):
            child_p[:] = 0.0
            child_q[:] = 0.0
            for j in reversed(order[1:]):
                k = pline[j]
                p[k] = net_p[j] + child_p[j] + R[k] * ell[k]
                q[k] = net_q[j] + child_q[j] + X[k] * ell[k]
                child_p[parent[j]] += p[k]
                child_q[parent[j]] += q[k]
            for j in order[1:]:
                k = pline[j]
                ell[k] = (p[k] * p[k] + q[k] * q[k]) / v_sq[parent[j]]
            new_v = v_sq.copy()
            for j in order[1:]:
                k = pline[j]
                i = parent[j]
                if k in reg_r:
                    new_v[j] = reg_r[k] * new_v[i]
                else:
                    new_v[j] = (new_v[i] - 2.0 * (R[k] * p[k] + X[k] * q[k])
                                + (R[k] ** 2 + X[k] ** 2) * ell[k])
                if not (new_v[j] > 0 and np.isfinite(new_v[j])):
                    raise PowerFlowError(f"voltage collapse at bus {j} (v_sq={new_v[j]:.4g})", bus=j)
            delta = float(np.max(np.abs(new_v - v_sq))) if n > 1 else 0.0
            v_sq = new_v
            if delta < tol:
                converged = True
                break
    return FlowState(p, q, ell, v_sq, converged, it)


def constraint_residuals(circuit: Circuit, inj: Injections, reg_ratios_sq, flow: FlowState) -> dict:
    """Substitute a flow state back into the four branch-flow constraint families."""
    reg_r = _regulator_ratio_map(circuit, reg_ratios_sq)
    n, m = circuit.n_buses, len(circuit.lines)
    R = np.array([ln.r for ln in circuit.lines])
    X = np.array([ln.x for ln in circuit.lines])
    child_p = np.zeros(n)
    child_q = np.zeros(n)
    for ln, pk, qk in zip(circuit.lines, flow.p_line, flow.q_line):
        child_p[ln.from_bus] += pk
        child_q[ln.from_bus] += qk
    res_p = np.zeros(m)
    res_q = np.zeros(m)
    res_v = np.zeros(m)
    res_l = np.zeros(m)
    for k, ln in enumerate(circuit.lines):
        i, j = ln.from_bus, ln.to_bus
        res_p[k] = (flow.p_line[k] - R[k] * flow.l_line[k] - child_p[j] + inj.p_bat[j]) - inj.p_load[j]
        res_q[k] = (flow.q_line[k] - X[k] * flow.l_line[k] - child_q[j] + inj.q_cap[j]) - inj.q_load[j]
        if k in reg_r:
            rhs = reg_r[k] * flow.v_sq[i]
        else:
            rhs = (flow.v_sq[i] - 2 * (R[k] * flow.p_line[k] + X[k] * flow.q_line[k])
                   + (R[k] ** 2 + X[k] ** 2) * flow.l_line[k])
        res_v[k] = flow.v_sq[j] - rhs
        res_l[k] = flow.l_line[k] - (flow.p_line[k] ** 2 + flow.q_line[k] ** 2) / flow.v_sq[i]
    return {"p": res_p, "q": res_q, "v": res_v, "l": res_l}


def power_loss(circuit: Circuit, flow: FlowState) -> float:
    """Total resistive loss, sum of R * l over lines."""
    R = np.array([ln.r for ln in circuit.lines])
    return float(np.sum(R * flow.l_line)) if len(R) else 0.0


def voltage_violation(flow: FlowState, v_min: float = 0.95, v_max: float = 1.05) -> float:
    """Summed distance of bus voltage magnitudes outside ``[v_min, v_max]``."""
    v = flow.v if isinstance(flow, FlowState) else np.asarray(flow, dtype=float)
    return float(np.sum(np.maximum(0.0, v_min - v) + np.maximum(0.0, v - v_max)))
