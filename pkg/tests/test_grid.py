import json
from collections import deque

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import chain, two_bus
from voltgrid import grid
from voltgrid.grid import (Battery, Circuit, CircuitError, Line, Regulator, descendants, generate_feeder,
                           load_circuit, validate_circuit)


def _write(tmp_path, doc):
    path = tmp_path / "c.json"
    path.write_text(json.dumps(doc))
    return path


MINIMAL = {"name": "two", "v_source": 1.0,
           "buses": [{"id": 0, "name": "src", "p": 0.0, "q": 0.0}, {"id": 1, "name": "ld", "p": 0.1, "q": 0.05}],
           "lines": [{"from": 0, "to": 1, "r": 0.01, "x": 0.02, "regulator": False}],
           "regulators": [], "capacitors": [], "batteries": []}


def test_load_minimal(tmp_path):
    c = load_circuit(_write(tmp_path, MINIMAL))
    assert c.n_buses == 2
    assert c.depth == 1


def test_load_rejects_cycle(tmp_path):
    doc = json.loads(json.dumps(MINIMAL))
    doc["buses"].append({"id": 2, "name": "x", "p": 0.0, "q": 0.0})
    doc["lines"] += [{"from": 1, "to": 2, "r": 0.01, "x": 0.01}, {"from": 2, "to": 1, "r": 0.01, "x": 0.01}]
    with pytest.raises(CircuitError, match="not a tree"):
        load_circuit(_write(tmp_path, doc))


def test_load_rejects_orphan(tmp_path):
    doc = json.loads(json.dumps(MINIMAL))
    doc["buses"] += [{"id": 2, "name": "a", "p": 0.0, "q": 0.0}, {"id": 3, "name": "b", "p": 0.0, "q": 0.0}]
    doc["lines"] += [{"from": 2, "to": 3, "r": 0.01, "x": 0.01}]
    with pytest.raises(CircuitError, match="not a tree"):
        load_circuit(_write(tmp_path, doc))


def test_load_rejects_unknown_key(tmp_path):
    doc = dict(MINIMAL, extra=1)
    with pytest.raises(CircuitError, match="schema"):
        load_circuit(_write(tmp_path, doc))


def test_load_rejects_malformed(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text("{not json")
    with pytest.raises(CircuitError, match="parse error"):
        load_circuit(path)


def test_missing_file():
    with pytest.raises(CircuitError, match="not found"):
        load_circuit("/nonexistent/feeder.json")


def test_bundled_feeder13(feeder13):
    assert feeder13.n_buses == 13
    assert (len(feeder13.regulators), len(feeder13.capacitors), len(feeder13.batteries)) == (1, 2, 1)
    assert validate_circuit(feeder13) == []


@pytest.mark.parametrize("name,n", [("feeder34", 34), ("feeder123", 123)])
def test_bundled_generated(name, n):
    c = load_circuit(name + ".json")
    assert c.n_buses == n
    assert validate_circuit(c) == []


def test_roundtrip_json(feeder13, tmp_path):
    path = tmp_path / "f.json"
    path.write_text(feeder13.to_json())
    assert load_circuit(path) == feeder13


def test_validate_ok():
    assert validate_circuit(two_bus()) == []


def test_validate_regulator_impedance():
    c = Circuit(two_bus().buses, (Line(0, 1, 0.01, 0.0, True),), (Regulator(0),))
    assert any("regulator line must have R=X=0" in v for v in validate_circuit(c))


def test_validate_battery_levels():
    c = two_bus(batteries=(Battery(1, 0.1, 1.0, num_levels=4),))
    assert any("num_levels must be odd" in v for v in validate_circuit(c))


def test_validate_bad_regulator_ratio():
    c = Circuit(two_bus().buses, (Line(0, 1, 0.0, 0.0, True),), (Regulator(0, 1, 1.1, 0.9),))
    problems = validate_circuit(c)
    assert any("num_taps" in v for v in problems)
    assert any("ratio_min" in v for v in problems)


def test_regulator_tap_mapping():
    reg = Regulator(0)
    assert reg.ratio(0) == pytest.approx(0.9)
    assert reg.ratio(32) == pytest.approx(1.1)
    assert reg.ratio(reg.middle_tap) == pytest.approx(1.0)
    assert reg.ratio_sq(32) == pytest.approx(1.21)


def test_battery_level_mapping():
    bat = Battery(1, 0.2, 1.0, num_levels=5)
    assert [bat.power(k) for k in range(5)] == pytest.approx([-0.2, -0.1, 0.0, 0.1, 0.2])
    assert bat.power(bat.zero_level) == 0.0


def test_descendants_examples():
    c = chain(5)
    assert descendants(c, 4) == set()
    assert descendants(two_bus(), 0) == {1}
    assert descendants(c, 1) == {2, 3, 4}
    with pytest.raises(KeyError):
        descendants(c, 9)


def test_generate_small():
    c = generate_feeder(2, 0, 0, 0, seed=1)
    assert c.n_buses == 2 and not (c.regulators or c.capacitors or c.batteries)


def test_generate_deterministic():
    a = generate_feeder(13, 1, 2, 1, seed=7)
    b = generate_feeder(13, 1, 2, 1, seed=7)
    assert a.to_json().encode() == b.to_json().encode()
    assert generate_feeder(13, 1, 2, 1, seed=8).to_json() != a.to_json()


def test_generate_large_valid():
    c = generate_feeder(123, 4, 4, 4, seed=3)
    assert validate_circuit(c) == []
    assert (len(c.regulators), len(c.capacitors), len(c.batteries)) == (4, 4, 4)


def test_generate_infeasible(monkeypatch):
    monkeypatch.setattr(grid, "FEEDER_V_RANGE", (1.01, 1.02))
    with pytest.raises(grid.InfeasibleFeederError):
        generate_feeder(5, seed=0)


def test_generate_rejects_too_many_actuators():
    with pytest.raises(ValueError):
        generate_feeder(3, n_regulators=3)


def _bfs_visits(c):
    seen = []
    q = deque([0])
    while q:
        b = q.popleft()
        seen.append(b)
        q.extend(c.children[b])
    return seen


@settings(max_examples=40, deadline=None)
@given(n=st.integers(2, 40), seed=st.integers(0, 10_000))
def test_tree_properties(n, seed):
    c = generate_feeder(n, min(1, n - 1), min(2, n - 1), min(1, n - 1), seed=seed)
    assert len(c.lines) == c.n_buses - 1
    visits = _bfs_visits(c)
    assert sorted(visits) == list(range(n))
    # descendants agree with walking parents
    for i in range(n):
        desc = descendants(c, i)
        for j in range(n):
            b, reach = j, False
            while b != -1 and j != i:
                b = c.parent[b]
                if b == i:
                    reach = True
                    break
            assert (j in desc) == reach
