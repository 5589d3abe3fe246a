from collections import deque

import numpy as np
import pytest

from conftest import two_bus
from voltgrid.env import EnvConfig, Observation
from voltgrid.grid import Capacitor, descendants
from voltgrid.policy import ActorCritic, PolicySpec
from voltgrid.ppo import PPOConfig
from voltgrid.experiments import (ROBUSTNESS_HEADER, VARIANTS, PerturbationSpec, percent_difference,
                                  perturb_observation, population_cov, run_case_study, run_robustness,
                                  run_sensitivity, sample_subset, subset_size, variant_name)


def hops_from(circuit, src):
    dist = {src: 0}
    q = deque([src])
    while q:
        u = q.popleft()
        nbrs = list(circuit.children[u]) + ([circuit.parent[u]] if circuit.parent[u] >= 0 else [])
        for v in nbrs:
            if v not in dist:
                dist[v] = dist[u] + 1
                q.append(v)
    return dist


def _obs(n=4):
    return Observation(np.linspace(0.97, 1.03, n), np.array([16.0, 1.0]), 3)


def test_spec_validation():
    with pytest.raises(ValueError):
        PerturbationSpec(mode="drop")
    with pytest.raises(ValueError):
        PerturbationSpec(fraction=0.0)
    with pytest.raises(ValueError):
        PerturbationSpec(mode="noise", noise_amplitude=0.0)
    with pytest.raises(ValueError):
        PerturbationSpec.from_dict({"extra": 1})


def test_subset_size_at_least_one():
    assert subset_size(13, 0.01) == 1
    assert subset_size(13, 0.75) == 10
    assert subset_size(13, 1.0) == 13


def test_subsets_deterministic_without_replacement():
    a = sample_subset(13, 0.5, 4, 2)
    assert np.array_equal(a, sample_subset(13, 0.5, 4, 2))
    assert len(set(a.tolist())) == len(a) == 7
    assert not np.array_equal(a, sample_subset(13, 0.5, 4, 3))


def test_perturb_empty_subset():
    obs = _obs()
    out = perturb_observation(obs, [], PerturbationSpec())
    assert np.array_equal(out.v, obs.v) and np.array_equal(out.actuators, obs.actuators)


def test_perturb_mask_all():
    obs = _obs()
    out = perturb_observation(obs, range(4), PerturbationSpec(fraction=1.0))
    assert not out.v.any()
    assert np.array_equal(out.actuators, obs.actuators)
    assert obs.v[0] == 0.97


def test_perturb_noise_support():
    obs = Observation(np.ones(500), np.zeros(1), 0)
    out = perturb_observation(obs, range(500), PerturbationSpec(mode="noise", noise_amplitude=0.05),
                              np.random.default_rng(0))
    assert np.all((out.v >= 0.95) & (out.v <= 1.05))
    assert np.unique(out.v).size == 500


def test_percent_difference():
    assert percent_difference(-125.0, -100.0) == -25.0
    assert percent_difference(-100.0, -100.0) == 0.0


def test_population_cov():
    assert population_cov([1, 2, 3], [2, 4, 6]) == pytest.approx(4.0 / 3.0)
    assert population_cov([5, 5, 5], [1, 2, 3]) == 0.0


@pytest.fixture(scope="module")
def dense_net(request):
    from voltgrid.grid import load_circuit
    c = load_circuit("feeder13.json")
    return c, ActorCritic.for_circuit(c, PolicySpec.for_circuit(c, "dense", hidden_dim=8), seed=1)


def test_robustness_structure(dense_net, tmp_path):
    c, net = dense_net
    rep = run_robustness([("dense", 1, net)], c, [0.25, 0.5, 0.75], PerturbationSpec(n_subsets=5),
                         n_eval_episodes=2)
    assert len(rep.rows) == 15
    for f in (0.25, 0.5, 0.75):
        m, s, n = rep.cell("dense", f)
        assert n == 5 and np.isfinite(m) and s >= 0
    rep.write_csv(tmp_path / "r.csv")
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == ",".join(ROBUSTNESS_HEADER) and len(lines) == 16


def test_robustness_tiny_noise_is_identity(dense_net):
    c, net = dense_net
    spec = PerturbationSpec(mode="noise", noise_amplitude=1e-300, n_subsets=2)
    rep = run_robustness([("dense", 0, net)], c, [0.5], spec, n_eval_episodes=2)
    assert rep.cell("dense", 0.5, "noise") == (0.0, 0.0, 2)


def test_robustness_accepts_checkpoint(dense_net, tmp_path):
    c, net = dense_net
    path = tmp_path / "n.bin"
    net.save(path)
    a = run_robustness([("d", 0, net)], c, [0.5], PerturbationSpec(n_subsets=2), n_eval_episodes=2)
    b = run_robustness([("d", 0, path)], c, [0.5], PerturbationSpec(n_subsets=2), n_eval_episodes=2)
    assert a.rows == b.rows


def test_sensitivity_frozen_is_zero(feeder13):
    res = run_sensitivity(feeder13, None, 0, reference_bus=6)
    assert not res.covariance.any()
    assert res.voltages.shape == (24, 13)


def test_sensitivity_two_bus_capacitor():
    c = two_bus(capacitors=(Capacitor(1, 0.05),))
    res = run_sensitivity(c, "capacitor:0", 3)
    assert res.bus == 1
    assert res.covariance[1] == pytest.approx(np.var(res.voltages[:, 1]))
    assert res.covariance[1] > 0


def test_sensitivity_unknown_actuator(feeder13):
    with pytest.raises(KeyError):
        run_sensitivity(feeder13, "regulator:3")
    with pytest.raises(KeyError):
        run_sensitivity(feeder13, "pump:0")


@pytest.mark.parametrize("seed", range(3))
def test_sensitivity_regulator_global(feeder13, seed):
    res = run_sensitivity(feeder13, "regulator:0", seed)
    for j in descendants(feeder13, res.bus):
        assert res.covariance[j] > 0


@pytest.mark.parametrize("cap", [0, 1])
def test_sensitivity_capacitor_local(feeder13, cap):
    res = run_sensitivity(feeder13, f"capacitor:{cap}", 0)
    dist = hops_from(feeder13, res.bus)
    far = [j for j, d in dist.items() if d >= 3]
    assert far
    assert abs(res.covariance[res.bus]) > max(abs(res.covariance[j]) for j in far)


def test_sensitivity_csv(feeder13, tmp_path):
    res = run_sensitivity(feeder13, "battery:0", 0)
    res.write_csv(tmp_path / "s.csv")
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[0].startswith("#") and lines[1] == "bus,covariance" and len(lines) == 15


def test_variant_grid():
    assert len(VARIANTS) == 4
    assert {variant_name(*v) for v in VARIANTS} == {"base_mean_pool", "base_local", "augmented_mean_pool",
                                                    "augmented_local"}


def test_case_study_smoke(feeder13, tmp_path):
    from voltgrid.ppo import train
    spec = PolicySpec.for_circuit(feeder13, "graph", hidden_dim=8, num_layers=2)
    cfg = PPOConfig(episodes_total=16, episodes_per_update=16, seed=0)
    res = run_case_study(feeder13, EnvConfig(seed=0), spec, cfg, tmp_path / "cs", fractions=(0.5,),
                         template=PerturbationSpec(n_subsets=2), n_eval_episodes=2, final_window=16)
    assert len(res.table) == 4
    assert (tmp_path / "cs" / "case_study.csv").exists()
    for name in res.runs:
        assert (tmp_path / "cs" / name / "ckpt_16.bin").exists()
        assert (tmp_path / "cs" / name / "robustness.csv").exists()
    plain = train(feeder13, EnvConfig(seed=0), spec, cfg, tmp_path / "plain")
    assert ((tmp_path / "plain" / "log.csv").read_bytes()
            == (tmp_path / "cs" / "base_mean_pool" / "log.csv").read_bytes())


def test_case_study_needs_regulator(tmp_path):
    c = two_bus()
    spec = PolicySpec(kind="graph", action_dims=[1], n_nodes=2)
    with pytest.raises(ValueError):
        run_case_study(c, EnvConfig(), spec, PPOConfig(), tmp_path)
