import numpy as np
import pytest

from conftest import chain
from voltgrid import autodiff as ad
from voltgrid.autodiff import Parameter, ShapeError, Tensor
from voltgrid.env import EnvConfig, VoltVarEnv, observation_graph, observation_vector
from voltgrid.graph import build_graph, graph_for
from voltgrid.grid import generate_feeder
from voltgrid.policy import (ActorCritic, CheckpointMismatch, GCNLayer, PolicySpec, gcn_forward,
                             policy_forward, readout_local, readout_mean_pool)


def _layer(phi, b=None):
    layer = GCNLayer(np.random.default_rng(0), *np.shape(phi), "t")
    layer.phi.tensor.value[...] = phi
    if b is not None:
        layer.b.tensor.value[...] = b
    return layer


def _positive_layers(k, width, seed=0):
    """Layers with positive weights: inputs > 0 keep relu in its linear regime."""
    rng = np.random.default_rng(seed)
    layers = []
    for i in range(k):
        fan_in = 1 if i == 0 else width
        layers.append(_layer(rng.uniform(0.1, 1.0, (fan_in, width))))
    return layers


def _perturbation_reach(norm_adj, layers, node, n):
    x = np.ones((n, 1))
    base = gcn_forward(layers, norm_adj, x).value
    x[node, 0] += 1.0
    moved = gcn_forward(layers, norm_adj, x).value
    return {j for j in range(n) if np.any(moved[j] != base[j])}


def test_single_node_identity():
    out = gcn_forward([_layer(np.eye(3))], np.array([[1.0]]), np.array([[1.0, -2.0, 0.5]]))
    assert out.value.tolist() == [[1.0, 0.0, 0.5]]


def test_two_node_example():
    adj = build_graph(chain(2)).norm_adj
    out = gcn_forward([_layer([[1.0]])], adj, np.array([[1.0], [2.0]]))
    assert out.value[1, 0] == pytest.approx(1.5, abs=1e-15)


@pytest.mark.parametrize("k", [1, 2, 3, 4])
def test_receptive_field_path(k):
    n = 8
    adj = build_graph(chain(n)).norm_adj
    assert _perturbation_reach(adj, _positive_layers(k, 4), 0, n) == set(range(k + 1))


def test_receptive_field_augmented():
    c = chain(7, reg_lines=(0,))         # regulator feeds bus 1
    aug = graph_for(c, augmented=True).norm_adj
    base = graph_for(c).norm_adj
    assert _perturbation_reach(aug, _positive_layers(1, 3), 1, 7) == set(range(7))
    assert _perturbation_reach(base, _positive_layers(1, 3), 1, 7) == {0, 1, 2}


def test_mean_pool_examples():
    assert readout_mean_pool(Tensor([[1.0], [3.0]])).value.tolist() == [[2.0]]
    assert readout_mean_pool(Tensor([[0.5, 2.0]] * 4)).value.tolist() == [[0.5, 2.0]]


def test_local_readout_rows():
    emb = Tensor(np.arange(12.0).reshape(4, 3))
    assert readout_local(emb, [3]).value.tolist() == [[9.0, 10.0, 11.0]]
    assert readout_local(emb, [2, 0]).shape == (1, 6)
    with pytest.raises(ShapeError):
        readout_local(emb, [4])


def test_local_readout_ignores_far_nodes():
    n = 8
    adj = build_graph(chain(n)).norm_adj
    layers = _positive_layers(2, 3)
    x = np.ones((n, 1))
    before = readout_local(gcn_forward(layers, adj, x), [0]).value
    x[5, 0] = 7.0
    assert np.array_equal(readout_local(gcn_forward(layers, adj, x), [0]).value, before)
    x[2, 0] = 7.0
    assert not np.array_equal(readout_local(gcn_forward(layers, adj, x), [0]).value, before)


def test_mean_pool_permutation_invariant():
    rng = np.random.default_rng(3)
    c = generate_feeder(9, 1, 1, 1, seed=3)
    adj = build_graph(c).norm_adj
    layers = [_layer(rng.normal(size=(3, 5)), rng.normal(size=(1, 5))), _layer(rng.normal(size=(5, 5)))]
    x = rng.normal(size=(9, 3))
    perm = rng.permutation(9)
    a = readout_mean_pool(gcn_forward(layers, adj, x)).value
    b = readout_mean_pool(gcn_forward(layers, adj[np.ix_(perm, perm)], x[perm])).value
    assert b == pytest.approx(a, abs=1e-12)


@pytest.fixture
def env13(feeder13):
    return VoltVarEnv(feeder13, EnvConfig(seed=0))


@pytest.mark.parametrize("kind,readout", [("dense", "mean_pool"), ("graph", "mean_pool"), ("graph", "local")])
def test_zero_params_uniform(feeder13, env13, kind, readout):
    spec = PolicySpec.for_circuit(feeder13, kind, hidden_dim=8, readout=readout)
    net = ActorCritic.for_circuit(feeder13, spec)
    for p in net.params:
        p.tensor.value[...] = 0.0
    obs = env13.reset(1)
    view = observation_vector(obs, feeder13) if kind == "dense" else observation_graph(obs, graph_for(feeder13))
    out = policy_forward(net, view, np.random.default_rng(0))
    assert out.entropy == pytest.approx(float(np.sum(np.log(feeder13.action_dims))), abs=1e-12)
    for logits in out.logits:
        assert not logits.any()


def _sample_outputs(feeder13, env13, kind, readout="mean_pool"):
    spec = PolicySpec.for_circuit(feeder13, kind, hidden_dim=8, readout=readout)
    net = ActorCritic.for_circuit(feeder13, spec, seed=5)
    net.actor_head.w.tensor.value *= 100.0
    rep = graph_for(feeder13)
    obs = env13.reset(2)
    view = observation_vector(obs, feeder13) if kind == "dense" else observation_graph(obs, rep)
    return net, view


@pytest.mark.parametrize("kind,readout", [("dense", "mean_pool"), ("graph", "mean_pool"), ("graph", "local")])
def test_log_prob_recompute(feeder13, env13, kind, readout):
    net, view = _sample_outputs(feeder13, env13, kind, readout)
    rng = np.random.default_rng(9)
    for _ in range(20):
        out = net.act(view, rng)
        expected = 0.0
        for logits, a, dim in zip(out.logits, out.action, feeder13.action_dims):
            assert 0 <= a < dim
            z = logits - logits.max()
            expected += z[a] - np.log(np.exp(z).sum())
        assert out.log_prob == pytest.approx(expected, abs=1e-10)
        assert 0.0 <= out.entropy <= np.sum(np.log(feeder13.action_dims)) + 1e-12
        assert np.isfinite(out.log_prob)


def test_deterministic_mode_ignores_rng(feeder13, env13):
    net, view = _sample_outputs(feeder13, env13, "dense")
    a = net.act(view, np.random.default_rng(0), deterministic=True)
    b = net.act(view, np.random.default_rng(1), deterministic=True)
    assert np.array_equal(a.action, b.action)
    assert [int(np.argmax(lg)) for lg in a.logits] == a.action.tolist()


def test_stochastic_needs_rng(feeder13, env13):
    net, view = _sample_outputs(feeder13, env13, "dense")
    with pytest.raises(ValueError):
        net.act(view)


def test_evaluate_matches_act(feeder13, env13):
    net, view = _sample_outputs(feeder13, env13, "graph", "local")
    out = net.act(view, np.random.default_rng(4))
    with ad.no_grad():
        logp, ent, value = net.evaluate(view[None], out.action[None])
    assert logp.item() == out.log_prob
    assert value.item() == out.value
    assert ent.item() == pytest.approx(out.entropy, abs=1e-12)


def test_local_readout_width(feeder13):
    spec = PolicySpec.for_circuit(feeder13, "graph", hidden_dim=8, readout="local")
    net = ActorCritic.for_circuit(feeder13, spec)
    assert net.actor_head.w.value.shape == (8 * 4, int(np.sum(feeder13.action_dims)))
    assert net.critic_head.w.value.shape == (8 * 4, 1)


def test_spec_validation(feeder13):
    with pytest.raises(ValueError):
        PolicySpec(kind="dense", action_dims=[3], readout="local", actuator_nodes=[1])
    with pytest.raises(ValueError):
        PolicySpec(kind="dense", action_dims=[])
    with pytest.raises(ValueError):
        PolicySpec(kind="dense", action_dims=[3], num_layers=0)
    with pytest.raises(ValueError):
        PolicySpec(kind="cnn", action_dims=[3])
    with pytest.raises(ValueError):
        PolicySpec.from_dict({"kind": "dense", "action_dims": [3], "bogus": 1})


def test_shape_mismatch(feeder13):
    net = ActorCritic.for_circuit(feeder13, PolicySpec.for_circuit(feeder13, "dense", hidden_dim=4))
    with pytest.raises(ShapeError):
        net.forward(np.ones(5))


def test_nan_logits_fail_fast(feeder13):
    net = ActorCritic.for_circuit(feeder13, PolicySpec.for_circuit(feeder13, "dense", hidden_dim=4))
    net.actor_head.b.tensor.value[0, 0] = np.nan
    with pytest.raises(FloatingPointError):
        net.forward(np.ones(net.spec.obs_dim))


def test_voltage_standardization(feeder13):
    spec = PolicySpec.for_circuit(feeder13, "dense", hidden_dim=4)
    net = ActorCritic.for_circuit(feeder13, spec)
    x = np.full(spec.obs_dim, 1.05)
    t = net._input(x)
    assert t.value[0, :13] == pytest.approx(np.ones(13))
    assert t.value[0, 13:] == pytest.approx(np.full(spec.obs_dim - 13, 1.05))
    assert x[0] == 1.05


@pytest.mark.parametrize("kind,readout,aug", [("dense", "mean_pool", False), ("graph", "local", True)])
def test_save_load_roundtrip(feeder13, env13, tmp_path, kind, readout, aug):
    spec = PolicySpec.for_circuit(feeder13, kind, hidden_dim=8, readout=readout, augmented=aug)
    net = ActorCritic.for_circuit(feeder13, spec, seed=11)
    path = tmp_path / "p.bin"
    net.save(path)
    back = ActorCritic.load(path, feeder13)
    assert back.spec == spec
    for a, b in zip(net.params, back.params):
        assert a.name == b.name and a.value.tobytes() == b.value.tobytes()
    rep = graph_for(feeder13, aug)
    obs = env13.reset(0)
    view = observation_vector(obs, feeder13) if kind == "dense" else observation_graph(obs, rep)
    assert np.array_equal(net.forward(view)[0].value, back.forward(view)[0].value)


def test_load_mismatched_circuit(feeder13, tmp_path):
    other = generate_feeder(13, 1, 1, 1, seed=0)
    net = ActorCritic.for_circuit(feeder13, PolicySpec.for_circuit(feeder13, "dense", hidden_dim=4))
    path = tmp_path / "p.bin"
    net.save(path)
    with pytest.raises(CheckpointMismatch):
        ActorCritic.load(path, other)


def test_load_wrong_shapes(feeder13, tmp_path):
    net = ActorCritic.for_circuit(feeder13, PolicySpec.for_circuit(feeder13, "dense", hidden_dim=4))
    arrays = net.state_dict()
    arrays["actor.fc0.w"] = np.zeros((2, 2))
    path = tmp_path / "p.bin"
    ad.save_checkpoint(path, arrays, {"policy_spec": net.spec.to_dict()})
    with pytest.raises(ad.CheckpointError, match="actor.fc0.w"):
        ActorCritic.load(path, feeder13)


def test_init_deterministic(feeder13):
    spec = PolicySpec.for_circuit(feeder13, "graph", hidden_dim=8)
    a = ActorCritic.for_circuit(feeder13, spec, seed=3)
    b = ActorCritic.for_circuit(feeder13, spec, seed=3)
    assert all(x.value.tobytes() == y.value.tobytes() for x, y in zip(a.params, b.params))
    assert all(isinstance(p, Parameter) for p in a.params)
