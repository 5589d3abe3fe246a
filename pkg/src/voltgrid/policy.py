"""Actor-critic networks: a dense MLP and a GCN with mean-pool or local readout.

Both heads emit concatenated logits for a factorized multi-discrete action;
the critic is a separate network with the same body and readout.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .graph import GraphRep, graph_for
from .grid import Circuit

KINDS = ("dense", "graph")
READOUTS = ("mean_pool", "local")


@dataclass
class PolicySpec:
    kind: str = "dense"
    action_dims: list[int] = field(default_factory=list)
    hidden_dim: int = 64
    num_layers: int = 3
    readout: str = "mean_pool"
    obs_dim: int = 0
    node_feat_dim: int = 5
    n_nodes: int = 0
    actuator_nodes: list[int] = field(default_factory=list)
    augmented: bool = False
    # voltages enter the network as (v - v_center) / v_scale
    v_center: float = 1.0
    v_scale: float = 0.05

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}")
        if self.readout not in READOUTS:
            raise ValueError(f"readout must be one of {READOUTS}")
        if not self.v_scale > 0:
            raise ValueError("v_scale must be > 0")
        if self.num_layers < 1:
            raise ValueError("num_layers must be >= 1")
        if not self.action_dims:
            raise ValueError("action_dims must be nonempty")
        if self.readout == "local" and self.kind != "graph":
            raise ValueError("local readout requires kind='graph'")
        if self.readout == "local" and not self.actuator_nodes:
            raise ValueError("local readout needs actuator_nodes")
        self.action_dims = [int(d) for d in self.action_dims]
        self.actuator_nodes = [int(b) for b in self.actuator_nodes]

    @classmethod
    def for_circuit(cls, circuit: Circuit, kind: str = "dense", **kw) -> "PolicySpec":
        n = circuit.n_buses
        return cls(kind=kind, action_dims=circuit.action_dims,
                   obs_dim=n + len(circuit.regulators) + len(circuit.capacitors) + 2 * len(circuit.batteries),
                   n_nodes=n, actuator_nodes=circuit.actuator_buses, **kw)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PolicySpec":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown policy keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class PolicyOutput:
    logits: list[np.ndarray]
    value: float
    action: np.ndarray
    log_prob: float
    entropy: float


def _glorot(rng, fan_in, fan_out, scale=1.0):
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, (fan_in, fan_out)) * scale


class Linear:
    def __init__(self, rng, fan_in, fan_out, name, scale=1.0):
        self.w = Parameter(_glorot(rng, fan_in, fan_out, scale), f"{name}.w")
        self.b = Parameter(np.zeros((1, fan_out)), f"{name}.b")

    @property
    def params(self):
        return [self.w, self.b]

    def __call__(self, x: Tensor) -> Tensor:
        return ad.add(ad.matmul(x, self.w.tensor), self.b.tensor)


class GCNLayer:
    """``H' = relu(norm_adj @ H @ phi + b)`` applied per graph in the batch."""

    def __init__(self, rng, fan_in, fan_out, name):
        self.phi = Parameter(_glorot(rng, fan_in, fan_out), f"{name}.phi")
        self.b = Parameter(np.zeros((1, fan_out)), f"{name}.b")

    @property
    def params(self):
        return [self.phi, self.b]

    def __call__(self, norm_adj: np.ndarray, h: Tensor) -> Tensor:
        msg = ad.block_propagate(norm_adj, ad.matmul(h, self.phi.tensor))
        return ad.relu(ad.add(msg, self.b.tensor))


def gcn_forward(layers, norm_adj: np.ndarray, features) -> Tensor:
    """Run GCN layers on stacked node features ``(B*N) x F``."""
    h = features if isinstance(features, Tensor) else Tensor(features)
    for layer in layers:
        h = layer(norm_adj, h)
    return h


def readout_mean_pool(embeddings: Tensor, n: int | None = None) -> Tensor:
    return ad.block_mean(embeddings, n or embeddings.shape[0])


def readout_local(embeddings: Tensor, actuator_nodes, n: int | None = None) -> Tensor:
    return ad.block_gather(embeddings, n or embeddings.shape[0], actuator_nodes)


class _Body:
    """Feature extractor shared by the actor and critic layouts (separate weights)."""

    def __init__(self, spec: PolicySpec, rng, prefix: str):
        self.spec = spec
        h = spec.hidden_dim
        if spec.kind == "dense":
            dims = [spec.obs_dim] + [h] * spec.num_layers
            self.layers = [Linear(rng, a, b, f"{prefix}.fc{i}") for i, (a, b) in enumerate(zip(dims, dims[1:]))]
            self.out_dim = h
        else:
            dims = [spec.node_feat_dim] + [h] * spec.num_layers
            self.layers = [GCNLayer(rng, a, b, f"{prefix}.gcn{i}") for i, (a, b) in enumerate(zip(dims, dims[1:]))]
            self.out_dim = h * len(spec.actuator_nodes) if spec.readout == "local" else h

    @property
    def params(self):
        return [p for layer in self.layers for p in layer.params]

    def __call__(self, x: Tensor, norm_adj) -> Tensor:
        if self.spec.kind == "dense":
            for layer in self.layers:
                x = ad.relu(layer(x))
            return x
        emb = gcn_forward(self.layers, norm_adj, x)
        if self.spec.readout == "local":
            return readout_local(emb, self.spec.actuator_nodes, self.spec.n_nodes)
        return readout_mean_pool(emb, self.spec.n_nodes)


class ActorCritic:
    def __init__(self, spec: PolicySpec, rep: GraphRep | None = None, seed: int = 0):
        self.spec = spec
        if spec.kind == "graph":
            if rep is None:
                raise ValueError("graph policy needs a GraphRep")
            if rep.n != spec.n_nodes:
                raise ValueError(f"GraphRep has {rep.n} nodes, spec expects {spec.n_nodes}")
            self.norm_adj = rep.norm_adj
        else:
            self.norm_adj = None
        rng = np.random.default_rng(seed)
        self.actor_body = _Body(spec, rng, "actor")
        self.actor_head = Linear(rng, self.actor_body.out_dim, int(np.sum(spec.action_dims)),
                                 "actor.head", scale=0.01)
        self.critic_body = _Body(spec, rng, "critic")
        self.critic_head = Linear(rng, self.critic_body.out_dim, 1, "critic.head")
        self.bounds = np.cumsum([0] + spec.action_dims)

    @classmethod
    def for_circuit(cls, circuit: Circuit, spec: PolicySpec, seed: int = 0) -> "ActorCritic":
        rep = graph_for(circuit, spec.augmented) if spec.kind == "graph" else None
        return cls(spec, rep, seed)

    @property
    def params(self) -> list[Parameter]:
        return (self.actor_body.params + self.actor_head.params
                + self.critic_body.params + self.critic_head.params)

    def _input(self, batch: np.ndarray) -> Tensor:
        sp = self.spec
        batch = np.array(batch, dtype=np.float64)
        if sp.kind == "dense":
            if batch.ndim == 1:
                batch = batch[None, :]
            if batch.shape[1] != sp.obs_dim:
                raise ad.ShapeError(f"dense policy expects obs_dim {sp.obs_dim}, got {batch.shape}")
            batch[:, :sp.n_nodes] = (batch[:, :sp.n_nodes] - sp.v_center) / sp.v_scale
            return Tensor(batch)
        if batch.ndim == 2:
            batch = batch[None]
        if batch.shape[1:] != (self.spec.n_nodes, self.spec.node_feat_dim):
            raise ad.ShapeError(f"graph policy expects (B, {self.spec.n_nodes}, "
                                f"{self.spec.node_feat_dim}) features, got {batch.shape}")
        batch[..., 0] = (batch[..., 0] - sp.v_center) / sp.v_scale
        return Tensor(batch.reshape(-1, sp.node_feat_dim))

    def forward(self, batch) -> tuple[Tensor, Tensor]:
        """Logits ``B x sum(dims)`` and values ``B x 1`` for a batch of observation views."""
        x = self._input(batch)
        logits = self.actor_head(self.actor_body(x, self.norm_adj))
        if not np.all(np.isfinite(logits.value)):
            raise FloatingPointError("non-finite policy logits")
        value = self.critic_head(self.critic_body(x, self.norm_adj))
        return logits, value

    def head_log_probs(self, logits: Tensor) -> list[Tensor]:
        return [ad.log_softmax(ad.slice_cols(logits, a, b))
                for a, b in zip(self.bounds[:-1], self.bounds[1:])]

    def evaluate(self, batch, actions) -> tuple[Tensor, Tensor, Tensor]:
        """Summed log-prob ``B x 1``, summed entropy ``B x 1`` and value ``B x 1``."""
        logits, value = self.forward(batch)
        actions = np.asarray(actions, dtype=int).reshape(logits.shape[0], -1)
        logp = None
        ent = None
        for h, ls in enumerate(self.head_log_probs(logits)):
            lp = ad.take_cols(ls, actions[:, h])
            e = ad.mul(ad.sum_cols(ad.mul(ad.exp(ls), ls)), -1.0)
            logp = lp if logp is None else ad.add(logp, lp)
            ent = e if ent is None else ad.add(ent, e)
        return logp, ent, value

    def act(self, view, rng: np.random.Generator | None = None, deterministic: bool = False) -> PolicyOutput:
        """Sample (or argmax) one multi-discrete action for a single observation view."""
        with ad.no_grad():
            logits, value = self.forward(view)
            heads = [ls.value[0] for ls in self.head_log_probs(logits)]
        action = np.empty(len(heads), dtype=int)
        for h, ls in enumerate(heads):
            if deterministic:
                action[h] = int(np.argmax(ls))
            else:
                if rng is None:
                    raise ValueError("stochastic act() needs an rng")
                cdf = np.cumsum(np.exp(ls))
                action[h] = min(int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right")),
                                len(ls) - 1)
        log_prob = float(sum(ls[a] for ls, a in zip(heads, action)))
        entropy = float(sum(-np.sum(np.exp(ls) * ls) for ls in heads))
        raw = logits.value[0]
        return PolicyOutput([raw[a:b].copy() for a, b in zip(self.bounds[:-1], self.bounds[1:])],
                            float(value.value[0, 0]), action, log_prob, entropy)

    # persistence
    def state_dict(self) -> dict[str, np.ndarray]:
        return {p.name: p.value.copy() for p in self.params}

    def load_state_dict(self, arrays: dict[str, np.ndarray]) -> None:
        params = {p.name: p for p in self.params}
        if set(arrays) != set(params):
            raise ad.CheckpointError(
                f"parameter names differ: missing {sorted(set(params) - set(arrays))}, "
                f"unexpected {sorted(set(arrays) - set(params))}")
        for name, arr in arrays.items():
            if arr.shape != params[name].value.shape:
                raise ad.CheckpointError(f"{name}: shape {arr.shape} != {params[name].value.shape}")
            params[name].tensor.value[...] = arr

    def save(self, path, extra: dict | None = None) -> None:
        header = {"policy_spec": self.spec.to_dict(), **(extra or {})}
        ad.save_checkpoint(path, self.state_dict(), header)

    @classmethod
    def load(cls, path, circuit: Circuit) -> "ActorCritic":
        header, arrays = ad.load_checkpoint(path)
        if "policy_spec" not in header:
            raise ad.CheckpointError(f"{path}: header carries no policy_spec")
        spec = PolicySpec.from_dict(header["policy_spec"])
        check_compatible(spec, circuit)
        net = cls.for_circuit(circuit, spec)
        net.load_state_dict(arrays)
        return net


class CheckpointMismatch(ad.CheckpointError):
    pass


def check_compatible(spec: PolicySpec, circuit: Circuit) -> None:
    ref = PolicySpec.for_circuit(circuit, spec.kind)
    if spec.action_dims != ref.action_dims:
        raise CheckpointMismatch(f"action dims {spec.action_dims} do not match circuit {ref.action_dims}")
    if spec.kind == "dense" and spec.obs_dim != ref.obs_dim:
        raise CheckpointMismatch(f"obs_dim {spec.obs_dim} does not match circuit {ref.obs_dim}")
    if spec.kind == "graph" and (spec.n_nodes != ref.n_nodes or spec.actuator_nodes != ref.actuator_nodes):
        raise CheckpointMismatch("graph layout does not match circuit")


def policy_forward(net: ActorCritic, view, rng=None, deterministic: bool = False) -> PolicyOutput:
    return net.act(view, rng, deterministic)
