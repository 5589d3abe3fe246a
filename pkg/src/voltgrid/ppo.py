"""Clipped-objective PPO with GAE for multi-discrete volt-var policies."""
from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .env import EnvConfig, Observation, VoltVarEnv, observation_graph, observation_vector
from .graph import graph_for
from .grid import Circuit
from .policy import ActorCritic, PolicySpec

log = logging.getLogger(__name__)

LOG_HEADER = ["update", "episodes", "mean_reward", "r_v", "r_c", "r_p",
              "policy_loss", "value_loss", "entropy", "clip_frac"]
EPISODE_HEADER = ["episode", "reward", "r_v", "r_c", "r_p"]
EVAL_SEED_OFFSET = 1_000_000


@dataclass
class PPOConfig:
    episodes_total: int = 2000
    episodes_per_update: int = 16
    minibatch_size: int = 64
    epochs_per_update: int = 4
    clip: float = 0.2
    gamma: float = 0.99
    gae_lambda: float = 0.95
    value_coef: float = 0.5
    entropy_coef: float = 0.01
    lr: float = 3e-4
    max_grad_norm: float = 0.5
    seed: int = 0
    checkpoint_every: int = 25

    def __post_init__(self):
        if not 0 < self.clip < 1:
            raise ValueError("clip must lie in (0, 1)")
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must lie in (0, 1]")
        if not 0 <= self.gae_lambda <= 1:
            raise ValueError("gae_lambda must lie in [0, 1]")
        if self.episodes_total < 1 or self.episodes_per_update < 1 or self.minibatch_size < 1:
            raise ValueError("episode and batch counts must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PPOConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown ppo keys: {sorted(unknown)}")
        return cls(**d)


class PPONumericError(FloatingPointError):
    def __init__(self, message: str, minibatch: dict):
        super().__init__(message)
        self.minibatch = minibatch


def episode_seed(seed: int, episode: int) -> int:
    """Load-profile seed of training episode ``episode`` under run seed ``seed``."""
    return int(np.random.SeedSequence([seed, episode]).generate_state(1)[0])


def action_rng(seed: int, episode: int) -> np.random.Generator:
    return np.random.default_rng([seed, episode, 1])


def view_function(spec: PolicySpec, circuit: Circuit):
    """Map an Observation to the input the policy kind expects."""
    if spec.kind == "dense":
        return lambda obs: observation_vector(obs, circuit)
    rep = graph_for(circuit, spec.augmented)
    return lambda obs: observation_graph(obs, rep)


@dataclass
class RolloutBuffer:
    views: list = field(default_factory=list)
    actions: list = field(default_factory=list)
    log_probs: list = field(default_factory=list)
    values: list = field(default_factory=list)
    rewards: list = field(default_factory=list)
    dones: list = field(default_factory=list)
    components: list = field(default_factory=list)
    advantages: np.ndarray | None = None
    returns: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.rewards)

    def add(self, view, action, log_prob, value, reward, done, components) -> None:
        self.views.append(np.asarray(view, dtype=np.float64))
        self.actions.append(np.asarray(action, dtype=int))
        self.log_probs.append(float(log_prob))
        self.values.append(float(value))
        self.rewards.append(float(reward))
        self.dones.append(bool(done))
        self.components.append(tuple(float(c) for c in components))

    def episode_stats(self) -> np.ndarray:
        """Per-episode ``[reward, r_v, r_c, r_p]`` sums, one row per finished episode."""
        out, acc = [], np.zeros(4)
        for r, c, d in zip(self.rewards, self.components, self.dones):
            acc += (r, *c)
            if d:
                out.append(acc.copy())
                acc[:] = 0.0
        return np.array(out).reshape(-1, 4)


def collect_rollouts(env: VoltVarEnv, net: ActorCritic, episodes, seed: int, view=None,
                     buffer: RolloutBuffer | None = None) -> RolloutBuffer:
    """Run full episodes with the behavior policy.

    ``episodes`` are global episode indices; each owns its load-profile seed and
    action-sampling stream derived from ``(seed, episode)``.
    """
    view = view or view_function(net.spec, env.circuit)
    buf = buffer if buffer is not None else RolloutBuffer()
    for ep in episodes:
        rng = action_rng(seed, ep)
        obs = env.reset(episode_seed(seed, ep))
        done = False
        while not done:
            x = view(obs)
            out = net.act(x, rng)
            res = env.step(out.action)
            buf.add(x, out.action, out.log_prob, out.value, res.reward, res.done, res.reward_components)
            obs, done = res.observation, res.done
    return buf


def compute_gae(buffer: RolloutBuffer, gamma: float, lam: float, normalize: bool = True) -> None:
    """Fill ``buffer.advantages`` (normalized batch-wide) and ``buffer.returns``."""
    r = np.asarray(buffer.rewards)
    v = np.asarray(buffer.values)
    d = np.asarray(buffer.dones, dtype=float)
    n = len(r)
    adv = np.zeros(n)
    last = 0.0
    for t in reversed(range(n)):
        next_v = v[t + 1] if t + 1 < n else 0.0
        nonterminal = 1.0 - d[t]
        delta = r[t] + gamma * next_v * nonterminal - v[t]
        last = delta + gamma * lam * nonterminal * last
        adv[t] = last
    buffer.returns = adv + v
    if normalize and n > 1:
        adv = adv - adv.mean()
        std = adv.std()
        if std > 0:
            adv = adv / std
    buffer.advantages = adv


def clipped_objective(ratio, adv, eps: float) -> np.ndarray:
    """Per-sample ``min(ratio*A, clip(ratio, 1-eps, 1+eps)*A)``."""
    ratio = np.asarray(ratio, dtype=float)
    adv = np.asarray(adv, dtype=float)
    return np.minimum(ratio * adv, np.clip(ratio, 1 - eps, 1 + eps) * adv)


def ppo_loss(net: ActorCritic, views, actions, old_logp, adv, returns, cfg: PPOConfig):
    """Build the total loss graph; returns ``(loss, parts)`` with parts as floats."""
    logp, ent, value = net.evaluate(views, actions)
    adv_t = ad.Tensor(np.asarray(adv).reshape(-1, 1))
    ratio = ad.exp(ad.sub(logp, ad.Tensor(np.asarray(old_logp).reshape(-1, 1))))
    surr = ad.minimum(ad.mul(ratio, adv_t), ad.mul(ad.clip(ratio, 1 - cfg.clip, 1 + cfg.clip), adv_t))
    policy_loss = ad.mul(ad.mean(surr), -1.0)
    value_loss = ad.mean(ad.square(ad.sub(value, ad.Tensor(np.asarray(returns).reshape(-1, 1)))))
    entropy = ad.mean(ent)
    loss = ad.sub(ad.add(policy_loss, ad.mul(value_loss, cfg.value_coef)), ad.mul(entropy, cfg.entropy_coef))
    clip_frac = float(np.mean(np.abs(ratio.value - 1.0) > cfg.clip))
    parts = {"policy_loss": policy_loss.item(), "value_loss": value_loss.item(),
             "entropy": entropy.item(), "clip_frac": clip_frac}
    return loss, parts


def ppo_update(net: ActorCritic, buffer: RolloutBuffer, cfg: PPOConfig,
               rng: np.random.Generator) -> dict:
    """Several epochs of shuffled minibatch Adam steps on the clipped objective."""
    if buffer.advantages is None:
        raise ValueError("compute_gae must run before ppo_update")
    views = np.stack(buffer.views)
    actions = np.stack(buffer.actions)
    old_logp = np.asarray(buffer.log_probs)
    adv = buffer.advantages
    ret = buffer.returns
    n = len(buffer)
    params = net.params
    stats = {k: [] for k in ("policy_loss", "value_loss", "entropy", "clip_frac", "grad_norm",
                             "grad_norm_clipped")}
    for _ in range(cfg.epochs_per_update):
        perm = rng.permutation(n)
        for start in range(0, n, cfg.minibatch_size):
            idx = perm[start:start + cfg.minibatch_size]
            loss, parts = ppo_loss(net, views[idx], actions[idx], old_logp[idx], adv[idx], ret[idx], cfg)
            if not np.isfinite(loss.item()):
                raise PPONumericError(
                    f"non-finite loss {loss.item()} ({parts})",
                    {"indices": idx, "views": views[idx], "actions": actions[idx],
                     "old_log_probs": old_logp[idx], "advantages": adv[idx], "returns": ret[idx]})
            ad.zero_grads(params)
            ad.backward(loss)
            gn = ad.clip_grad_norm(params, cfg.max_grad_norm)
            stats["grad_norm_clipped"].append(ad.grad_norm(params))
            ad.adam_step(params, cfg.lr)
            for k, v in parts.items():
                stats[k].append(v)
            stats["grad_norm"].append(gn)
    return {k: float(np.mean(v)) if k != "grad_norm_clipped" else float(np.max(v))
            for k, v in stats.items()}


@dataclass
class TrainResult:
    net: ActorCritic
    log_rows: list[dict]
    episode_rows: np.ndarray
    checkpoints: list[Path]

    @property
    def final_checkpoint(self) -> Path:
        return self.checkpoints[-1]

    def final_rewards(self, k: int = 100) -> np.ndarray:
        return self.episode_rows[-k:, 1]


def _fmt(x) -> str:
    return repr(float(x)) if isinstance(x, (float, np.floating)) else str(x)


def train(circuit: Circuit, env_config: EnvConfig, spec: PolicySpec, cfg: PPOConfig,
          out_dir, progress: bool = False) -> TrainResult:
    """collect -> GAE -> update until ``episodes_total`` episodes have been played.

    Writes ``log.csv``, ``episodes.csv`` and ``ckpt_<episodes>.bin`` files into ``out_dir``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    env = VoltVarEnv(circuit, env_config)
    net = ActorCritic.for_circuit(circuit, spec, seed=cfg.seed)
    view = view_function(spec, circuit)
    log_rows, ep_rows, ckpts = [], [], []
    done_eps = 0
    update = 0
    with open(out / "log.csv", "w", newline="") as flog, open(out / "episodes.csv", "w", newline="") as fep:
        wlog = csv.writer(flog, lineterminator="\n")
        wep = csv.writer(fep, lineterminator="\n")
        wlog.writerow(LOG_HEADER)
        wep.writerow(EPISODE_HEADER)
        while done_eps < cfg.episodes_total:
            n_eps = min(cfg.episodes_per_update, cfg.episodes_total - done_eps)
            buf = collect_rollouts(env, net, range(done_eps, done_eps + n_eps), cfg.seed, view)
            compute_gae(buf, cfg.gamma, cfg.gae_lambda)
            try:
                stats = ppo_update(net, buf, cfg, np.random.default_rng([cfg.seed, update, 7]))
            except PPONumericError as exc:
                np.savez(out / "nan_dump.npz", **exc.minibatch)
                raise
            ep_stats = buf.episode_stats()
            for k, row in enumerate(ep_stats):
                ep_rows.append([done_eps + k, *row])
                wep.writerow([done_eps + k, *(_fmt(x) for x in row)])
            done_eps += n_eps
            update += 1
            means = ep_stats.mean(axis=0)
            row = {"update": update, "episodes": done_eps, "mean_reward": means[0], "r_v": means[1],
                   "r_c": means[2], "r_p": means[3], **{k: stats[k] for k in LOG_HEADER[6:]}}
            log_rows.append(row)
            wlog.writerow([_fmt(row[k]) for k in LOG_HEADER])
            if progress:
                log.info("update %d episodes %d mean reward %.4f", update, done_eps, means[0])
            last = done_eps >= cfg.episodes_total
            if last or (cfg.checkpoint_every and update % cfg.checkpoint_every == 0):
                path = out / f"ckpt_{done_eps}.bin"
                net.save(path, {"episodes": done_eps, "update": update})
                ckpts.append(path)
    return TrainResult(net, log_rows, np.array(ep_rows).reshape(-1, 5), ckpts)


def evaluate_policy(env: VoltVarEnv, act, n_episodes: int, seed: int = 0,
                    perturb=None) -> np.ndarray:
    """Episodic rewards of ``act(obs, episode, t) -> action`` on held-out load profiles.

    ``perturb(obs, episode, t)`` may corrupt what the policy sees; the
    environment itself is never altered.
    """
    rewards = np.zeros(n_episodes)
    for i in range(n_episodes):
        obs = env.reset(episode_seed(seed, EVAL_SEED_OFFSET + i))
        total, t, done = 0.0, 0, False
        while not done:
            seen = perturb(obs, i, t) if perturb is not None else obs
            res = env.step(act(seen, i, t))
            total += res.reward
            obs, done, t = res.observation, res.done, t + 1
        rewards[i] = total
    return rewards


def policy_actor(net: ActorCritic, circuit: Circuit, deterministic: bool = True, seed: int = 0):
    view = view_function(net.spec, circuit)

    def act(obs: Observation, episode: int, t: int):
        rng = None if deterministic else np.random.default_rng([seed, episode, t, 3])
        return net.act(view(obs), rng, deterministic).action

    return act


def random_actor(env: VoltVarEnv, seed: int = 0):
    def act(obs, episode, t):
        return env.random_action(np.random.default_rng([seed, episode, t, 5]))

    return act
