"""Independent-learner PPO with numpy actor-critic networks.

Every agent owns its own actor, critic and optimizer state. For speed the
per-agent parameters are stacked along a leading agent axis and evaluated
with batched matmuls; no parameter, gradient or sample is shared between
agents.
"""
from __future__ import annotations

import csv
import json
import math
import os
import pickle
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

LOG_STD_MIN, LOG_STD_MAX = -5.0, 2.0
_HALF_LOG_2PI = 0.5 * math.log(2 * math.pi)
CHECKPOINT_VERSION = 1


class NonFiniteLoss(Exception):
    pass


class CheckpointMismatch(Exception):
    pass


@dataclass
class PPOConfig:
    gamma: float = 0.99
    clip_eps: float = 0.2
    lr: float = 1e-5
    batch_size: int = 64
    steps_per_update: int = 256
    total_steps: int = 70_000
    gae_lambda: float = 0.95
    value_coef: float = 0.5
    entropy_coef: float = 0.0
    epochs_per_update: int = 10
    hidden: tuple = (64, 64)
    max_grad_norm: float | None = 0.5
    init_log_std: float = 0.0
    checkpoint_every: int = 1

    def __post_init__(self):
        self.hidden = tuple(self.hidden)
        if not 0 < self.gamma < 1:
            raise ValueError("gamma must lie in (0, 1)")
        if self.clip_eps <= 0:
            raise ValueError("clip_eps must be positive")
        if self.steps_per_update < 1 or self.batch_size < 1:
            raise ValueError("steps_per_update and batch_size must be >= 1")

    @classmethod
    def for_preset(cls, preset: str, **overrides) -> "PPOConfig":
        base = dict(PPO_PRESETS.get(preset, {}))
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


PPO_PRESETS = {
    "paper-scale": {},
    "desk-scale": {"total_steps": 50_000},
}


# -- networks -------------------------------------------------------------------

def _orthogonal(rng, n_in, n_out, gain):
    a = rng.normal(size=(max(n_in, n_out), min(n_in, n_out)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    w = q if n_in >= n_out else q.T
    return gain * w[:n_in, :n_out]


def init_mlp(rngs, sizes, out_gain):
    """Stacked MLP parameters ``[(W, b), ...]`` with one slice per rng."""
    layers = []
    for k, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        gain = out_gain if k == len(sizes) - 2 else math.sqrt(2)
        # C order keeps matmul on one BLAS path, so checkpoint reloads are bit-exact
        w = np.ascontiguousarray(np.stack([_orthogonal(r, n_in, n_out, gain) for r in rngs]))
        layers.append((w, np.zeros((len(rngs), n_out))))
    return layers


def mlp_forward(layers, x):
    """x: (A, B, n_in) -> (A, B, n_out); tanh hidden activations."""
    cache = [x]
    h = x
    for k, (w, b) in enumerate(layers):
        h = h @ w + b[:, None, :]
        if k < len(layers) - 1:
            h = np.tanh(h)
        cache.append(h)
    return h, cache


def mlp_backward(layers, cache, dout):
    grads = [None] * len(layers)
    d = dout
    for k in range(len(layers) - 1, -1, -1):
        w, _ = layers[k]
        h_in = cache[k]
        grads[k] = (np.swapaxes(h_in, 1, 2) @ d, d.sum(axis=1))
        if k > 0:
            d = (d @ np.swapaxes(w, 1, 2)) * (1.0 - cache[k] ** 2)
    return grads


# -- policy state ------------------------------------------------------------------

@dataclass
class PolicyState:
    """Actor/critic parameters of a group of agents (leading axis = agent)."""

    actor: list
    critic: list
    log_std: np.ndarray  # (A, act_dim)
    act_mask: np.ndarray  # (A, act_dim) bool; padding dims for smaller action spaces
    agent_ids: list
    seeds: list
    obs_dim: int
    hidden: tuple
    opt_m: dict = field(default_factory=dict)
    opt_v: dict = field(default_factory=dict)
    opt_t: int = 0

    @property
    def n_agents(self) -> int:
        return len(self.agent_ids)

    @property
    def act_dim(self) -> int:
        return self.log_std.shape[1]

    def params(self) -> dict:
        d = {}
        for name, layers in (("actor", self.actor), ("critic", self.critic)):
            for k, (w, b) in enumerate(layers):
                d[f"{name}.W{k}"] = w
                d[f"{name}.b{k}"] = b
        d["log_std"] = self.log_std
        return d

    def set_params(self, d: dict) -> None:
        for name in ("actor", "critic"):
            layers = getattr(self, name)
            for k in range(len(layers)):
                layers[k] = (np.ascontiguousarray(d[f"{name}.W{k}"]), np.ascontiguousarray(d[f"{name}.b{k}"]))
        self.log_std = np.ascontiguousarray(d["log_std"])

    def copy_params(self) -> dict:
        return {k: v.copy() for k, v in self.params().items()}

    def agent_params(self, i: int) -> dict:
        return {k: v[i] for k, v in self.params().items()}


def init_policy(obs_dim: int, action_dims: dict, seeds: dict | None = None, hidden=(64, 64),
                init_log_std: float = 0.0) -> PolicyState:
    """Fresh independent networks for every agent in ``action_dims``.

    ``seeds`` maps agent id to an integer seed (or seed list) controlling its
    initialization and its action-sampling noise; defaults to the agent id.
    """
    ids = sorted(action_dims)
    seeds = {a: (seeds or {}).get(a, a) for a in ids}
    act_dim = max(action_dims.values()) if ids else 0
    hidden = tuple(hidden)
    rngs = [np.random.default_rng(_seed_list(seeds[a]) + [0]) for a in ids]
    actor = init_mlp(rngs, (obs_dim, *hidden, act_dim), 0.01)
    critic = init_mlp(rngs, (obs_dim, *hidden, 1), 1.0)
    mask = np.zeros((len(ids), act_dim), bool)
    for i, a in enumerate(ids):
        mask[i, : action_dims[a]] = True
    log_std = np.full((len(ids), act_dim), float(np.clip(init_log_std, LOG_STD_MIN, LOG_STD_MAX)))
    return PolicyState(actor, critic, log_std, mask, ids, [seeds[a] for a in ids], obs_dim, hidden)


def _seed_list(s) -> list:
    return [int(x) for x in np.atleast_1d(s)]


def _as_batch(ps: PolicyState, obs):
    obs = np.asarray(obs, dtype=float)
    if obs.ndim == 1:
        obs = obs[None, None, :]
    elif obs.ndim == 2:
        obs = obs[:, None, :]
    if obs.shape[0] != ps.n_agents or obs.shape[2] != ps.obs_dim:
        raise ValueError(f"expected observations of shape ({ps.n_agents}, [B,] {ps.obs_dim}), got {obs.shape}")
    return obs


def _log1m_tanh2(z):
    # log(1 - tanh(z)^2), stable for large |z|
    return 2.0 * (math.log(2.0) - z - np.logaddexp(0.0, -2.0 * z))


def gaussian_log_prob(z, mu, log_std, mask):
    """Log-density of the tanh-squashed action whose pre-squash value is z."""
    ls = np.clip(log_std, LOG_STD_MIN, LOG_STD_MAX)[:, None, :]
    std = np.exp(ls)
    per_dim = -0.5 * ((z - mu) / std) ** 2 - ls - _HALF_LOG_2PI - _log1m_tanh2(z)
    return np.sum(per_dim * mask[:, None, :], axis=-1)


def sample_action(ps: PolicyState, obs, deterministic: bool = False, rngs=None, return_raw: bool = False):
    """Actions in [-1, 1] and their log-probabilities.

    ``obs`` is (A, obs_dim) or (A, B, obs_dim). Stochastic mode draws one
    Gaussian sample per agent from that agent's own generator in ``rngs``
    (defaults to generators seeded from ``ps.seeds``); deterministic mode
    returns tanh(mean) with the log-density at the mean.
    """
    x = _as_batch(ps, obs)
    squeeze = np.asarray(obs).ndim < 3
    mu, _ = mlp_forward(ps.actor, x)
    if deterministic:
        z = mu
    else:
        if rngs is None:
            rngs = [np.random.default_rng(_seed_list(s) + [1]) for s in ps.seeds]
        std = np.exp(np.clip(ps.log_std, LOG_STD_MIN, LOG_STD_MAX))
        eps = np.stack([r.standard_normal(mu.shape[1:]) for r in rngs])
        z = mu + std[:, None, :] * eps
    logp = gaussian_log_prob(z, mu, ps.log_std, ps.act_mask)
    a = np.tanh(z)
    if squeeze:
        a, logp, z = a[:, 0], logp[:, 0], z[:, 0]
    return (a, logp, z) if return_raw else (a, logp)


def action_log_prob(ps: PolicyState, obs, action):
    """Log-probability of squashed actions (inverse tanh applied internally)."""
    x = _as_batch(ps, obs)
    a = np.asarray(action, dtype=float).reshape(x.shape[0], x.shape[1], -1)
    z = np.arctanh(np.clip(a, -1 + 1e-12, 1 - 1e-12))
    mu, _ = mlp_forward(ps.actor, x)
    return gaussian_log_prob(z, mu, ps.log_std, ps.act_mask)


def value(ps: PolicyState, obs) -> np.ndarray:
    x = _as_batch(ps, obs)
    v, _ = mlp_forward(ps.critic, x)
    out = v[..., 0]
    return out[:, 0] if np.asarray(obs).ndim < 3 else out


# -- rollouts ----------------------------------------------------------------

class RolloutBuffer:
    """Fixed-capacity on-policy storage, one column per agent."""

    def __init__(self, capacity: int, n_agents: int, obs_dim: int, act_dim: int):
        self.capacity = capacity
        self.obs = np.zeros((capacity, n_agents, obs_dim))
        self.raw = np.zeros((capacity, n_agents, act_dim))  # pre-squash samples
        self.logp = np.zeros((capacity, n_agents))
        self.rewards = np.zeros((capacity, n_agents))
        self.values = np.zeros((capacity, n_agents))
        self.dones = np.zeros(capacity, bool)
        self.advantages = None
        self.returns = None
        self.ptr = 0

    @property
    def full(self) -> bool:
        return self.ptr == self.capacity

    def add(self, obs, raw, logp, reward, value, done) -> None:
        if self.full:
            raise RuntimeError("rollout buffer is full")
        i = self.ptr
        self.obs[i], self.raw[i], self.logp[i] = obs, raw, logp
        self.rewards[i], self.values[i], self.dones[i] = reward, value, done
        self.ptr += 1

    def finish(self, last_value, gamma: float, lam: float) -> None:
        if not self.full:
            raise RuntimeError("targets need a full buffer")
        self.advantages, self.returns = compute_targets(self.rewards, self.values, self.dones,
                                                        last_value, gamma, lam)

    def clear(self) -> None:
        self.ptr = 0
        self.advantages = self.returns = None


def compute_targets(rewards, values, dones, last_value, gamma: float, lam: float):
    """GAE(lambda) advantages and lambda-returns.

    ``rewards[t]`` and ``values[t]`` belong to the transition leaving state
    t; ``dones[t]`` marks an episode end after it, which cuts both the
    bootstrap and the advantage recursion. ``last_value`` is the critic's
    estimate for the state following the final stored transition.
    """
    rewards = np.asarray(rewards, dtype=float)
    values = np.asarray(values, dtype=float)
    dones = np.asarray(dones, dtype=bool)
    n = len(rewards)
    adv = np.zeros_like(rewards)
    ret = np.zeros_like(rewards)
    next_v = np.asarray(last_value, dtype=float)
    next_ret = next_v
    running = np.zeros_like(rewards[0]) if n else 0.0
    for t in range(n - 1, -1, -1):
        keep = 0.0 if dones[t] else 1.0
        delta = rewards[t] + gamma * next_v * keep - values[t]
        running = delta + gamma * lam * keep * running
        adv[t] = running
        # lambda-return recursion; equals adv + value but is exact for gamma = 0
        ret[t] = rewards[t] + gamma * keep * ((1 - lam) * next_v + lam * next_ret)
        next_v, next_ret = values[t], ret[t]
    return adv, ret


# -- update ------------------------------------------------------------------

def clipped_objective(ratio, adv, eps):
    """Elementwise min(r * A, clip(r, 1 - eps, 1 + eps) * A)."""
    ratio = np.asarray(ratio, dtype=float)
    return np.minimum(ratio * adv, np.clip(ratio, 1 - eps, 1 + eps) * adv)


def ppo_losses(ps: PolicyState, obs, raw, logp_old, adv, ret, cfg: PPOConfig, grads: bool = True):
    """Per-agent losses on one minibatch and their analytic gradients.

    All arrays carry a leading agent axis and a batch axis. Returns
    ``(total_loss (A,), stats, grads)`` where grads maps parameter names to
    arrays shaped like :meth:`PolicyState.params`.
    """
    B = obs.shape[1]
    mask = ps.act_mask[:, None, :]
    ls = np.clip(ps.log_std, LOG_STD_MIN, LOG_STD_MAX)
    std = np.exp(ls)[:, None, :]

    mu, a_cache = mlp_forward(ps.actor, obs)
    logp = gaussian_log_prob(raw, mu, ps.log_std, ps.act_mask)
    log_ratio = logp - logp_old
    ratio = np.exp(log_ratio)
    surr1 = ratio * adv
    surr2 = np.clip(ratio, 1 - cfg.clip_eps, 1 + cfg.clip_eps) * adv
    policy_loss = -np.mean(np.minimum(surr1, surr2), axis=1)
    n_act = ps.act_mask.sum(axis=1)
    entropy = np.sum(ls * ps.act_mask, axis=1) + n_act * (0.5 + _HALF_LOG_2PI)

    v, c_cache = mlp_forward(ps.critic, obs)
    v = v[..., 0]
    value_loss = np.mean((v - ret) ** 2, axis=1)
    total = policy_loss + cfg.value_coef * value_loss - cfg.entropy_coef * entropy

    stats = {
        "policy_loss": policy_loss,
        "value_loss": value_loss,
        "entropy": entropy,
        "mean_ratio": ratio.mean(axis=1),
        "clip_fraction": np.mean(np.abs(ratio - 1) > cfg.clip_eps, axis=1),
        "approx_kl": np.mean((ratio - 1) - log_ratio, axis=1),
    }
    if not grads:
        return total, stats, None

    active = surr1 <= surr2
    dlogp = -(adv * ratio * active) / B  # (A, B)
    zs = (raw - mu) / std
    dmu = dlogp[..., None] * zs / std * mask
    dls = np.sum(dlogp[..., None] * (zs**2 - 1.0) * mask, axis=1) - cfg.entropy_coef * ps.act_mask
    # log_std is clipped in the forward pass: no gradient outside the band
    dls = dls * ((ps.log_std > LOG_STD_MIN) & (ps.log_std < LOG_STD_MAX))
    g_actor = mlp_backward(ps.actor, a_cache, dmu)
    dv = (cfg.value_coef * 2.0 * (v - ret) / B)[..., None]
    g_critic = mlp_backward(ps.critic, c_cache, dv)

    g = {}
    for name, gl in (("actor", g_actor), ("critic", g_critic)):
        for k, (gw, gb) in enumerate(gl):
            g[f"{name}.W{k}"] = gw
            g[f"{name}.b{k}"] = gb
    g["log_std"] = dls
    return total, stats, g


def adam_step(ps: PolicyState, grads: dict, lr: float, beta1=0.9, beta2=0.999, eps=1e-8,
              max_grad_norm: float | None = None) -> None:
    """One Adam step per agent, with optional per-agent global-norm clipping."""
    params = ps.params()
    if max_grad_norm is not None:
        sq = sum(np.sum(g.reshape(g.shape[0], -1) ** 2, axis=1) for g in grads.values())
        scale = np.minimum(1.0, max_grad_norm / (np.sqrt(sq) + 1e-12))
        grads = {k: g * scale.reshape((-1,) + (1,) * (g.ndim - 1)) for k, g in grads.items()}
    ps.opt_t += 1
    c1 = 1 - beta1**ps.opt_t
    c2 = 1 - beta2**ps.opt_t
    new = {}
    for k, p in params.items():
        m = ps.opt_m.get(k, np.zeros_like(p))
        v = ps.opt_v.get(k, np.zeros_like(p))
        m = beta1 * m + (1 - beta1) * grads[k]
        v = beta2 * v + (1 - beta2) * grads[k] ** 2
        ps.opt_m[k], ps.opt_v[k] = m, v
        new[k] = p - lr * (m / c1) / (np.sqrt(v / c2) + eps)
    new["log_std"] = np.clip(new["log_std"], LOG_STD_MIN, LOG_STD_MAX)
    ps.set_params(new)


@dataclass
class UpdateStats:
    policy_loss: np.ndarray
    value_loss: np.ndarray
    entropy: np.ndarray
    mean_ratio: np.ndarray
    clip_fraction: np.ndarray
    approx_kl: np.ndarray


def ppo_update(ps: PolicyState, buf: RolloutBuffer, cfg: PPOConfig, rng=None) -> UpdateStats:
    """Clipped-surrogate epochs over shuffled minibatches, then clear the buffer.

    Advantages are normalized per agent over the whole buffer. On a
    non-finite loss or gradient the parameters and optimizer state are
    restored and :class:`NonFiniteLoss` is raised.
    """
    if not buf.full or buf.advantages is None:
        raise RuntimeError("ppo_update needs a full buffer with computed targets")
    rng = np.random.default_rng(0) if rng is None else rng
    swap = lambda x: np.swapaxes(x, 0, 1)  # noqa: E731 (T, A, ...) -> (A, T, ...)
    obs, raw, logp_old = swap(buf.obs), swap(buf.raw), swap(buf.logp)
    adv, ret = swap(buf.advantages), swap(buf.returns)
    adv = (adv - adv.mean(axis=1, keepdims=True)) / (adv.std(axis=1, keepdims=True) + 1e-8)

    backup = (ps.copy_params(), {k: v.copy() for k, v in ps.opt_m.items()},
              {k: v.copy() for k, v in ps.opt_v.items()}, ps.opt_t)
    n = buf.capacity
    acc = {}
    n_mb = 0
    for _ in range(cfg.epochs_per_update):
        perm = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            total, stats, grads = ppo_losses(ps, obs[:, idx], raw[:, idx], logp_old[:, idx],
                                             adv[:, idx], ret[:, idx], cfg)
            finite = np.all(np.isfinite(total)) and all(np.all(np.isfinite(g)) for g in grads.values())
            if not finite:
                params, m, v, t = backup
                ps.set_params(params)
                ps.opt_m, ps.opt_v, ps.opt_t = m, v, t
                buf.clear()
                raise NonFiniteLoss("non-finite PPO loss or gradient; update aborted")
            adam_step(ps, grads, cfg.lr, max_grad_norm=cfg.max_grad_norm)
            for k, val in stats.items():
                acc[k] = acc.get(k, 0.0) + val
            n_mb += 1
    buf.clear()
    return UpdateStats(**{k: acc[k] / n_mb for k in acc})


# -- multi-agent driver --------------------------------------------------------

class AgentPolicies:
    """Callable mapping an observation dict to an action dict."""

    def __init__(self, ps: PolicyState, action_dims: dict, deterministic: bool = True, rngs=None):
        self.ps = ps
        self.action_dims = action_dims
        self.deterministic = deterministic
        self.rngs = rngs

    def __call__(self, observations):
        obs = np.stack([observations[a] for a in self.ps.agent_ids])
        act, _ = sample_action(self.ps, obs, self.deterministic, self.rngs)
        return {a: act[i, : self.action_dims[a]] for i, a in enumerate(self.ps.agent_ids)}


@dataclass
class TrainState:
    ps: PolicyState
    env: object
    obs: dict
    buffer: RolloutBuffer
    sample_rngs: list
    minibatch_rng: np.random.Generator
    step: int = 0
    update: int = 0
    episode_return: np.ndarray = None
    curves: list = field(default_factory=list)


@dataclass
class TrainResult:
    policy: PolicyState
    curves: list
    steps: int
    updates: int


CURVE_FIELDS = ("update", "step", "agent", "mean_reward", "policy_loss", "value_loss", "entropy",
                "clip_fraction", "approx_kl", "mean_ratio")


def _new_state(env, cfg: PPOConfig, seed: int, agent_seeds: dict | None) -> TrainState:
    obs = env.reset()
    agents = list(env.agents)
    dims = dict(env.action_dims)
    obs_dim = len(next(iter(obs.values())))
    seeds = agent_seeds or {a: [int(seed), 3, int(a)] for a in agents}
    ps = init_policy(obs_dim, dims, seeds, cfg.hidden, cfg.init_log_std)
    rngs = [np.random.default_rng(_seed_list(s) + [1]) for s in ps.seeds]
    buf = RolloutBuffer(cfg.steps_per_update, len(agents), obs_dim, ps.act_dim)
    return TrainState(ps, env, obs, buf, rngs, np.random.default_rng([int(seed), 5]))


def save_checkpoint(state: TrainState, out_dir, cfg: PPOConfig, config_hash: str = "") -> list[Path]:
    """Per-agent parameter files plus a resumable trainer snapshot."""
    ck = Path(out_dir) / "checkpoints"
    ck.mkdir(parents=True, exist_ok=True)
    ps = state.ps
    written = []
    for i, a in enumerate(ps.agent_ids):
        meta = {"version": CHECKPOINT_VERSION, "agent": int(a), "obs_dim": ps.obs_dim,
                "act_dim": int(ps.act_mask[i].sum()), "hidden": list(ps.hidden),
                "config_hash": config_hash, "update": state.update}
        path = ck / f"agent_{a}.npz"
        tmp = ck / f".agent_{a}.tmp.npz"
        np.savez(tmp, meta=json.dumps(meta, sort_keys=True), **ps.agent_params(i))
        os.replace(tmp, path)
        written.append(path)
    tmp = ck / ".trainer_state.tmp"
    with open(tmp, "wb") as fh:
        pickle.dump({"version": CHECKPOINT_VERSION, "config_hash": config_hash, "state": state}, fh)
    os.replace(tmp, ck / "trainer_state.pkl")
    written.append(ck / "trainer_state.pkl")
    return written


def load_trainer_state(out_dir, config_hash: str = "") -> TrainState:
    path = Path(out_dir) / "checkpoints" / "trainer_state.pkl"
    with open(path, "rb") as fh:
        blob = pickle.load(fh)
    if config_hash and blob.get("config_hash") and blob["config_hash"] != config_hash:
        raise CheckpointMismatch(f"checkpoint was written for config {blob['config_hash']}, not {config_hash}")
    return blob["state"]


def load_policies(ck_dir, action_dims: dict, obs_dim: int) -> PolicyState:
    """Stack per-agent checkpoint files for the given agent roster."""
    ck_dir = Path(ck_dir)
    ids = sorted(action_dims)
    if not ids:
        raise CheckpointMismatch("scenario has no RL agents")
    per_agent, hidden = [], None
    for a in ids:
        path = ck_dir / f"agent_{a}.npz"
        if not path.is_file():
            raise CheckpointMismatch(f"missing checkpoint for agent {a}: {path}")
        with np.load(path) as z:
            meta = json.loads(str(z["meta"]))
            params = {k: z[k] for k in z.files if k != "meta"}
        if meta["obs_dim"] != obs_dim or meta["act_dim"] != action_dims[a]:
            raise CheckpointMismatch(f"agent {a}: checkpoint dims ({meta['obs_dim']}, {meta['act_dim']}) "
                                     f"do not match scenario ({obs_dim}, {action_dims[a]})")
        if hidden is not None and tuple(meta["hidden"]) != hidden:
            raise CheckpointMismatch("agents have different network shapes")
        hidden = tuple(meta["hidden"])
        per_agent.append(params)
    ps = init_policy(obs_dim, action_dims, hidden=hidden)
    ps.set_params({k: np.stack([p[k] for p in per_agent]) for k in per_agent[0]})
    return ps


def train(env, cfg: PPOConfig, seed: int = 0, out_dir=None, resume: bool = False,
          agent_seeds: dict | None = None, config_hash: str = "", stop_after_updates: int | None = None,
          log=None) -> TrainResult:
    """Run independent PPO learners on ``env`` for ``cfg.total_steps`` steps.

    Every ``steps_per_update`` environment steps each agent updates from its
    own rollout. With ``out_dir`` set, checkpoints and the training curve are
    written after updates; ``resume`` continues from the latest trainer
    snapshot so the result matches an uninterrupted run.
    ``stop_after_updates`` ends early (used to exercise resume).
    """
    if resume and out_dir is not None and (Path(out_dir) / "checkpoints" / "trainer_state.pkl").is_file():
        state = load_trainer_state(out_dir, config_hash)
        env = state.env
    else:
        state = _new_state(env, cfg, seed, agent_seeds)
    ps, buf = state.ps, state.buffer
    agents = ps.agent_ids
    if state.episode_return is None:
        state.episode_return = np.zeros(len(agents))

    while state.step < cfg.total_steps:
        obs = np.stack([state.obs[a] for a in agents])
        act, logp, z = sample_action(ps, obs, False, state.sample_rngs, return_raw=True)
        v = value(ps, obs)
        res = env.step({a: act[i, : env.action_dims[a]] for i, a in enumerate(agents)})
        r = np.array([res.rewards[a] for a in agents])
        buf.add(obs, z, logp, r, v, res.done)
        state.step += 1
        state.obs = env.reset() if res.done else res.observations

        if buf.full:
            last_obs = np.stack([state.obs[a] for a in agents])
            buf.finish(value(ps, last_obs), cfg.gamma, cfg.gae_lambda)
            mean_r = buf.rewards.mean(axis=0)
            stats = ppo_update(ps, buf, cfg, state.minibatch_rng)
            state.update += 1
            for i, a in enumerate(agents):
                state.curves.append({
                    "update": state.update, "step": state.step, "agent": a,
                    "mean_reward": float(mean_r[i]),
                    **{k: float(getattr(stats, k)[i]) for k in CURVE_FIELDS[4:]},
                })
            if log is not None:
                log(f"update {state.update} step {state.step} mean reward {mean_r.mean():.4f} "
                    f"clip {stats.clip_fraction.mean():.3f} kl {stats.approx_kl.mean():.2e}")
            if out_dir is not None and state.update % cfg.checkpoint_every == 0:
                save_checkpoint(state, out_dir, cfg, config_hash)
                write_curves(state.curves, Path(out_dir) / "training_curve.csv")
            if stop_after_updates is not None and state.update >= stop_after_updates:
                break

    if out_dir is not None:
        save_checkpoint(state, out_dir, cfg, config_hash)
        write_curves(state.curves, Path(out_dir) / "training_curve.csv")
    return TrainResult(ps, state.curves, state.step, state.update)


def write_curves(curves: list, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CURVE_FIELDS)
        for row in curves:
            w.writerow([row[k] if k in ("update", "step", "agent") else f"{row[k]:.10g}" for k in CURVE_FIELDS])

