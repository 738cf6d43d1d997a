"""Decentralized online actor-critic learners with small convolutional networks.

Every agent owns its own parameters. For speed the parameters of a whole
population are stored stacked along a leading agent axis, and forward and
backward passes run for all agents at once; no quantity ever mixes two
agents' slices, so this is purely a batching device.

Network (per agent), channels-last internally::

    obs (w, w, 4) -> conv 3x3 (16) -> relu -> conv 3x3 (32) -> relu
        -> flatten -> dense (64) -> relu -> { logits (4), value (1) }

Weight layouts: conv kernels are (kh, kw, cin, cout); the dense layer is
(h, w, c, hidden) so the flattened conv output indexes it directly.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numba
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import env as envmod
from .env import EnvParams, EpisodeLog, ReplayRecorder
from .errors import CheckpointError, ConfigError, ContractViolation, NumericalFailure
from .metrics import EpisodeStats, MeanObsAccumulator, episode_stats
from .seeding import substream


@dataclass(frozen=True)
class Architecture:
    window: int = 7
    channels: int = 4
    conv1: int = 16
    conv2: int = 32
    kernel: int = 3
    hidden: int = 64
    actions: int = 4
    dtype: str = "float64"  # compute precision; checkpoints always store float64

    def __post_init__(self):
        if self.dtype not in ("float64", "float32"):
            raise ConfigError(f"unsupported network dtype {self.dtype!r}")
        if self.conv2_size < 1:
            raise ConfigError(f"window {self.window} too small for two {self.kernel}x{self.kernel} valid convolutions")

    @property
    def conv1_size(self) -> int:
        return self.window - self.kernel + 1

    @property
    def conv2_size(self) -> int:
        return self.window - 2 * (self.kernel - 1)

    @property
    def flat(self) -> int:
        return self.conv2_size ** 2 * self.conv2

    def shapes(self) -> dict[str, tuple[int, ...]]:
        k, s2 = self.kernel, self.conv2_size
        return {
            "conv1_w": (k, k, self.channels, self.conv1),
            "conv1_b": (self.conv1,),
            "conv2_w": (k, k, self.conv1, self.conv2),
            "conv2_b": (self.conv2,),
            "fc_w": (s2, s2, self.conv2, self.hidden),
            "fc_b": (self.hidden,),
            "pi_w": (self.hidden, self.actions),
            "pi_b": (self.actions,),
            "v_w": (self.hidden,),
            "v_b": (),
        }

    def fan_in(self) -> dict[str, int]:
        k = self.kernel
        fc1, fc2 = k * k * self.channels, k * k * self.conv1
        return {"conv1_w": fc1, "conv1_b": fc1, "conv2_w": fc2, "conv2_b": fc2, "fc_w": self.flat,
                "fc_b": self.flat, "pi_w": self.hidden, "pi_b": self.hidden, "v_w": self.hidden, "v_b": self.hidden}

    def descriptor(self) -> dict:
        return {"kind": "conv2-dense-actor-critic", **asdict(self)}


PARAM_NAMES = tuple(Architecture().shapes())


@dataclass
class PolicyNet:
    arch: Architecture
    params: dict[str, np.ndarray]  # each with a leading population axis

    @property
    def population(self) -> int:
        return self.params["v_b"].shape[0]

    @classmethod
    def zeros(cls, arch: Architecture, population: int = 1) -> "PolicyNet":
        return cls(arch, {n: np.zeros((population,) + s, dtype=arch.dtype) for n, s in arch.shapes().items()})

    @classmethod
    def initialize(cls, arch: Architecture, rngs: Sequence[np.random.Generator]) -> "PolicyNet":
        """Fan-in scaled uniform init, one generator per agent."""
        shapes, fan = arch.shapes(), arch.fan_in()
        params = {n: np.empty((len(rngs),) + s) for n, s in shapes.items()}
        for a, rng in enumerate(rngs):
            for n in PARAM_NAMES:
                bound = 1.0 / np.sqrt(fan[n])
                params[n][a] = rng.uniform(-bound, bound, size=shapes[n])
        return cls(arch, {n: p.astype(arch.dtype) for n, p in params.items()})

    def agent(self, a: int) -> "PolicyNet":
        return PolicyNet(self.arch, {n: p[a:a + 1].copy() for n, p in self.params.items()})

    def copy(self) -> "PolicyNet":
        return PolicyNet(self.arch, {n: p.copy() for n, p in self.params.items()})

    @classmethod
    def stack(cls, nets: Sequence["PolicyNet"]) -> "PolicyNet":
        arch = nets[0].arch
        if any(n.arch != arch for n in nets):
            raise ContractViolation("cannot stack networks of different architectures")
        return cls(arch, {n: np.concatenate([net.params[n] for net in nets]) for n in PARAM_NAMES})

    def flat_params(self, a: int = 0) -> np.ndarray:
        return np.concatenate([self.params[n][a].ravel() for n in PARAM_NAMES])


@dataclass(frozen=True)
class TrainerConfig:
    gamma: float = 0.99
    lr: float = 1e-3
    beta: float = 0.01
    value_coef: float = 0.5
    grad_clip: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.gamma < 1.0:
            raise ConfigError("gamma must lie in [0, 1)")
        if self.lr < 0:
            raise ConfigError("lr must be non-negative")
        if self.beta < 0 or self.value_coef < 0:
            raise ConfigError("beta and value_coef must be non-negative")


@dataclass
class Experience:
    """One transition per agent; single-agent fields or arrays with a leading agent axis."""

    obs: np.ndarray
    action: np.ndarray | int
    reward: np.ndarray | float
    next_obs: np.ndarray
    terminal: np.ndarray | bool


# ---------------------------------------------------------------------------
# forward / backward
# ---------------------------------------------------------------------------

def _patches(x: np.ndarray, k: int) -> np.ndarray:
    """im2col for channels-last (N, H, W, C) input: (N, out*out, k*k*C), columns ordered (dy, dx, c)."""
    n, size = x.shape[0], x.shape[1] - k + 1
    return sliding_window_view(x, (k, k), axis=(1, 2)).transpose(0, 1, 2, 4, 5, 3).reshape(n, size * size, -1)


@dataclass
class ForwardCache:
    p1: np.ndarray
    z1: np.ndarray
    p2: np.ndarray
    z2: np.ndarray
    flat: np.ndarray
    zh: np.ndarray
    h: np.ndarray
    logits: np.ndarray
    probs: np.ndarray
    log_probs: np.ndarray
    value: np.ndarray


def forward_batch(net: PolicyNet, obs: np.ndarray) -> ForwardCache:
    """Population forward pass; ``obs`` is (N, C, w, w) with N the population size."""
    arch, P = net.arch, net.params
    n = net.population
    if obs.shape != (n, arch.channels, arch.window, arch.window):
        raise ContractViolation(f"observation batch shape {obs.shape} does not match network input "
                                f"{(n, arch.channels, arch.window, arch.window)}")
    k, s1 = arch.kernel, arch.conv1_size
    x = obs.transpose(0, 2, 3, 1).astype(arch.dtype)
    p1 = _patches(x, k)
    z1 = p1 @ P["conv1_w"].reshape(n, -1, arch.conv1) + P["conv1_b"][:, None, :]
    a1 = np.maximum(z1, 0.0).reshape(n, s1, s1, arch.conv1)
    p2 = _patches(a1, k)
    z2 = p2 @ P["conv2_w"].reshape(n, -1, arch.conv2) + P["conv2_b"][:, None, :]
    flat = np.maximum(z2, 0.0).reshape(n, -1)
    zh = np.matmul(flat[:, None, :], P["fc_w"].reshape(n, arch.flat, arch.hidden))[:, 0] + P["fc_b"]
    h = np.maximum(zh, 0.0)
    logits = np.matmul(h[:, None, :], P["pi_w"])[:, 0] + P["pi_b"]
    value = np.einsum("nh,nh->n", h, P["v_w"]) + P["v_b"]
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    probs = np.exp(log_probs)
    return ForwardCache(p1, z1, p2, z2, flat, zh, h, logits, probs, log_probs, value)


class Rank1:
    """Per-agent outer product ``u[a] (x) v[a]`` kept in factored form."""

    def __init__(self, u: np.ndarray, v: np.ndarray, shape: tuple[int, ...]):
        self.u, self.v, self.shape = u, v, shape

    def sqnorm(self) -> np.ndarray:
        return (self.u ** 2).sum(axis=1) * (self.v ** 2).sum(axis=1)

    def dense(self) -> np.ndarray:
        return (self.u[:, :, None] * self.v[:, None, :]).reshape(self.shape)


@numba.njit(cache=True)
def _rank1_sub(p, u, v):  # pragma: no cover - compiled
    n, f, h = p.shape
    for a in range(n):
        for i in range(f):
            ui = u[a, i]
            if ui != 0.0:
                for j in range(h):
                    p[a, i, j] -= ui * v[a, j]


def backward_batch(net: PolicyNet, cache: ForwardCache, d_logits: np.ndarray, d_value: np.ndarray,
                   factored: bool = False) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss given its gradient w.r.t. logits and value.

    With ``factored`` the dense-layer weight gradient is returned as a
    :class:`Rank1` instead of a materialized array.
    """
    arch, P = net.arch, net.params
    n, k = net.population, arch.kernel
    s1, s2 = arch.conv1_size, arch.conv2_size
    d_logits = d_logits.astype(arch.dtype, copy=False)
    d_value = d_value.astype(arch.dtype, copy=False)
    g = {
        "pi_w": cache.h[:, :, None] * d_logits[:, None, :],
        "pi_b": d_logits.copy(),
        "v_w": cache.h * d_value[:, None],
        "v_b": d_value.copy(),
    }
    dh = np.matmul(d_logits[:, None, :], P["pi_w"].transpose(0, 2, 1))[:, 0] + d_value[:, None] * P["v_w"]
    dzh = dh * (cache.zh > 0)
    fc_w = P["fc_w"].reshape(n, arch.flat, arch.hidden)
    g["fc_w"] = Rank1(cache.flat, dzh, P["fc_w"].shape)
    if not factored:
        g["fc_w"] = g["fc_w"].dense()
    g["fc_b"] = dzh
    dz2 = np.matmul(dzh[:, None, :], fc_w.transpose(0, 2, 1))[:, 0].reshape(n, s2 * s2, arch.conv2) * (cache.z2 > 0)
    w2 = P["conv2_w"].reshape(n, -1, arch.conv2)
    g["conv2_w"] = (cache.p2.transpose(0, 2, 1) @ dz2).reshape(P["conv2_w"].shape)
    g["conv2_b"] = dz2.sum(axis=1)
    dp2 = (dz2 @ w2.transpose(0, 2, 1)).reshape(n, s2, s2, k, k, arch.conv1)
    da1 = np.zeros((n, s1, s1, arch.conv1), dtype=arch.dtype)
    for dy in range(k):
        for dx in range(k):
            da1[:, dy:dy + s2, dx:dx + s2, :] += dp2[:, :, :, dy, dx, :]
    dz1 = da1.reshape(n, s1 * s1, arch.conv1) * (cache.z1 > 0)
    g["conv1_w"] = (cache.p1.transpose(0, 2, 1) @ dz1).reshape(P["conv1_w"].shape)
    g["conv1_b"] = dz1.sum(axis=1)
    return g


def forward(net: PolicyNet, obs: np.ndarray) -> tuple[np.ndarray, np.ndarray | float]:
    """Action probabilities and state value.

    A single observation (C, w, w) is accepted for a one-agent network and
    yields a (4,) probability vector and a float.
    """
    single = obs.ndim == 3
    if single:
        if net.population != 1:
            raise ContractViolation("single observation given to a multi-agent network")
        obs = obs[None]
    cache = forward_batch(net, obs)
    if single:
        return cache.probs[0], float(cache.value[0])
    return cache.probs, cache.value


def sample_action(probs: np.ndarray, rng: np.random.Generator) -> int:
    """Categorical sample using one uniform draw."""
    cdf = np.cumsum(probs)
    idx = int(np.searchsorted(cdf / cdf[-1], rng.random(), side="right"))
    return min(idx, len(probs) - 1)


def sample_actions(probs: np.ndarray, rngs: Sequence[np.random.Generator]) -> np.ndarray:
    """Row-wise :func:`sample_action`, one generator per row (same draws, same results)."""
    u = np.array([r.random() for r in rngs])
    cdf = np.cumsum(probs, axis=1)
    cdf /= cdf[:, -1:]
    return np.minimum((cdf <= u[:, None]).sum(axis=1), probs.shape[1] - 1)


def greedy_action(probs: np.ndarray) -> int:
    return int(np.argmax(probs))


def discounted_return(rewards: Sequence[float], gamma: float) -> float:
    total, discount = 0.0, 1.0
    for r in rewards:
        total += discount * r
        discount *= gamma
    return total


# ---------------------------------------------------------------------------
# update rule
# ---------------------------------------------------------------------------

def _as_batch(exp: Experience, n: int) -> Experience:
    obs = np.asarray(exp.obs)
    if obs.ndim == 3:
        obs, next_obs = obs[None], np.asarray(exp.next_obs)[None]
    else:
        next_obs = np.asarray(exp.next_obs)
    batch = Experience(
        obs, np.asarray(exp.action, dtype=np.int64).reshape(-1), np.asarray(exp.reward, dtype=np.float64).reshape(-1),
        next_obs, np.asarray(exp.terminal, dtype=bool).reshape(-1),
    )
    if len(batch.action) != n or len(batch.reward) != n or len(batch.terminal) != n or len(obs) != n:
        raise ContractViolation(f"experience does not hold exactly {n} transitions")
    if batch.action.min() < 0 or batch.action.max() >= envmod.N_ACTIONS:
        raise ContractViolation("action index out of range")
    return batch


def policy_terms(log_probs: np.ndarray, probs: np.ndarray, action: np.ndarray, td: np.ndarray, beta: float):
    """Policy-gradient loss, KL(pi || uniform) and their logit gradient."""
    n, n_act = probs.shape
    rows = np.arange(n)
    entropy = -(probs * log_probs).sum(axis=1)
    kl = np.log(n_act) - entropy
    pg_loss = -log_probs[rows, action] * td
    onehot = np.zeros_like(probs)
    onehot[rows, action] = 1.0
    d_logits = -td[:, None] * (onehot - probs) + beta * probs * (log_probs + entropy[:, None])
    return pg_loss, kl, entropy, d_logits


def gradients(
    net: PolicyNet,
    exp: Experience,
    cfg: TrainerConfig,
    cache: ForwardCache | None = None,
    next_value: np.ndarray | None = None,
    factored: bool = False,
) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray]]:
    """Gradient of the one-step actor-critic loss per agent (not clipped, not applied).

    loss = -log pi(a|s) * td + value_coef * td**2 + beta * KL(pi(.|s) || uniform)
    with td = r + gamma * V(s') * (1 - terminal) - V(s); td is a constant in the
    policy term and V(s') is a constant everywhere.
    """
    n = net.population
    exp = _as_batch(exp, n)
    if cache is None:
        cache = forward_batch(net, exp.obs)
    if next_value is None:
        next_value = np.where(exp.terminal, 0.0, forward_batch(net, exp.next_obs).value)
    target = exp.reward + cfg.gamma * next_value * ~exp.terminal
    td = target - cache.value
    pg_loss, kl, entropy, d_logits = policy_terms(cache.log_probs, cache.probs, exp.action, td, cfg.beta)
    value_loss = cfg.value_coef * td ** 2
    d_value = -2.0 * cfg.value_coef * td
    grads = backward_batch(net, cache, d_logits, d_value, factored)
    diag = {
        "td_error": td,
        "policy_loss": pg_loss,
        "value_loss": value_loss,
        "kl": kl,
        "entropy": entropy,
        "loss": pg_loss + value_loss + cfg.beta * kl,
        "target": target,
    }
    return grads, diag


def surrogate_loss(net: PolicyNet, exp: Experience, cfg: TrainerConfig, target: np.ndarray, td: np.ndarray) -> np.ndarray:
    """Per-agent loss whose exact gradient :func:`gradients` computes (target and policy td frozen)."""
    exp = _as_batch(exp, net.population)
    cache = forward_batch(net, exp.obs)
    pg_loss, kl, _, _ = policy_terms(cache.log_probs, cache.probs, exp.action, td, cfg.beta)
    return pg_loss + cfg.value_coef * (target - cache.value) ** 2 + cfg.beta * kl


def update(
    net: PolicyNet,
    exp: Experience,
    cfg: TrainerConfig,
    cache: ForwardCache | None = None,
    next_value: np.ndarray | None = None,
) -> tuple[PolicyNet, dict[str, np.ndarray]]:
    """One clipped SGD step per agent; ``net`` is modified in place and returned."""
    grads, diag = gradients(net, exp, cfg, cache, next_value, factored=True)
    sq = sum(g.sqnorm() if isinstance(g, Rank1) else (g.reshape(g.shape[0], -1) ** 2).sum(axis=1)
             for g in grads.values())
    norm = np.sqrt(sq)
    diag["grad_norm"] = norm
    if not (np.all(np.isfinite(diag["loss"])) and np.all(np.isfinite(norm))):
        bad = np.flatnonzero(~(np.isfinite(diag["loss"]) & np.isfinite(norm)))
        raise NumericalFailure(f"non-finite loss or gradient for agent(s) {bad.tolist()}", diagnostics=diag)
    if cfg.lr == 0.0:
        return net, diag
    scale = np.ones_like(norm)
    if cfg.grad_clip and cfg.grad_clip > 0:
        over = norm > cfg.grad_clip
        scale[over] = cfg.grad_clip / norm[over]
    step = cfg.lr * scale
    for name, g in grads.items():
        p = net.params[name]
        if isinstance(g, Rank1):
            _rank1_sub(p.reshape(p.shape[0], g.u.shape[1], g.v.shape[1]), (g.u * step[:, None]).astype(p.dtype), g.v)
        else:
            p -= (step.reshape((-1,) + (1,) * (p.ndim - 1)) * g).astype(p.dtype, copy=False)
    return net, diag


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

TRAIN_LOG_HEADER = ["episode", "agent_id", "total_reward", "policy_entropy_mean", "td_error_mean", "grad_norm_mean"]


@dataclass
class EpisodeResult:
    stats: EpisodeStats
    log: EpisodeLog
    agent_rows: list[list]
    replay: ReplayRecorder | None = None


@dataclass
class RunLog:
    stats: list[EpisodeStats] = field(default_factory=list)
    mean_obs: list[np.ndarray] = field(default_factory=list)
    agent_rows: list[list] = field(default_factory=list)


class Trainer:
    """Owns the agents' networks and every random stream of one training run.

    Streams derive from ``cfg.seed``: ``placement``, ``order`` (action
    resolution), ``ca``, ``sampler``/a and ``learner``/a for every agent a.
    """

    def __init__(self, env_params: EnvParams, cfg: TrainerConfig, arch: Architecture | None = None,
                 net: PolicyNet | None = None, learn: bool = True, greedy: bool = False):
        self.env_params = env_params
        self.cfg = cfg
        self.arch = arch or Architecture(window=env_params.obs_window)
        if self.arch.window != env_params.obs_window or self.arch.actions != envmod.N_ACTIONS:
            raise ConfigError("architecture does not match the environment's observation window / actions")
        n = env_params.agents
        seed = cfg.seed
        self.placement_rng = substream(seed, "placement")
        self.order_rng = substream(seed, "order")
        self.ca_rng = substream(seed, "ca")
        self.sampler_rngs = [substream(seed, "sampler", a) for a in range(n)]
        if net is None:
            net = PolicyNet.initialize(self.arch, [substream(seed, "learner", a) for a in range(n)])
        elif net.population != n or net.arch != self.arch:
            raise CheckpointError("network population or architecture does not match the environment")
        self.net = net
        self.learn = learn
        self.greedy = greedy
        self.episode = 0

    def rng_states(self) -> dict:
        return {
            "placement": self.placement_rng.bit_generator.state,
            "order": self.order_rng.bit_generator.state,
            "ca": self.ca_rng.bit_generator.state,
            "sampler": [r.bit_generator.state for r in self.sampler_rngs],
        }

    def _act(self, probs: np.ndarray) -> np.ndarray:
        if self.greedy:
            return probs.argmax(axis=1)
        return sample_actions(probs, self.sampler_rngs)

    def run_episode(self, record_replay: bool = False) -> EpisodeResult:
        params, cfg, net = self.env_params, self.cfg, self.net
        T, n = params.episode_steps, params.agents
        e = self.episode
        state = envmod.reset(params, self.placement_rng, e)
        log = EpisodeLog.allocate(e, T, n)
        acc = MeanObsAccumulator(T, params.obs_window)
        replay = ReplayRecorder(state) if record_replay else None
        entropy_sum = np.zeros(n)
        td_sum = np.zeros(n)
        norm_sum = np.zeros(n)

        obs = envmod.observe_all(state)
        cache = forward_batch(net, obs)
        for t in range(T):
            acc.add(t, obs)
            actions = self._act(cache.probs)
            entropy_sum += -(cache.probs * cache.log_probs).sum(axis=1)
            state, rewards, _ = envmod.apply_actions(state, actions, self.order_rng, self.ca_rng)
            log.record(t, actions, rewards, state.lattice)
            if replay is not None:
                replay(obs, actions, rewards, state)
            terminal = t == T - 1
            next_obs = obs if terminal else envmod.observe_all(state)
            if self.learn:
                next_value = np.zeros(n) if terminal else forward_batch(net, next_obs).value
                exp = Experience(obs, actions, rewards, next_obs, np.full(n, terminal))
                try:
                    _, diag = update(net, exp, cfg, cache, next_value)
                except NumericalFailure as exc:
                    exc.context.update(episode=e, step=t, agents=np.flatnonzero(
                        ~np.isfinite(exc.diagnostics.get("loss", np.zeros(n)))).tolist())
                    raise
                td_sum += diag["td_error"]
                norm_sum += diag["grad_norm"]
            if not terminal:
                obs = next_obs
                cache = forward_batch(net, obs)

        log.mean_obs = acc.result()
        stats = episode_stats(log)
        totals = log.totals
        rows = [[e, a, repr(float(totals[a])), repr(float(entropy_sum[a] / T)), repr(float(td_sum[a] / T)),
                 repr(float(norm_sum[a] / T))] for a in range(n)]
        self.episode += 1
        return EpisodeResult(stats, log, rows, replay)


def train(
    env_params: EnvParams,
    cfg: TrainerConfig,
    episodes: int,
    arch: Architecture | None = None,
    logger: Callable[[EpisodeResult, Trainer], None] | None = None,
) -> tuple[PolicyNet, RunLog]:
    """Train ``env_params.agents`` independent learners for ``episodes`` episodes."""
    if episodes < 1:
        raise ContractViolation("episodes must be >= 1")
    trainer = Trainer(env_params, cfg, arch)
    run = RunLog()
    for _ in range(episodes):
        result = trainer.run_episode()
        run.stats.append(result.stats)
        run.mean_obs.append(result.log.mean_obs)
        run.agent_rows.extend(result.agent_rows)
        if logger is not None:
            logger(result, trainer)
    return trainer.net, run


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CKPT_MAGIC = b"FFACKPT\x00"
CKPT_VERSION = 1
_CKPT_PREFIX = struct.Struct("<8sIQ")


@dataclass
class Checkpoint:
    arch: Architecture
    net: PolicyNet
    trainer: dict
    rng_states: dict
    meta: dict


def save_checkpoint(path: Path, net: PolicyNet, cfg: TrainerConfig | dict, rng_states: dict | None = None,
                    meta: dict | None = None) -> None:
    payload = b"".join(np.ascontiguousarray(net.params[n], dtype="<f8").tobytes() for n in PARAM_NAMES)
    header = {
        "architecture": net.arch.descriptor(),
        "population": net.population,
        "arrays": [[n, list(net.params[n].shape)] for n in PARAM_NAMES],
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
        "trainer": asdict(cfg) if isinstance(cfg, TrainerConfig) else dict(cfg),
        "rng_states": rng_states or {},
        "meta": meta or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_CKPT_PREFIX.pack(CKPT_MAGIC, CKPT_VERSION, len(blob)))
        fh.write(blob)
        fh.write(payload)


def load_checkpoint(path: Path, expected: Architecture | None = None) -> Checkpoint:
    data = Path(path).read_bytes()
    if len(data) < _CKPT_PREFIX.size:
        raise CheckpointError(f"{path}: file too short to be a checkpoint")
    magic, version, hlen = _CKPT_PREFIX.unpack_from(data)
    if magic != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version} (expected {CKPT_VERSION})")
    try:
        header = json.loads(data[_CKPT_PREFIX.size:_CKPT_PREFIX.size + hlen])
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupted checkpoint header (version {version})") from exc
    payload = data[_CKPT_PREFIX.size + hlen:]
    if hashlib.sha256(payload).hexdigest() != header.get("payload_sha256"):
        raise CheckpointError(f"{path}: corrupted checkpoint payload (version {version}, digest mismatch)")
    desc = dict(header["architecture"])
    if desc.pop("kind", None) != "conv2-dense-actor-critic":
        raise CheckpointError(f"{path}: unknown architecture kind")
    arch = Architecture(**desc)
    if expected is not None and arch != expected:
        raise CheckpointError(f"{path}: checkpoint architecture {arch} is incompatible with {expected}")
    params, offset = {}, 0
    pop = header["population"]
    for name, shape in header["arrays"]:
        count = int(np.prod(shape))
        params[name] = np.frombuffer(payload, dtype="<f8", count=count, offset=offset * 8).reshape(shape).astype(np.dtype(desc["dtype"]))
        offset += count
    net = PolicyNet(arch, params)
    if net.population != pop or set(params) != set(PARAM_NAMES):
        raise CheckpointError(f"{path}: inconsistent parameter arrays")
    for name, shape in arch.shapes().items():
        if params[name].shape != (pop,) + shape:
            raise CheckpointError(f"{path}: array {name} has shape {params[name].shape}, expected {(pop,) + shape}")
    return Checkpoint(arch, net, header["trainer"], header["rng_states"], header["meta"])
