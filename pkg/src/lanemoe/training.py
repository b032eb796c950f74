"""PPO training of the lane experts and the lane-selection gate.

Experts are trained first, one per lane, with every agent's reference path
pinned to the expert's lane. The gate is trained afterwards on top of the
frozen (greedy) experts. Both levels use clipped PPO with GAE and a linear
learning-rate decay.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .geometry import MapGraph, map_to_dict, reference_path_for
from .neural import AdamState, NonFiniteError, adam_step, save_checkpoint
from .observation import observe_high, observe_low, schema_hash
from .policy import GREEDY, LOG_STD_MAX, LOG_STD_MIN, SAMPLE, ExpertPool, HighLevelPolicy, LowLevelExpert, log_softmax, squash_log_std
from .reward import HLRewardConfig, LLRewardConfig, reward_high, reward_low
from .sim import ControlAction, SimConfig, detect_collisions, move, respawn_collided, spawn, with_targets

log = logging.getLogger(__name__)


class TrainingAborted(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    n_iters: int = 200
    frames_per_batch: int = 4096
    num_epochs: int = 70
    minibatch_size: int = 512
    lr: float = 1e-4
    lr_min: float = 1e-5
    max_grad_norm: float = 1.0
    clip_epsilon: float = 0.1
    gamma: float = 0.99
    lmbda: float = 0.9
    entropy_epsilon: float = 0.1
    max_steps: int = 512
    value_coeff: float = 0.5
    hidden: tuple[int, ...] = (64, 64)
    init_log_std: float = -1.0
    ref_spacing: float = 0.2
    expert_n_slow: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.minibatch_size > self.frames_per_batch:
            raise ValueError("minibatch_size must not exceed frames_per_batch")
        if not 0 <= self.gamma < 1:
            raise ValueError("gamma must be in [0, 1)")
        if not 0 <= self.lmbda <= 1:
            raise ValueError("lambda must be in [0, 1]")
        if not self.lr >= self.lr_min > 0:
            raise ValueError("need lr >= lr_min > 0")
        if self.n_iters < 1 or self.num_epochs < 1 or self.max_steps < 1:
            raise ValueError("n_iters, num_epochs and max_steps must be positive")


@dataclass(frozen=True)
class CurriculumSpec:
    phase: str  # "expert" or "gate"
    lane: int | None = None
    frozen: tuple[str, ...] = ()

    @classmethod
    def expert(cls, lane: int, n_lanes: int) -> "CurriculumSpec":
        others = tuple(f"expert-{k}" for k in range(n_lanes) if k != lane)
        return cls("expert", lane, ("gate",) + others)

    @classmethod
    def gate(cls, n_lanes: int) -> "CurriculumSpec":
        return cls("gate", None, tuple(f"expert-{k}" for k in range(n_lanes)))

    @property
    def name(self) -> str:
        return f"expert-{self.lane}" if self.phase == "expert" else "gate"


@dataclass(frozen=True)
class EnvSpec:
    map: MapGraph
    sim: SimConfig
    hl_reward: HLRewardConfig = field(default_factory=HLRewardConfig)
    ll_reward: LLRewardConfig = field(default_factory=LLRewardConfig)
    ref_spacing: float = 0.2


# -- buffer & GAE ---------------------------------------------------------------


def compute_gae(
    rewards: Sequence[float],
    values: Sequence[float],
    dones: Sequence[bool],
    gamma: float,
    lmbda: float,
    bootstrap_value: float = 0.0,
    normalize: bool = False,
) -> tuple[np.ndarray, np.ndarray]:
    """Generalized advantage estimates for one time-ordered sequence.

    ``bootstrap_value`` is the critic value after the last frame; it is
    ignored when that frame is terminal. Returns ``(advantages, returns)``
    with ``returns = advantages + values`` computed before normalization.
    """
    r = np.asarray(rewards, dtype=float)
    v = np.asarray(values, dtype=float)
    d = np.asarray(dones, dtype=float)
    if not len(r) == len(v) == len(d):
        raise ValueError(f"length mismatch: {len(r)} rewards, {len(v)} values, {len(d)} dones")
    adv = np.zeros_like(r)
    last = 0.0
    for t in range(len(r) - 1, -1, -1):
        next_v = bootstrap_value if t == len(r) - 1 else v[t + 1]
        live = 1.0 - d[t]
        delta = r[t] + gamma * next_v * live - v[t]
        last = delta + gamma * lmbda * live * last
        adv[t] = last
    ret = adv + v
    if normalize and len(adv) > 1:
        adv = (adv - adv.mean()) / (adv.std() + 1e-8)
    return adv, ret


class RolloutBuffer:
    """Per-frame records of one training batch, in collection order."""

    def __init__(self):
        self.obs: list[np.ndarray] = []
        self.actions: list = []
        self.log_probs: list[float] = []
        self.values: list[float] = []
        self.rewards: list[float] = []
        self.dones: list[bool] = []
        self.agent_ids: list[int] = []
        self.episode_ids: list[int] = []
        self.targets: list[int] = []
        self.next_values: dict[int, float] = {}  # frame index -> bootstrap value
        self.advantages: np.ndarray | None = None
        self.returns: np.ndarray | None = None
        self.episode_returns: list[float] = []

    def __len__(self) -> int:
        return len(self.rewards)

    def add(self, obs, action, log_prob, value, reward, done, agent_id, episode_id, target=-1) -> int:
        self.obs.append(np.asarray(obs, dtype=float))
        self.actions.append(action)
        self.log_probs.append(float(log_prob))
        self.values.append(float(value))
        self.rewards.append(float(reward))
        self.dones.append(bool(done))
        self.agent_ids.append(int(agent_id))
        self.episode_ids.append(int(episode_id))
        self.targets.append(int(target))
        return len(self.rewards) - 1

    def groups(self) -> dict[tuple[int, int], list[int]]:
        out: dict[tuple[int, int], list[int]] = {}
        for i, key in enumerate(zip(self.episode_ids, self.agent_ids)):
            out.setdefault(key, []).append(i)
        return out

    def finalize(self, gamma: float, lmbda: float) -> None:
        """Compute advantages (normalized over the batch) and returns."""
        adv = np.zeros(len(self))
        ret = np.zeros(len(self))
        rewards, values, dones = np.array(self.rewards), np.array(self.values), np.array(self.dones)
        for idx in self.groups().values():
            a, r = compute_gae(rewards[idx], values[idx], dones[idx], gamma, lmbda, self.next_values.get(idx[-1], 0.0))
            adv[idx], ret[idx] = a, r
        self.returns = ret
        self.advantages = (adv - adv.mean()) / (adv.std() + 1e-8) if len(adv) > 1 else adv

    def arrays(self) -> dict[str, np.ndarray]:
        return {
            "obs": np.array(self.obs),
            "actions": np.array(self.actions),
            "log_probs": np.array(self.log_probs),
            "advantages": self.advantages,
            "returns": self.returns,
        }

    def mean_episode_reward(self) -> float:
        """Mean summed reward per (episode, agent) sequence of this batch."""
        rewards = np.array(self.rewards)
        sums = [rewards[idx].sum() for idx in self.groups().values()]
        return float(np.mean(sums)) if sums else 0.0


# -- rollouts -------------------------------------------------------------------


def _pinned(world, lane):
    return with_targets(world, [lane] * world.n_agents)


def _expert_episode(env: EnvSpec, expert: LowLevelExpert, steps: int, seed: int, rng, buf: RolloutBuffer, ep: int):
    lane = expert.target_lane
    sim = replace(env.sim, seed=seed)
    world = _pinned(spawn(env.map, sim), lane)
    n = world.n_agents
    rest = ControlAction(0.5 * (sim.v_min + sim.v_max), 0.0)
    prev = [rest] * n
    last_frames = [None] * n

    def observe(w):
        refs = [reference_path_for(env.map, w.vehicles[i].position, lane, 6, env.ref_spacing) for i in range(n)]
        obs = np.array([observe_low(w, i, env.map, refs[i], sim, env.ref_spacing) for i in range(n)])
        return refs, obs

    refs, obs = observe(world)
    for _ in range(steps):
        u, a, lp, v = expert.act(obs, SAMPLE, rng)
        acts = [ControlAction(float(a[i, 0]), float(a[i, 1])) for i in range(n)]
        mid = detect_collisions(move(world, acts, env.map, sim), env.map)
        done = mid.collision_flags.any(axis=1)
        for i in range(n):
            r = reward_low(world, mid, i, prev[i], acts[i], refs[i], env.ll_reward, env.map, sim)
            last_frames[i] = buf.add(obs[i], u[i], lp[i], v[i], r, done[i], i, ep, refs[i].target_lane)
            prev[i] = rest if done[i] else acts[i]
        world = _pinned(respawn_collided(mid, env.map, sim), lane)
        refs, obs = observe(world)
    boot = expert.value(obs)
    for i in range(n):
        buf.next_values[last_frames[i]] = float(boot[i])


def _gate_episode(env: EnvSpec, hl: HighLevelPolicy, pool: ExpertPool, steps, seed, rng, buf, ep):
    sim = replace(env.sim, seed=seed)
    world = spawn(env.map, sim)
    n = world.n_agents
    last_frames = [None] * n
    obs = np.array([observe_high(world, i, env.map, sim) for i in range(n)])
    for _ in range(steps):
        dec, lp, v = hl.act(obs, SAMPLE, rng)
        prev_dec = world.targets[:n]
        world = with_targets(world, [int(d) for d in dec])
        refs = [
            reference_path_for(env.map, world.vehicles[i].position, int(dec[i]), 6, env.ref_spacing)
            for i in range(n)
        ]
        ll_obs = np.array([observe_low(world, i, env.map, refs[i], sim, env.ref_spacing) for i in range(n)])
        _, a, _, _ = pool.act(dec, ll_obs, GREEDY, rng)
        acts = [ControlAction(float(a[i, 0]), float(a[i, 1])) for i in range(n)]
        mid = detect_collisions(move(world, acts, env.map, sim), env.map)
        done = mid.collision_flags.any(axis=1)
        for i in range(n):
            r = reward_high(world, mid, i, prev_dec[i], int(dec[i]), env.hl_reward, env.map)
            last_frames[i] = buf.add(obs[i], int(dec[i]), lp[i], v[i], r, done[i], i, ep, int(dec[i]))
        world = respawn_collided(mid, env.map, sim)
        obs = np.array([observe_high(world, i, env.map, sim) for i in range(n)])
    boot = hl.value(obs)
    for i in range(n):
        buf.next_values[last_frames[i]] = float(boot[i])


def collect_rollouts(
    env: EnvSpec,
    policies: dict,
    config: TrainConfig,
    phase: CurriculumSpec,
    rng: np.random.Generator,
) -> RolloutBuffer:
    """Run seeded episodes until ``frames_per_batch`` agent-frames are stored.

    ``policies`` holds ``"experts"`` (an :class:`ExpertPool` or list) and, for
    the gate phase, ``"gate"``. Episodes last ``max_steps`` steps; the last one
    is shortened so the batch is filled exactly.
    """
    n = env.sim.n_agents
    if n < 1:
        raise ValueError("training needs at least one ego agent")
    buf = RolloutBuffer()
    ep = 0
    while len(buf) < config.frames_per_batch:
        remaining = config.frames_per_batch - len(buf)
        steps = min(config.max_steps, math.ceil(remaining / n))
        seed = int(rng.integers(2**31 - 1))
        if phase.phase == "expert":
            expert = policies["experts"][phase.lane]
            _expert_episode(env, expert, steps, seed, rng, buf, ep)
        else:
            _gate_episode(env, policies["gate"], policies["experts"], steps, seed, rng, buf, ep)
        ep += 1
    _trim(buf, config.frames_per_batch)
    return buf


def _trim(buf: RolloutBuffer, size: int) -> None:
    if len(buf) <= size:
        return
    for i in range(size, len(buf)):
        key = (buf.episode_ids[i], buf.agent_ids[i])
        j = i - 1
        while j >= 0 and (buf.episode_ids[j], buf.agent_ids[j]) != key:
            j -= 1
        if 0 <= j < size:
            buf.next_values[j] = buf.values[i]
    for name in ("obs", "actions", "log_probs", "values", "rewards", "dones", "agent_ids", "episode_ids", "targets"):
        setattr(buf, name, getattr(buf, name)[:size])
    buf.next_values = {k: v for k, v in buf.next_values.items() if k < size}


# -- PPO ------------------------------------------------------------------------


def ppo_loss_and_grads(policy, batch: dict, config: TrainConfig):
    """Clipped PPO loss and its exact gradient w.r.t. actor and critic params.

    Returns ``(loss, grads, stats)`` where ``grads`` follows
    ``policy.actor.params() + policy.critic.params()``.
    """
    obs, act = batch["obs"], batch["actions"]
    old_lp, adv, ret = batch["log_probs"], batch["advantages"], batch["returns"]
    b = len(obs)
    eps, c_v, c_e = config.clip_epsilon, config.value_coeff, config.entropy_epsilon

    out, a_cache = policy.actor.forward(obs)
    if policy.kind == "categorical":
        act = act.astype(int)
        logp_all = log_softmax(out)
        p = np.exp(logp_all)
        new_lp = logp_all[np.arange(b), act]
        entropy = -(p * logp_all).sum(axis=1)
    else:
        k = policy.action_dim
        mean, x = out[:, :k], out[:, k:]
        log_std = squash_log_std(x)
        z = (act - mean) * np.exp(-log_std)
        new_lp = (-0.5 * z * z - log_std - 0.5 * math.log(2 * math.pi)).sum(axis=1) - policy.squash_log_det(act)
        # entropy of the squashed action, reparameterized with fixed noise
        eps_n = batch["noise"]
        std = np.exp(log_std)
        u_re = mean + std * eps_n
        entropy = (0.5 * eps_n * eps_n + log_std + 0.5 * math.log(2 * math.pi)).sum(axis=1)
        entropy = entropy + policy.squash_log_det(u_re)

    log_ratio = new_lp - old_lp
    ratio = np.exp(log_ratio)
    surr1 = ratio * adv
    surr2 = np.clip(ratio, 1.0 - eps, 1.0 + eps) * adv
    policy_loss = -np.minimum(surr1, surr2).mean()
    entropy_mean = entropy.mean()

    # d loss / d new_lp: only the unclipped branch carries gradient
    g_lp = np.where(surr1 <= surr2, -surr1 / b, 0.0)
    if policy.kind == "categorical":
        onehot = np.zeros_like(out)
        onehot[np.arange(b), act] = 1.0
        g_out = g_lp[:, None] * (onehot - p)
        g_out += (c_e / b) * p * (logp_all + entropy[:, None])
    else:
        dlogdet = -2.0 * np.tanh(u_re)  # d log|da/du| / du per dimension
        g_mean = g_lp[:, None] * z / std - (c_e / b) * dlogdet
        g_logstd = g_lp[:, None] * (z * z - 1.0) - (c_e / b) * (1.0 + dlogdet * std * eps_n)
        g_x = g_logstd * 0.5 * (LOG_STD_MAX - LOG_STD_MIN) * (1.0 - np.tanh(x) ** 2)
        g_out = np.concatenate([g_mean, g_x], axis=1)
    actor_grads = policy.actor.backward(a_cache, g_out)

    v, c_cache = policy.critic.forward(obs)
    v = v[:, 0]
    value_loss = ((v - ret) ** 2).mean()
    critic_grads = policy.critic.backward(c_cache, (2.0 * c_v / b * (v - ret))[:, None])

    loss = policy_loss + c_v * value_loss - c_e * entropy_mean
    if not np.isfinite(loss):
        raise NonFiniteError("non-finite PPO loss")
    stats = {
        "loss": float(loss),
        "policy_loss": float(policy_loss),
        "value_loss": float(value_loss),
        "entropy": float(entropy_mean),
        "clip_fraction": float((np.abs(ratio - 1.0) > eps).mean()),
        "approx_kl": float(((ratio - 1.0) - log_ratio).mean()),
    }
    return float(loss), actor_grads + critic_grads, stats



def policy_params(policy) -> list[np.ndarray]:
    return policy.actor.params() + policy.critic.params()


def ppo_update(policy, buffer: RolloutBuffer, config: TrainConfig, optimizer: AdamState, lr: float, rng) -> dict:
    """``num_epochs`` passes of shuffled minibatch PPO updates; mean statistics."""
    if buffer.advantages is None:
        raise ValueError("call buffer.finalize() before ppo_update")
    data = buffer.arrays()
    n = len(buffer)
    params = policy_params(policy)
    totals: dict[str, float] = {}
    count = 0
    for _ in range(config.num_epochs):
        perm = rng.permutation(n)
        for start in range(0, n, config.minibatch_size):
            idx = perm[start : start + config.minibatch_size]
            batch = {k: v[idx] for k, v in data.items()}
            if policy.kind == "gaussian":
                batch["noise"] = rng.standard_normal((len(idx), policy.action_dim))
            _, grads, stats = ppo_loss_and_grads(policy, batch, config)
            stats["grad_norm"] = adam_step(params, grads, optimizer, lr, config.max_grad_norm)
            for k, v in stats.items():
                totals[k] = totals.get(k, 0.0) + v
            count += 1
    return {k: v / count for k, v in totals.items()}


def lr_schedule(iteration: int, config: TrainConfig) -> float:
    """Linear decay from ``lr`` at the first iteration to ``lr_min`` at the last."""
    if config.n_iters == 1:
        return config.lr
    frac = iteration / (config.n_iters - 1)
    return config.lr + (config.lr_min - config.lr) * frac


# -- training loops -------------------------------------------------------------


def params_hash(policy) -> str:
    h = hashlib.sha256()
    for p in policy_params(policy):
        h.update(np.ascontiguousarray(p).tobytes())
    return h.hexdigest()


def train_phase(
    env: EnvSpec,
    policies: dict,
    config: TrainConfig,
    phase: CurriculumSpec,
    out_dir: Path | None = None,
    progress: Callable[[int, float, dict], None] | None = None,
) -> list[dict]:
    """Train the policy of one curriculum phase in place; returns per-iteration records."""
    policy = policies["gate"] if phase.phase == "gate" else policies["experts"][phase.lane]
    optimizer = AdamState(policy_params(policy))
    seed_seq = np.random.SeedSequence([config.seed, 0 if phase.phase == "gate" else 1 + phase.lane])
    rng = np.random.default_rng(seed_seq)
    history = []
    for it in range(config.n_iters):
        t0 = time.perf_counter()
        lr = lr_schedule(it, config)
        buf = collect_rollouts(env, policies, config, phase, rng)
        buf.finalize(config.gamma, config.lmbda)
        try:
            stats = ppo_update(policy, buf, config, optimizer, lr, rng)
        except NonFiniteError as exc:
            if out_dir is not None:
                _save_policy(Path(out_dir) / f"{phase.name}.aborted.json", policy, optimizer, {"iteration": it})
            raise TrainingAborted(f"{phase.name}: non-finite loss at iteration {it}") from exc
        rec = {"iter": it, "episode_reward": buf.mean_episode_reward(), "lr": lr, **stats}
        rec["seconds"] = time.perf_counter() - t0
        history.append(rec)
        log.info("%s iter %d reward %.3f loss %.4f", phase.name, it, rec["episode_reward"], stats["loss"])
        if progress is not None:
            progress(it, rec["episode_reward"], rec)
    if out_dir is not None:
        _save_policy(Path(out_dir) / f"{phase.name}.json", policy, optimizer, {"phase": phase.name})
        write_reward_curve(Path(out_dir) / f"{phase.name}_rewards.csv", history)
    return history


def _save_policy(path: Path, policy, optimizer, meta: dict) -> None:
    meta = dict(meta)
    meta["kind"] = policy.kind
    if policy.kind == "gaussian":
        meta.update(target_lane=policy.target_lane, low=policy.low.tolist(), high=policy.high.tolist())
    else:
        meta["n_lanes"] = policy.n_lanes
    save_checkpoint(path, policy.nets, schema_hash(), optimizer, meta)


def write_reward_curve(path: Path, history: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iter", "episode_reward"])
        for rec in history:
            w.writerow([rec["iter"], f"{rec['episode_reward']:.6f}"])


def build_policies(n_lanes: int, sim: SimConfig, config: TrainConfig) -> dict:
    experts = [
        LowLevelExpert.for_config(
            k, sim, hidden=config.hidden, seed=config.seed * 100 + 1 + k, init_log_std=config.init_log_std
        )
        for k in range(n_lanes)
    ]
    return {
        "gate": HighLevelPolicy(n_lanes, hidden=config.hidden, seed=config.seed * 100),
        "experts": ExpertPool(experts),
    }


def train_experts(env: EnvSpec, policies: dict, config: TrainConfig, out_dir=None, lanes=None, progress=None):
    """Expert phase of the curriculum; experts train without slow vehicles by default."""
    expert_env = replace(env, sim=replace(env.sim, n_slow=config.expert_n_slow))
    histories = {}
    for lane in lanes if lanes is not None else range(env.map.n_lanes):
        phase = CurriculumSpec.expert(lane, env.map.n_lanes)
        histories[phase.name] = train_phase(expert_env, policies, config, phase, out_dir, progress)
    return histories


def train_gate(env: EnvSpec, policies: dict, config: TrainConfig, out_dir=None, progress=None):
    phase = CurriculumSpec.gate(env.map.n_lanes)
    return {phase.name: train_phase(env, policies, config, phase, out_dir, progress)}


def write_manifest(out_dir: Path, env: EnvSpec, config: TrainConfig, extra: dict | None = None) -> Path:
    out_dir = Path(out_dir)
    doc = {
        "format": "lanemoe.manifest/1",
        "schema_hash": schema_hash(),
        "map": map_to_dict(env.map)["geometry"],
        "sim": asdict(env.sim),
        "hl_reward": asdict(env.hl_reward),
        "ll_reward": asdict(env.ll_reward),
        "train": asdict(config),
        "ref_spacing": env.ref_spacing,
        "gate": "gate.json",
        "experts": [f"expert-{k}.json" for k in range(env.map.n_lanes)],
    }
    doc.update(extra or {})
    doc["content_hash"] = hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:16]
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(doc, indent=2))
    return path


def run_curriculum(env: EnvSpec, config: TrainConfig, out_dir, progress=None) -> Path:
    """Train every lane expert, then the gate on the frozen experts; write the manifest."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    policies = build_policies(env.map.n_lanes, env.sim, config)
    train_experts(env, policies, config, out_dir, progress=progress)
    before = [params_hash(e) for e in policies["experts"].experts]
    train_gate(env, policies, config, out_dir, progress=progress)
    after = [params_hash(e) for e in policies["experts"].experts]
    if before != after:
        raise AssertionError("expert parameters changed during gate training")
    return write_manifest(out_dir, env, config, {"expert_hashes": after})
