"""PPO training loop for the hybrid spiking policy.

Rollouts step one environment with the stochastic squashed-Gaussian head,
auto-resetting episodes and bootstrapping the value of a truncated tail.
Advantages are exponentially weighted temporal differences (GAE),
normalized per update; updates run several epochs of shuffled minibatches
through the clipped surrogate objective with a mean-squared value loss,
global gradient-norm clipping, and a hand-rolled Adam step. Observation
snapshots keep their per-step column count, so minibatches are grouped by
matrix width before the batched network pass.

``train`` wires everything together from a run configuration (JSON or
dataclass), logs one CSV row per update, and writes versioned policy
checkpoints.
"""

from __future__ import annotations

import csv
import json
import math
import os
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import diffcore as dc
from . import policynet as pn
from .crowdenv import Action, CrowdEnv, RewardConfig, ScenarioConfig, stock_scenario
from .diffcore import ContractError, Tensor
from .policynet import ActionBounds, PolicyParams, build_observation_matrix


@dataclass(frozen=True)
class PpoConfig:
    learning_rate: float
    n_steps: int  # environment steps collected per update
    clip_range: float = 0.1
    n_epochs: int = 4
    batch_size: int = 256
    gamma: float = 0.99
    gae_lambda: float = 0.95
    entropy_coef: float = 0.0
    value_coef: float = 0.5
    max_grad_norm: float = 0.5

    def __post_init__(self):
        if not (0.0 < self.gamma < 1.0):
            raise ContractError("gamma must lie in (0, 1)")
        if self.clip_range <= 0.0:
            raise ContractError("clip_range must be positive")

    @classmethod
    def for_neuron_kind(cls, kind: str, **overrides) -> "PpoConfig":
        base = {"sd": dict(learning_rate=2e-4, n_steps=256), "cuba": dict(learning_rate=9e-5, n_steps=128)}[kind]
        base.update(overrides)
        return cls(**base)


class RolloutBuffer:
    """Fixed-capacity on-policy store; exactly ``capacity`` records are
    required before advantage estimation.

    Records are laid out as consecutive per-worker segments; ``segments``
    holds (start, end, bootstrap_value) triples so advantage estimation
    never leaks across workers.
    """

    def __init__(self, capacity: int):
        self.capacity = capacity
        self.matrices: list[np.ndarray] = []
        self.u: list[np.ndarray] = []  # pre-squash samples
        self.log_probs: list[float] = []
        self.rewards: list[float] = []
        self.values: list[float] = []
        self.dones: list[bool] = []
        self.halves: list[np.ndarray] = []  # per-sample action half-ranges
        self.segments: list[tuple[int, int, float]] = []

    def add(self, matrix, u, log_prob, reward, value, done, halves):
        self.matrices.append(matrix)
        self.u.append(u)
        self.log_probs.append(log_prob)
        self.rewards.append(reward)
        self.values.append(value)
        self.dones.append(done)
        self.halves.append(halves)

    def close_segment(self, bootstrap_value: float):
        start = self.segments[-1][1] if self.segments else 0
        self.segments.append((start, len(self), bootstrap_value))

    @property
    def bootstrap_value(self) -> float:
        return self.segments[-1][2] if self.segments else 0.0

    @bootstrap_value.setter
    def bootstrap_value(self, value: float):
        if self.segments:
            start, end, _ = self.segments[-1]
            self.segments[-1] = (start, end, value)
        else:
            self.segments.append((0, len(self), value))

    def __len__(self):
        return len(self.matrices)

    def is_full(self):
        return len(self) >= self.capacity


@dataclass
class RolloutWorker:
    """One environment plus its episode bookkeeping between rollouts."""

    env: CrowdEnv
    seed_rng: np.random.Generator
    obs_matrix: np.ndarray | None = None
    bounds: ActionBounds | None = None
    ep_return: float = 0.0
    ep_len: int = 0
    finished: list = field(default_factory=list)  # (return, length, outcome)

    def start_episode(self):
        seed = int(self.seed_rng.integers(0, 2**31 - 1))
        _, (robot_obs, humans) = self.env.reset(seed=seed)
        self.obs_matrix = build_observation_matrix(robot_obs, humans).data.data
        self.bounds = ActionBounds(*self.env.action_bounds())
        self.ep_return = 0.0
        self.ep_len = 0

    def step(self, action: Action):
        res = self.env.step(action)
        self.ep_return += res.reward
        self.ep_len += 1
        done = res.outcome != "running"
        if done:
            self.finished.append((self.ep_return, self.ep_len, res.outcome))
            self.start_episode()
        else:
            robot_obs, humans = res.observation
            self.obs_matrix = build_observation_matrix(robot_obs, humans).data.data
        return res.reward, done

    def drain_finished(self):
        out, self.finished = self.finished, []
        return out


def _worker_segment(worker: RolloutWorker, params: PolicyParams, n_steps: int,
                    rng: np.random.Generator, buffer: RolloutBuffer):
    for _ in range(n_steps):
        matrix = worker.obs_matrix
        bounds = worker.bounds
        out = pn.policy_value_forward(pn.ObservationMatrix(Tensor(matrix)), params)
        mean = out.mean_pre_squash.data[0]
        action_arr, log_prob, u = pn.sample_action(mean, params.log_std.data, bounds, rng)
        reward, done = worker.step(Action(float(action_arr[0]), float(action_arr[1])))
        buffer.add(matrix, u, log_prob, reward, float(out.value.data[0, 0]), done, bounds.halves())
    if buffer.dones[-1]:
        buffer.close_segment(0.0)
    else:
        out = pn.policy_value_forward(pn.ObservationMatrix(Tensor(worker.obs_matrix)), params)
        buffer.close_segment(float(out.value.data[0, 0]))


def collect_rollout(workers, params: PolicyParams, n_steps: int,
                    rng: np.random.Generator) -> RolloutBuffer:
    """Advance the worker(s) for ``n_steps`` environment steps in total,
    sampling from the current policy.

    With several workers the steps are split evenly; matching observation
    widths across workers are batched into one network pass per tick, and
    each worker's segment gets its own bootstrap value.
    """
    if isinstance(workers, RolloutWorker):
        workers = [workers]
    n_workers = len(workers)
    if n_steps % n_workers != 0:
        raise ContractError(f"{n_steps} steps do not split over {n_workers} workers")
    per_worker = n_steps // n_workers
    for worker in workers:
        if worker.obs_matrix is None:
            worker.start_episode()
    buffer = RolloutBuffer(n_steps)

    with dc.no_grad():
        if n_workers == 1 or len({w.obs_matrix.shape for w in workers}) != 1:
            for worker in workers:
                _worker_segment(worker, params, per_worker, rng, buffer)
            return buffer

        # same-width observations: one batched pass per tick for all workers
        records = [[] for _ in workers]
        for _ in range(per_worker):
            matrices = [w.obs_matrix for w in workers]
            mean_b, value_b = pn.forward_batch(matrices, params)
            for i, worker in enumerate(workers):
                bounds = worker.bounds
                action_arr, log_prob, u = pn.sample_action(
                    mean_b.data[i], params.log_std.data, bounds, rng
                )
                reward, done = worker.step(Action(float(action_arr[0]), float(action_arr[1])))
                records[i].append(
                    (matrices[i], u, log_prob, reward, float(value_b.data[i, 0]), done, bounds.halves())
                )
        tails = pn.forward_batch([w.obs_matrix for w in workers], params)[1]
        for i, worker in enumerate(workers):
            for rec in records[i]:
                buffer.add(*rec)
            buffer.close_segment(0.0 if records[i][-1][5] else float(tails.data[i, 0]))
    return buffer


def compute_gae(buffer: RolloutBuffer, gamma: float, lam: float):
    """GAE advantages (normalized to zero mean, unit std) and returns.

    The recursion runs independently per worker segment, each with its own
    tail bootstrap; normalization spans the whole buffer.
    """
    n = len(buffer)
    if n != buffer.capacity:
        raise ContractError("buffer must be full before advantage estimation")
    rewards = np.asarray(buffer.rewards)
    values = np.asarray(buffer.values)
    dones = np.asarray(buffer.dones, dtype=float)
    segments = buffer.segments or [(0, n, 0.0)]
    advantages = np.zeros(n)
    for start, end, bootstrap in segments:
        next_adv = 0.0
        next_value = bootstrap
        for t in range(end - 1, start - 1, -1):
            not_done = 1.0 - dones[t]
            delta = rewards[t] + gamma * next_value * not_done - values[t]
            next_adv = delta + gamma * lam * not_done * next_adv
            advantages[t] = next_adv
            next_value = values[t]
    returns = advantages + values
    normalized = (advantages - advantages.mean()) / (advantages.std() + 1e-8)
    return normalized, returns


class Adam:
    """Bias-corrected adaptive moments, one slot pair per parameter."""

    def __init__(self, params, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * (g * g)
            p.data -= self.lr * (self.m[i] / bc1) / (np.sqrt(self.v[i] / bc2) + self.eps)

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()


def clip_grad_norm(params, max_norm: float) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.sum(p.grad * p.grad))
    norm = math.sqrt(total)
    if norm > max_norm and norm > 0.0:
        scale = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad *= scale
    return norm


def _group_by_width(indices, matrices):
    groups: dict[int, list[int]] = {}
    for i in indices:
        groups.setdefault(matrices[i].shape[1], []).append(i)
    return groups


def ppo_update(buffer: RolloutBuffer, params: PolicyParams, cfg: PpoConfig,
               optimizer: Adam, rng: np.random.Generator,
               advantages: np.ndarray | None = None,
               returns: np.ndarray | None = None) -> dict:
    """Clipped-objective epochs over shuffled, width-grouped minibatches.

    Returns loss statistics; a non-finite loss aborts the update (no step
    is applied for that minibatch or any later one) and flags the stats.
    """
    if advantages is None or returns is None:
        advantages, returns = compute_gae(buffer, cfg.gamma, cfg.gae_lambda)
    n = len(buffer)
    minibatch = min(cfg.batch_size, n)
    lp_old = np.asarray(buffer.log_probs)

    stats = {"policy_loss": 0.0, "value_loss": 0.0, "entropy": 0.0, "grad_norm": 0.0,
             "n_minibatches": 0, "aborted": False, "clip_fraction": 0.0}

    for _ in range(cfg.n_epochs):
        order = rng.permutation(n)
        for start in range(0, n, minibatch):
            chunk = order[start : start + minibatch]
            if len(chunk) == 0:
                continue
            policy_sum = None
            value_sum = None
            clip_hits = 0
            for width_idx in _group_by_width(chunk, buffer.matrices).values():
                mats = [buffer.matrices[i] for i in width_idx]
                u = np.stack([buffer.u[i] for i in width_idx])
                halves = np.stack([buffer.halves[i] for i in width_idx])
                adv = Tensor(advantages[width_idx])
                ret = Tensor(returns[width_idx])
                old = Tensor(lp_old[width_idx])

                mean_pre, value = pn.forward_batch(mats, params)
                lp_new = pn.log_prob_graph(u, mean_pre, params.log_std, halves)
                ratio = dc.exp(dc.sub(lp_new, old))
                clipped = dc.clip(ratio, 1.0 - cfg.clip_range, 1.0 + cfg.clip_range)
                surrogate = dc.minimum(dc.mul(ratio, adv), dc.mul(clipped, adv))
                p_term = dc.neg(dc.tsum(surrogate))
                policy_sum = p_term if policy_sum is None else dc.add(policy_sum, p_term)

                err = dc.sub(dc.reshape(value, (len(width_idx),)), ret)
                v_term = dc.tsum(dc.mul(err, err))
                value_sum = v_term if value_sum is None else dc.add(value_sum, v_term)
                clip_hits += int(np.sum(np.abs(ratio.data - 1.0) > cfg.clip_range))

            inv_b = 1.0 / len(chunk)
            loss = dc.add(dc.mul(policy_sum, inv_b), dc.mul(value_sum, cfg.value_coef * inv_b))
            entropy = pn.entropy_graph(params.log_std)
            if cfg.entropy_coef != 0.0:
                loss = dc.sub(loss, dc.mul(entropy, cfg.entropy_coef))

            if not np.isfinite(loss.data):
                stats["aborted"] = True
                stats["diagnostics"] = {
                    "policy_sum": float(policy_sum.data),
                    "value_sum": float(value_sum.data),
                    "minibatch": stats["n_minibatches"],
                }
                return stats

            optimizer.zero_grad()
            loss.backward()
            stats["grad_norm"] = clip_grad_norm(params.parameters(), cfg.max_grad_norm)
            optimizer.step()

            stats["policy_loss"] = float(policy_sum.data) / len(chunk)
            stats["value_loss"] = float(value_sum.data) / len(chunk)
            stats["entropy"] = float(entropy.data)
            stats["clip_fraction"] = clip_hits / len(chunk)
            stats["n_minibatches"] += 1
    return stats


# -- full training runs ---------------------------------------------------------


@dataclass(frozen=True)
class RunConfig:
    seed: int
    neuron_kind: str
    total_steps: int
    scenario: ScenarioConfig
    ppo: PpoConfig
    dt: float = 0.25
    max_steps: int = 200
    history_k: int = 2
    n_envs: int = 8  # parallel rollout workers; ppo.n_steps splits across them
    out_dir: str = "runs/default"
    checkpoint_every: int = 0  # updates between periodic checkpoints; 0 = final only
    reward: RewardConfig = field(default_factory=RewardConfig)


def load_run_config(path) -> RunConfig:
    """Run description from JSON: seed, neuron_kind, total_steps, scenario
    (kind/n_agents/...), optional env (dt, max_steps, k), optional ppo
    overrides, out_dir, checkpoint_every."""
    with open(path) as fh:
        raw = json.load(fh)
    scen = raw["scenario"]
    scenario = stock_scenario(scen["kind"], scen.get("n_agents"), **{
        key: tuple(value) if key in ("speed_range", "prox_range") else value
        for key, value in scen.items() if key not in ("kind", "n_agents")
    })
    env = raw.get("env", {})
    ppo = PpoConfig.for_neuron_kind(raw["neuron_kind"], **raw.get("ppo", {}))
    return RunConfig(
        seed=raw["seed"],
        neuron_kind=raw["neuron_kind"],
        total_steps=raw["total_steps"],
        scenario=scenario,
        ppo=ppo,
        dt=env.get("dt", 0.25),
        max_steps=env.get("max_steps", 200),
        history_k=env.get("k", 2),
        n_envs=raw.get("n_envs", 8),
        out_dir=raw.get("out_dir", "runs/default"),
        checkpoint_every=raw.get("checkpoint_every", 0),
    )


@dataclass
class TrainResult:
    params: PolicyParams
    checkpoint_path: str
    log_path: str
    curve: list[dict]


LOG_COLUMNS = (
    "update", "env_steps", "episodes", "mean_episode_return", "mean_episode_len",
    "goal_rate", "policy_loss", "value_loss", "entropy", "grad_norm", "seconds",
)


def train(run: RunConfig, quiet: bool = True) -> TrainResult:
    """Alternate rollout collection and PPO updates until the step budget.

    Fully seeded: policy init, action sampling, episode seeds, and
    minibatch shuffling all derive from ``run.seed``. One CSV row is
    appended per update; checkpoints land in ``run.out_dir``.
    """
    os.makedirs(run.out_dir, exist_ok=True)
    seq = np.random.SeedSequence(run.seed)
    init_seq, sample_seq, episode_seq, shuffle_seq = seq.spawn(4)

    workers = []
    for worker_seq in episode_seq.spawn(run.n_envs):
        env = CrowdEnv(run.scenario, reward=run.reward, dt=run.dt,
                       max_steps=run.max_steps, k=run.history_k)
        workers.append(RolloutWorker(env, np.random.default_rng(worker_seq)))
    params = PolicyParams.init(workers[0].env.obs_dim, run.neuron_kind,
                               np.random.default_rng(init_seq), history_k=run.history_k)
    optimizer = Adam(params.parameters(), lr=run.ppo.learning_rate)
    sample_rng = np.random.default_rng(sample_seq)
    shuffle_rng = np.random.default_rng(shuffle_seq)

    log_path = os.path.join(run.out_dir, "training_log.csv")
    ckpt_path = os.path.join(run.out_dir, "checkpoint_final.ckpt")
    curve: list[dict] = []
    steps_per_update = run.ppo.n_steps * run.n_envs  # rollout steps are per worker
    n_updates = max(1, math.ceil(run.total_steps / steps_per_update))

    with open(log_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
        writer.writeheader()
        for update in range(1, n_updates + 1):
            started = time.perf_counter()
            buffer = collect_rollout(workers, params, run.ppo.n_steps * len(workers), sample_rng)
            stats = ppo_update(buffer, params, run.ppo, optimizer, shuffle_rng)
            finished = [ep for worker in workers for ep in worker.drain_finished()]
            goals = sum(1 for _, _, outcome in finished if outcome == "goal")
            row = {
                "update": update,
                "env_steps": update * steps_per_update,
                "episodes": len(finished),
                "mean_episode_return": float(np.mean([r for r, _, _ in finished])) if finished else math.nan,
                "mean_episode_len": float(np.mean([l for _, l, _ in finished])) if finished else math.nan,
                "goal_rate": goals / len(finished) if finished else math.nan,
                "policy_loss": stats["policy_loss"],
                "value_loss": stats["value_loss"],
                "entropy": stats["entropy"],
                "grad_norm": stats["grad_norm"],
                "seconds": time.perf_counter() - started,
            }
            writer.writerow(row)
            fh.flush()
            curve.append(row)
            if stats["aborted"]:
                if not quiet:
                    print(f"update {update}: non-finite loss, update aborted: {stats['diagnostics']}")
            if run.checkpoint_every and update % run.checkpoint_every == 0:
                pn.save_checkpoint(os.path.join(run.out_dir, f"checkpoint_{update:06d}.ckpt"), params)
            if not quiet and (update % 25 == 0 or update == n_updates):
                print(
                    f"update {update}/{n_updates} return={row['mean_episode_return']:.2f} "
                    f"goal={row['goal_rate']:.2f} vloss={row['value_loss']:.3f}"
                )
    pn.save_checkpoint(ckpt_path, params)
    return TrainResult(params, ckpt_path, log_path, curve)
