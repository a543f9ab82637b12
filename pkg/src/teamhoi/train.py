"""PPO trainer: mixed-team-size rollout collection, GAE, advantage
normalization grouped by team size, the clipped surrogate update, and
interleaved discriminator updates, with stage gating and resumable
checkpoints.

Each iteration runs rollout collection, then one discriminator step for both
the full and the masked network, then the PPO epochs, in that order.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import numpy as np
import torch

from . import style
from .env import (ACTION_DIM, CarryEnv, EnvConfig, build_observations,
                  interaction_indicator)
from .policy import (ActorNetwork, CriticNetwork, PolicyConfig,
                     batch_observations, gaussian_log_prob, sample_action,
                     save_checkpoint)
from .rewards import RewardWeights
from .style import ReferenceLibrary, StyleRewarder, discriminator_loss, mask_features

STAGES = ("formation-only", "full-task")

# which scripted reference motions supervise each discriminator per stage;
# the masked network alone sees the hand sweeps, and backward walking joins
# it only in the full task stage
FULL_DISC_MOTIONS = ("walk-forward", "side-step-left", "side-step-right")
MASK_DISC_MOTIONS = {
    "formation-only": FULL_DISC_MOTIONS + ("lower-hands", "raise-hands"),
    "full-task": FULL_DISC_MOTIONS + ("lower-hands", "raise-hands", "walk-backward"),
}

CSV_HEADER = ("iter", "team_size", "mean_return", "mean_task_reward",
              "mean_style_reward", "d_full_acc", "d_mask_acc")


@dataclass
class PPOConfig:
    horizon: int = 32
    lr: float = 2e-5
    clip_eps: float = 0.2
    gamma: float = 0.99
    gae_lambda: float = 0.95
    task_weight: float = 0.5
    style_weight: float = 0.5
    n_envs: int = 64
    minibatch_size: int = 2048
    epochs: int = 4
    eps_norm: float = 1e-8
    team_size_mix: list = field(default_factory=lambda: [[2, 1.0], [3, 1.0]])
    disc_batch: int = 512

    def __post_init__(self):
        if not (0.0 < self.gamma <= 1.0):
            raise ValueError("gamma must be in (0, 1]")
        if not (0.0 <= self.gae_lambda <= 1.0):
            raise ValueError("gae_lambda must be in [0, 1]")
        if self.clip_eps <= 0:
            raise ValueError("clip_eps must be > 0")
        self.team_size_mix = [[int(n), float(w)] for n, w in self.team_size_mix]
        for n, w in self.team_size_mix:
            if n < 1 or w <= 0:
                raise ValueError("team_size_mix entries must be (size >= 1, weight > 0)")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d: dict) -> "PPOConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown PPOConfig fields: {sorted(unknown)}")
        return cls(**d)


@dataclass
class RunConfig:
    """Merged training-run configuration (environment template, PPO, reward
    weights, policy architecture, paths)."""

    seed: int = 0
    iters: int = 300
    stage: str = "formation-only"
    out_dir: str = "runs/default"
    checkpoint_every: int = 50
    env: EnvConfig = field(default_factory=EnvConfig)
    ppo: PPOConfig = field(default_factory=PPOConfig)
    reward_weights: RewardWeights = field(default_factory=RewardWeights)
    policy: PolicyConfig = field(default_factory=PolicyConfig)

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"stage must be one of {STAGES}")
        if isinstance(self.env, dict):
            self.env = EnvConfig.from_dict(self.env)
        if isinstance(self.ppo, dict):
            self.ppo = PPOConfig.from_dict(self.ppo)
        if isinstance(self.reward_weights, dict):
            self.reward_weights = RewardWeights.from_dict(self.reward_weights)
        if isinstance(self.policy, dict):
            self.policy = PolicyConfig.from_dict(self.policy)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "iters": self.iters,
            "stage": self.stage,
            "out_dir": self.out_dir,
            "checkpoint_every": self.checkpoint_every,
            "env": self.env.to_dict(),
            "ppo": self.ppo.to_dict(),
            "reward_weights": self.reward_weights.to_dict(),
            "policy": self.policy.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown RunConfig fields: {sorted(unknown)}")
        return cls(**d)


# -- GAE and advantage normalization ------------------------------------------


def compute_gae(rewards, values, dones, gamma: float, lam: float,
                bootstrap_value=0.0):
    """Generalized advantage estimation over one stream.

    ``rewards``, ``values``, ``dones`` are length-T (or (T, k)) arrays; the
    recursion resets at done flags and bootstraps the tail with
    ``bootstrap_value`` unless the final step is done. Returns (advantages,
    returns) where returns = advantages + values.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dones = np.asarray(dones, dtype=bool)
    if not (len(rewards) == len(values) == len(dones)):
        raise ValueError("rewards, values, dones must have equal length")
    T = len(rewards)
    adv = np.zeros_like(rewards)
    next_value = np.broadcast_to(np.asarray(bootstrap_value, dtype=np.float64),
                                 rewards.shape[1:]).copy()
    next_adv = np.zeros(rewards.shape[1:])
    for t in range(T - 1, -1, -1):
        live = 1.0 - dones[t]
        delta = rewards[t] + gamma * next_value * live - values[t]
        next_adv = delta + gamma * lam * live * next_adv
        adv[t] = next_adv
        next_value = values[t]
    return adv, adv + values


def normalize_advantages_per_team_size(advantages, team_sizes, eps: float = 1e-8):
    """Standardize advantages within each team-size group; singleton groups
    map to zero (their variance is zero)."""
    advantages = np.asarray(advantages, dtype=np.float64)
    team_sizes = np.asarray(team_sizes)
    if len(advantages) == 0:
        raise ValueError("empty advantage batch")
    if len(advantages) != len(team_sizes):
        raise ValueError("advantages and team_sizes must have equal length")
    out = np.empty_like(advantages)
    for n in np.unique(team_sizes):
        idx = team_sizes == n
        group = advantages[idx]
        out[idx] = (group - group.mean()) / (group.std() + eps)
    return out


# -- rollout collection --------------------------------------------------------


@dataclass
class GroupBatch:
    """Flattened transitions of one team size, ready for minibatching."""

    team_size: int
    proprio: np.ndarray
    object_vec: np.ndarray
    target: np.ndarray
    teammates: np.ndarray
    actions: np.ndarray
    log_probs: np.ndarray
    values: np.ndarray
    advantages: np.ndarray
    returns: np.ndarray
    task_rewards: np.ndarray
    style_rewards: np.ndarray

    def __len__(self) -> int:
        return len(self.actions)


@dataclass
class RolloutBuffer:
    groups: dict  # team_size -> GroupBatch
    style_pairs: np.ndarray  # (N, 20) policy transition features
    episode_returns: dict  # team_size -> list of completed episode returns
    transitions: int


def _obs_arrays(observations, out, step):
    stacked = batch_observations(observations)
    for name, tensor in zip(("proprio", "object_vec", "target", "teammates"), stacked):
        out[name][step] = tensor.numpy()


def collect_rollouts(envs, actor: ActorNetwork, critic: CriticNetwork,
                     rewarder: StyleRewarder, config: PPOConfig,
                     generator: torch.Generator, mask_target: bool = False,
                     episode_return_acc=None) -> RolloutBuffer:
    """Step every environment ``horizon`` times, recording per-agent
    transitions with task, style, and combined rewards. Terminated episodes
    reset automatically."""
    horizon = config.horizon
    by_size = {}
    for e, env in enumerate(envs):
        by_size.setdefault(env.config.team_size, []).append(e)

    current_obs = []
    for env in envs:
        if env.done or env.world is None:
            current_obs.append(env.reset())
        else:
            current_obs.append(build_observations(env.world))

    store = []
    for env in envs:
        n = env.config.team_size
        o = env.config.table.n_contact * 3 + 9
        store.append({
            "proprio": np.zeros((horizon, n, 14), dtype=np.float32),
            "object_vec": np.zeros((horizon, n, o), dtype=np.float32),
            "target": np.zeros((horizon, n, 3), dtype=np.float32),
            "teammates": np.zeros((horizon, n, n - 1, 9), dtype=np.float32),
            "actions": np.zeros((horizon, n, ACTION_DIM), dtype=np.float32),
            "log_probs": np.zeros((horizon, n), dtype=np.float64),
            "values": np.zeros((horizon, n), dtype=np.float64),
            "task_r": np.zeros((horizon, n), dtype=np.float64),
            "style_r": np.zeros((horizon, n), dtype=np.float64),
            "dones": np.zeros(horizon, dtype=bool),
        })

    if episode_return_acc is None:
        episode_return_acc = {e: 0.0 for e in range(len(envs))}
    episode_returns = {}
    all_pairs = []
    log_std = actor.clamped_log_std().detach()

    with torch.no_grad():
        for t in range(horizon):
            for size, env_ids in sorted(by_size.items()):
                obs_flat = [ob for e in env_ids for ob in current_obs[e]]
                tensors = batch_observations(obs_flat)
                mean = actor(*tensors, mask_target=mask_target)
                values = critic(*tensors, mask_target=mask_target)
                actions, log_probs = sample_action(mean, log_std.expand_as(mean),
                                                   generator)
                step_pairs, step_alphas, step_slices = [], [], []
                for row, e in enumerate(env_ids):
                    env = envs[e]
                    sl = slice(row * size, (row + 1) * size)
                    act = actions[sl].numpy()
                    outcome = env.step(act)
                    _obs_arrays(current_obs[e], store[e], t)
                    store[e]["actions"][t] = act
                    store[e]["log_probs"][t] = log_probs[sl].numpy()
                    store[e]["values"][t] = values[sl].numpy()
                    store[e]["task_r"][t] = [b.r_task for b in outcome.rewards]
                    store[e]["dones"][t] = outcome.terminated
                    step_slices.append((e, t))
                    step_pairs.append(np.stack([p.full for p in outcome.style_pairs]))
                    step_alphas.append([interaction_indicator(env.world, i)
                                        for i in range(size)])
                    if outcome.terminated:
                        current_obs[e] = env.reset()
                    else:
                        current_obs[e] = outcome.observations
                pairs = np.concatenate(step_pairs, axis=0)
                alphas = np.concatenate(step_alphas, axis=0)
                styles = rewarder.reward(pairs, alphas)
                all_pairs.append(pairs)
                at = 0
                for (e, tt), n_rows in zip(step_slices, (len(p) for p in step_pairs)):
                    store[e]["style_r"][tt] = styles[at:at + n_rows]
                    at += n_rows

        # bootstrap values for truncated episodes
        bootstrap = [None] * len(envs)
        for size, env_ids in sorted(by_size.items()):
            obs_flat = [ob for e in env_ids for ob in current_obs[e]]
            tensors = batch_observations(obs_flat)
            values = critic(*tensors, mask_target=mask_target).numpy()
            for row, e in enumerate(env_ids):
                bootstrap[e] = values[row * size:(row + 1) * size]

    # combined rewards, episode-return bookkeeping, and GAE per environment
    groups = {}
    for e, env in enumerate(envs):
        s = store[e]
        combined = (config.task_weight * s["task_r"]
                    + config.style_weight * s["style_r"])
        size = env.config.team_size
        for t in range(horizon):
            episode_return_acc[e] += float(combined[t].mean())
            if s["dones"][t]:
                episode_returns.setdefault(size, []).append(episode_return_acc[e])
                episode_return_acc[e] = 0.0
        adv, ret = compute_gae(combined, s["values"], s["dones"],
                               config.gamma, config.gae_lambda, bootstrap[e])
        s["advantages"], s["returns"] = adv, ret
        groups.setdefault(size, []).append(s)

    def flat(stores, key, feature_shape):
        return np.concatenate([st[key].reshape(-1, *feature_shape) for st in stores])

    batches = {}
    total = 0
    for size, stores in sorted(groups.items()):
        n_contact_dim = stores[0]["object_vec"].shape[-1]
        batch = GroupBatch(
            team_size=size,
            proprio=flat(stores, "proprio", (14,)),
            object_vec=flat(stores, "object_vec", (n_contact_dim,)),
            target=flat(stores, "target", (3,)),
            teammates=flat(stores, "teammates", (size - 1, 9)),
            actions=flat(stores, "actions", (ACTION_DIM,)),
            log_probs=flat(stores, "log_probs", ()),
            values=flat(stores, "values", ()),
            advantages=flat(stores, "advantages", ()),
            returns=flat(stores, "returns", ()),
            task_rewards=flat(stores, "task_r", ()),
            style_rewards=flat(stores, "style_r", ()),
        )
        batches[size] = batch
        total += len(batch)

    return RolloutBuffer(groups=batches,
                         style_pairs=np.concatenate(all_pairs, axis=0),
                         episode_returns=episode_returns,
                         transitions=total)


# -- updates -------------------------------------------------------------------


def ppo_update(actor: ActorNetwork, critic: CriticNetwork,
               actor_opt: torch.optim.Optimizer, critic_opt: torch.optim.Optimizer,
               buffer: RolloutBuffer, config: PPOConfig,
               rng: np.random.Generator, mask_target: bool = False) -> dict:
    """Clipped-surrogate PPO epochs over the collected batch; advantages are
    normalized per team-size group before minibatching. Non-finite losses
    abort the affected step and are reported."""
    all_adv = np.concatenate([b.advantages for b in buffer.groups.values()])
    all_sizes = np.concatenate([np.full(len(b), n) for n, b in buffer.groups.items()])
    normed = normalize_advantages_per_team_size(all_adv, all_sizes, config.eps_norm)
    at = 0
    norm_adv = {}
    for n, b in buffer.groups.items():
        norm_adv[n] = normed[at:at + len(b)]
        at += len(b)

    policy_losses, value_losses = [], []
    aborted = 0
    for _ in range(config.epochs):
        for n, batch in sorted(buffer.groups.items()):
            order = rng.permutation(len(batch))
            for lo in range(0, len(batch), config.minibatch_size):
                idx = order[lo:lo + config.minibatch_size]
                obs = (
                    torch.as_tensor(batch.proprio[idx]),
                    torch.as_tensor(batch.object_vec[idx]),
                    torch.as_tensor(batch.target[idx]),
                    torch.as_tensor(batch.teammates[idx]),
                )
                actions = torch.as_tensor(batch.actions[idx])
                old_logp = torch.as_tensor(batch.log_probs[idx], dtype=torch.float32)
                adv = torch.as_tensor(norm_adv[n][idx], dtype=torch.float32)
                rets = torch.as_tensor(batch.returns[idx], dtype=torch.float32)

                mean = actor(*obs, mask_target=mask_target)
                log_std = actor.clamped_log_std().expand_as(mean)
                new_logp = gaussian_log_prob(mean, log_std, actions)
                ratio = torch.exp(new_logp - old_logp)
                clipped = torch.clamp(ratio, 1.0 - config.clip_eps, 1.0 + config.clip_eps)
                policy_loss = -torch.min(ratio * adv, clipped * adv).mean()

                values = critic(*obs, mask_target=mask_target)
                value_loss = ((values - rets) ** 2).mean()

                if not (torch.isfinite(policy_loss) and torch.isfinite(value_loss)):
                    aborted += 1
                    continue
                actor_opt.zero_grad()
                policy_loss.backward()
                actor_opt.step()
                critic_opt.zero_grad()
                value_loss.backward()
                critic_opt.step()
                policy_losses.append(policy_loss.item())
                value_losses.append(value_loss.item())

    return {
        "policy_loss": float(np.mean(policy_losses)) if policy_losses else float("nan"),
        "value_loss": float(np.mean(value_losses)) if value_losses else float("nan"),
        "aborted_minibatches": aborted,
    }


def discriminator_update(rewarder: StyleRewarder, library: ReferenceLibrary,
                         policy_pairs: np.ndarray,
                         full_opt: torch.optim.Optimizer,
                         mask_opt: torch.optim.Optimizer,
                         config: PPOConfig, stage: str,
                         rng: np.random.Generator) -> dict:
    """One Adam step for each discriminator. The full-body network never sees
    the hand-sweep references; the masked one does (and backward walking in
    the full-task stage)."""
    mask_motions = MASK_DISC_MOTIONS[stage]
    batch = min(config.disc_batch, len(policy_pairs))
    pol_idx = rng.integers(0, len(policy_pairs), size=batch)
    pol = policy_pairs[pol_idx]

    ref_full = library.sample(rng, batch, FULL_DISC_MOTIONS)
    loss_full = discriminator_loss(rewarder.d_full, ref_full, pol)
    full_opt.zero_grad()
    loss_full.backward()
    full_opt.step()

    ref_mask = mask_features(library.sample(rng, batch, mask_motions))
    pol_mask = mask_features(pol)
    loss_mask = discriminator_loss(rewarder.d_mask, ref_mask, pol_mask)
    mask_opt.zero_grad()
    loss_mask.backward()
    mask_opt.step()

    with torch.no_grad():
        acc_full = 0.5 * (float(np.mean(rewarder.d_full.score(ref_full) > 0.5))
                          + float(np.mean(rewarder.d_full.score(pol) < 0.5)))
        acc_mask = 0.5 * (float(np.mean(rewarder.d_mask.score(ref_mask) > 0.5))
                          + float(np.mean(rewarder.d_mask.score(pol_mask) < 0.5)))
    return {"d_full_loss": loss_full.item(), "d_mask_loss": loss_mask.item(),
            "d_full_acc": acc_full, "d_mask_acc": acc_mask}


# -- trainer -------------------------------------------------------------------


def build_envs(config: RunConfig):
    """Instantiate n_envs environments with team sizes allocated
    proportionally to the mix weights (largest remainder, so every listed
    size appears when n_envs allows), each env with its own seeded RNG."""
    sizes = [n for n, _ in config.ppo.team_size_mix]
    weights = np.array([w for _, w in config.ppo.team_size_mix], dtype=float)
    weights /= weights.sum()
    n_envs = config.ppo.n_envs
    counts = np.floor(weights * n_envs).astype(int)
    if n_envs >= len(sizes):
        counts = np.maximum(counts, 1)
    while counts.sum() > n_envs:
        counts[int(np.argmax(counts))] -= 1
    remainder = weights * n_envs - counts
    while counts.sum() < n_envs:
        k = int(np.argmax(remainder))
        counts[k] += 1
        remainder[k] = -np.inf
    drawn = np.repeat(sizes, counts)
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0xE17]))
    rng.shuffle(drawn)
    envs = []
    for e, n in enumerate(drawn):
        env_cfg = EnvConfig.from_dict({**config.env.to_dict(), "team_size": int(n),
                                       "seed": int(np.random.SeedSequence(
                                           [config.seed, e]).generate_state(1)[0])})
        envs.append(CarryEnv(env_cfg, config.reward_weights,
                             formation_only=config.stage == "formation-only"))
    return envs


class Trainer:
    """Owns the networks, optimizers, environments, and RNG streams of one
    training run."""

    def __init__(self, config: RunConfig):
        self.config = config
        torch.manual_seed(config.seed)
        self.actor = ActorNetwork(config.policy)
        self.critic = CriticNetwork(config.policy)
        self.rewarder = StyleRewarder.fresh(config.seed)
        self.library = ReferenceLibrary(seed=config.seed)
        self.rewarder.set_normalizers(self.library, FULL_DISC_MOTIONS,
                                      MASK_DISC_MOTIONS[config.stage])
        lr = config.ppo.lr
        self.actor_opt = torch.optim.Adam(self.actor.parameters(), lr=lr)
        self.critic_opt = torch.optim.Adam(self.critic.parameters(), lr=lr)
        self.full_opt = torch.optim.Adam(self.rewarder.d_full.parameters(), lr=lr)
        self.mask_opt = torch.optim.Adam(self.rewarder.d_mask.parameters(), lr=lr)
        self.envs = build_envs(config)
        self.sample_gen = torch.Generator().manual_seed(config.seed)
        self.update_rng = np.random.default_rng(np.random.SeedSequence(
            [config.seed, 0xBA7C4]))
        self.iteration = 0
        self.episode_return_acc = {e: 0.0 for e in range(len(self.envs))}
        self.recent_returns = {n: [] for n, _ in config.ppo.team_size_mix}

    @property
    def mask_target(self) -> bool:
        return self.config.stage == "formation-only"

    def run_iteration(self, trace=None) -> dict:
        """rollout -> discriminator update -> PPO update; returns the metric
        row values per team size."""
        cfg = self.config
        buffer = collect_rollouts(self.envs, self.actor, self.critic, self.rewarder,
                                  cfg.ppo, self.sample_gen, self.mask_target,
                                  self.episode_return_acc)
        if trace is not None:
            trace.append("rollout")
        disc_stats = discriminator_update(self.rewarder, self.library,
                                          buffer.style_pairs, self.full_opt,
                                          self.mask_opt, cfg.ppo, cfg.stage,
                                          self.update_rng)
        if trace is not None:
            trace.append("disc_update")
        ppo_stats = ppo_update(self.actor, self.critic, self.actor_opt,
                               self.critic_opt, buffer, cfg.ppo,
                               self.update_rng, self.mask_target)
        if trace is not None:
            trace.append("ppo_update")
        self.iteration += 1

        rows = {}
        for n, batch in sorted(buffer.groups.items()):
            done_returns = buffer.episode_returns.get(n, [])
            self.recent_returns.setdefault(n, []).extend(done_returns)
            self.recent_returns[n] = self.recent_returns[n][-64:]
            recent = self.recent_returns[n]
            rows[n] = {
                "mean_return": float(np.mean(recent)) if recent else float("nan"),
                "mean_task_reward": float(batch.task_rewards.mean()),
                "mean_style_reward": float(batch.style_rewards.mean()),
                "d_full_acc": disc_stats["d_full_acc"],
                "d_mask_acc": disc_stats["d_mask_acc"],
            }
        return {"rows": rows, "ppo": ppo_stats, "disc": disc_stats}

    # -- checkpointing ----------------------------------------------------------

    def save(self, path) -> None:
        blob = {
            "format_version": 1,
            "run_config": self.config.to_dict(),
            "iteration": self.iteration,
            "actor": self.actor.state_dict(),
            "critic": self.critic.state_dict(),
            "d_full": self.rewarder.d_full.state_dict(),
            "d_mask": self.rewarder.d_mask.state_dict(),
            "actor_opt": self.actor_opt.state_dict(),
            "critic_opt": self.critic_opt.state_dict(),
            "full_opt": self.full_opt.state_dict(),
            "mask_opt": self.mask_opt.state_dict(),
            "sample_gen": self.sample_gen.get_state(),
            "update_rng": self.update_rng.bit_generator.state,
            "envs": [env.get_state() for env in self.envs],
            "episode_return_acc": self.episode_return_acc,
            "recent_returns": self.recent_returns,
        }
        torch.save(blob, path)

    @classmethod
    def load(cls, path) -> "Trainer":
        blob = torch.load(path, weights_only=False)
        if blob.get("format_version") != 1:
            raise ValueError("unsupported trainer checkpoint version")
        trainer = cls(RunConfig.from_dict(blob["run_config"]))
        trainer.actor.load_state_dict(blob["actor"])
        trainer.critic.load_state_dict(blob["critic"])
        trainer.rewarder.d_full.load_state_dict(blob["d_full"])
        trainer.rewarder.d_mask.load_state_dict(blob["d_mask"])
        trainer.actor_opt.load_state_dict(blob["actor_opt"])
        trainer.critic_opt.load_state_dict(blob["critic_opt"])
        trainer.full_opt.load_state_dict(blob["full_opt"])
        trainer.mask_opt.load_state_dict(blob["mask_opt"])
        trainer.sample_gen.set_state(blob["sample_gen"])
        trainer.update_rng.bit_generator.state = blob["update_rng"]
        for env, st in zip(trainer.envs, blob["envs"]):
            env.set_state(st)
        trainer.iteration = blob["iteration"]
        trainer.episode_return_acc = blob["episode_return_acc"]
        trainer.recent_returns = blob["recent_returns"]
        return trainer


def train_loop(config: RunConfig, resume: str | None = None, trace=None,
               progress=None) -> dict:
    """Run the configured number of iterations, appending one metrics CSV row
    per (iteration, team size) and checkpointing periodically.

    Returns {"metrics_csv", "checkpoint", "iterations"}.
    """
    os.makedirs(config.out_dir, exist_ok=True)
    trainer = Trainer.load(resume) if resume else Trainer(config)
    csv_path = os.path.join(config.out_dir, "metrics.csv")
    write_header = not (resume and os.path.exists(csv_path))
    mode = "a" if resume and os.path.exists(csv_path) else "w"
    ckpt_path = os.path.join(config.out_dir, "checkpoint.pt")
    policy_path = os.path.join(config.out_dir, "policy.pt")

    with open(csv_path, mode, newline="") as f:
        writer = csv.writer(f)
        if write_header:
            writer.writerow(CSV_HEADER)
        start = trainer.iteration
        for it in range(start, config.iters):
            stats = trainer.run_iteration(trace)
            for n, row in sorted(stats["rows"].items()):
                writer.writerow([it, n, row["mean_return"], row["mean_task_reward"],
                                 row["mean_style_reward"], row["d_full_acc"],
                                 row["d_mask_acc"]])
            f.flush()
            if progress is not None:
                progress(it, stats)
            if (it + 1) % config.checkpoint_every == 0 or it + 1 == config.iters:
                trainer.save(ckpt_path)
                save_checkpoint(policy_path, trainer.actor, trainer.critic,
                                extra={"iteration": trainer.iteration,
                                       "stage": config.stage})

    return {"metrics_csv": csv_path, "checkpoint": ckpt_path,
            "policy_checkpoint": policy_path, "iterations": config.iters}
