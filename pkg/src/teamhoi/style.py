"""Masked motion-prior machinery: transition features, two discriminators
(full-body and hand-masked), their loss, the style reward, and the sigmoid
blend, plus scripted reference-motion generators standing in for mocap.

Feature layout (10 reals, heading frame):
    0 forward speed   1 lateral speed   2 heading rate
    3 z_L             4 z_R
    5-6 left-hand planar offset from the root
    7-8 right-hand planar offset from the root
    9 mean hand speed (3D)
The masked subset is the first three entries: everything a hand can influence
is excluded.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .world import AgentState, heading_vector, rot2

FEATURE_DIM = 10
MASKED_INDICES = (0, 1, 2)
MASKED_DIM = len(MASKED_INDICES)

STYLE_REWARD_D_CAP = 1.0 - 1e-4

REFERENCE_MOTIONS = ("walk-forward", "walk-backward", "side-step-left",
                     "side-step-right", "lower-hands", "raise-hands")
REF_SPEED_RANGE = (1.0, 2.5)
REF_HAND_Z_RANGE = (0.65, 1.1)
REF_DT = 1.0 / 30.0


def extract_features(agent: AgentState) -> np.ndarray:
    """Motion features of one agent state in its heading frame."""
    f = heading_vector(agent.heading)
    lateral = np.array([-f[1], f[0]])
    rel = (agent.hands[:, :2] - agent.root) @ rot2(-agent.heading).T
    hand_speed = 0.5 * float(np.sum(np.linalg.norm(agent.hand_vels, axis=1)))
    return np.array([
        float(np.dot(f, agent.root_vel)),
        float(np.dot(lateral, agent.root_vel)),
        agent.heading_rate,
        agent.hands[0, 2],
        agent.hands[1, 2],
        rel[0, 0], rel[0, 1],
        rel[1, 0], rel[1, 1],
        hand_speed,
    ])


@dataclass
class TransitionPair:
    """Features of one agent at consecutive steps."""

    before: np.ndarray
    after: np.ndarray

    @property
    def full(self) -> np.ndarray:
        return np.concatenate([self.before, self.after])

    @property
    def masked(self) -> np.ndarray:
        idx = list(MASKED_INDICES)
        return np.concatenate([self.before[idx], self.after[idx]])


def extract_transition(before: AgentState, after: AgentState) -> TransitionPair:
    return TransitionPair(extract_features(before), extract_features(after))


def mask_features(full_pairs: np.ndarray) -> np.ndarray:
    """Select the masked-feature columns from a (batch, 20) full-pair array."""
    idx = list(MASKED_INDICES) + [FEATURE_DIM + j for j in MASKED_INDICES]
    return np.asarray(full_pairs)[:, idx]


# -- scripted reference motions ---------------------------------------------


def _walk_states(n_steps, speed, direction, hand_z=0.9, dt=REF_DT):
    """Root translating at constant speed along a heading-frame direction,
    hands held at the relaxed carry offsets."""
    states = []
    heading = 0.0
    vel_world = speed * (rot2(heading) @ np.asarray(direction, dtype=float))
    for t in range(n_steps):
        root = vel_world * (t * dt)
        hands = np.array([
            [root[0] + 0.25, root[1] + 0.25, hand_z],
            [root[0] + 0.25, root[1] - 0.25, hand_z],
        ])
        hand_vels = np.tile(np.append(vel_world, 0.0), (2, 1))
        states.append(AgentState(root=root, heading=heading, root_vel=vel_world,
                                 heading_rate=0.0, hands=hands, hand_vels=hand_vels))
    return states


def _hand_sweep_states(n_steps, z_from, z_to, dt=REF_DT):
    """Stationary root; both hands sweeping vertically between two heights."""
    states = []
    duration = (n_steps - 1) * dt
    vz = (z_to - z_from) / duration if duration > 0 else 0.0
    for t in range(n_steps):
        z = z_from + vz * t * dt
        hands = np.array([[0.25, 0.25, z], [0.25, -0.25, z]])
        hand_vels = np.tile([0.0, 0.0, vz], (2, 1))
        states.append(AgentState(root=np.zeros(2), heading=0.0,
                                 root_vel=np.zeros(2), heading_rate=0.0,
                                 hands=hands, hand_vels=hand_vels))
    return states


def generate_reference_states(name: str, rng: np.random.Generator,
                              n_steps: int = 60):
    """Scripted state sequence for one named reference motion."""
    lo, hi = REF_SPEED_RANGE
    if name == "walk-forward":
        return _walk_states(n_steps, rng.uniform(lo, hi), (1.0, 0.0))
    if name == "walk-backward":
        return _walk_states(n_steps, rng.uniform(lo, hi), (-1.0, 0.0))
    if name == "side-step-left":
        return _walk_states(n_steps, rng.uniform(lo, hi), (0.0, 1.0))
    if name == "side-step-right":
        return _walk_states(n_steps, rng.uniform(lo, hi), (0.0, -1.0))
    if name == "lower-hands":
        z_hi = rng.uniform(0.95, REF_HAND_Z_RANGE[1])
        z_lo = rng.uniform(REF_HAND_Z_RANGE[0], 0.8)
        return _hand_sweep_states(n_steps, z_hi, z_lo)
    if name == "raise-hands":
        z_hi = rng.uniform(0.95, REF_HAND_Z_RANGE[1])
        z_lo = rng.uniform(REF_HAND_Z_RANGE[0], 0.8)
        return _hand_sweep_states(n_steps, z_lo, z_hi)
    raise ValueError(f"unknown reference motion {name!r}")


class ReferenceLibrary:
    """Named scripted trajectory generators emitting transition-pair batches
    of motion features, replacing a mocap dataset."""

    def __init__(self, motions=REFERENCE_MOTIONS, seed: int = 0,
                 clip_len: int = 60, clips_per_motion: int = 8):
        self.motions = tuple(motions)
        unknown = set(self.motions) - set(REFERENCE_MOTIONS)
        if unknown:
            raise ValueError(f"unknown reference motions: {sorted(unknown)}")
        rng = np.random.default_rng(seed)
        self._pairs = {}
        for name in self.motions:
            pairs = []
            for _ in range(clips_per_motion):
                states = generate_reference_states(name, rng, clip_len)
                feats = [extract_features(s) for s in states]
                pairs.extend(np.concatenate([feats[t], feats[t + 1]])
                             for t in range(len(feats) - 1))
            self._pairs[name] = np.stack(pairs)

    def pairs(self, motions=None) -> np.ndarray:
        """(n, 20) full-feature transition pairs for the given motion names
        (default: every motion in the library)."""
        names = self.motions if motions is None else tuple(motions)
        missing = set(names) - set(self.motions)
        if missing:
            raise ValueError(f"motions not in library: {sorted(missing)}")
        return np.concatenate([self._pairs[n] for n in names], axis=0)

    def sample(self, rng: np.random.Generator, batch: int, motions=None) -> np.ndarray:
        pool = self.pairs(motions)
        idx = rng.integers(0, len(pool), size=batch)
        return pool[idx]

    def export_jsonl(self, path, motions=None) -> None:
        names = self.motions if motions is None else tuple(motions)
        with open(path, "w") as f:
            for name in names:
                for pair in self._pairs[name]:
                    f.write(json.dumps({"motion": name, "pair": pair.tolist()}) + "\n")

    @classmethod
    def import_jsonl(cls, path) -> "ReferenceLibrary":
        """Build a library from externally produced feature sequences."""
        lib = cls.__new__(cls)
        pairs = {}
        with open(path) as f:
            for line in f:
                if not line.strip():
                    continue
                rec = json.loads(line)
                pair = np.asarray(rec["pair"], dtype=float)
                if pair.shape != (2 * FEATURE_DIM,):
                    raise ValueError(f"bad pair length {pair.shape} in {path}")
                pairs.setdefault(rec["motion"], []).append(pair)
        if not pairs:
            raise ValueError(f"no transition pairs in {path}")
        lib.motions = tuple(pairs)
        lib._pairs = {k: np.stack(v) for k, v in pairs.items()}
        return lib


# -- discriminators -----------------------------------------------------------


class Discriminator(nn.Module):
    """Transition classifier: MLP [1024, 512, 1] with a sigmoid head, fed
    whitened (pair - mean) / std inputs. The normalizer statistics come from
    reference data and stay frozen between refreshes."""

    def __init__(self, input_dim: int, hidden=(1024, 512)):
        super().__init__()
        layers = []
        prev = input_dim
        for h in hidden:
            layers += [nn.Linear(prev, h), nn.ReLU()]
            prev = h
        layers.append(nn.Linear(prev, 1))
        self.net = nn.Sequential(*layers)
        self.register_buffer("input_mean", torch.zeros(input_dim))
        self.register_buffer("input_std", torch.ones(input_dim))

    def set_normalizer(self, reference_pairs: np.ndarray) -> None:
        ref = np.asarray(reference_pairs, dtype=np.float64)
        self.input_mean.copy_(torch.as_tensor(ref.mean(axis=0), dtype=torch.float32))
        std = ref.std(axis=0)
        std[std < 1e-6] = 1.0
        self.input_std.copy_(torch.as_tensor(std, dtype=torch.float32))

    def forward(self, pairs: torch.Tensor) -> torch.Tensor:
        x = (pairs - self.input_mean) / self.input_std
        return torch.sigmoid(self.net(x)).squeeze(-1)

    def score(self, pairs: np.ndarray) -> np.ndarray:
        with torch.no_grad():
            t = torch.as_tensor(np.asarray(pairs), dtype=torch.float32)
            return self.forward(t).numpy()


def discriminator_loss(disc: Discriminator, ref_pairs, policy_pairs) -> torch.Tensor:
    """Binary cross-entropy pushing D -> 1 on reference transitions and
    D -> 0 on policy transitions."""
    if len(ref_pairs) == 0 or len(policy_pairs) == 0:
        raise ValueError("discriminator_loss needs nonempty batches")
    d_ref = disc(torch.as_tensor(np.asarray(ref_pairs), dtype=torch.float32))
    d_pol = disc(torch.as_tensor(np.asarray(policy_pairs), dtype=torch.float32))
    eps = 1e-7
    return (-torch.log(d_ref.clamp(eps, 1.0 - eps)).mean()
            - torch.log((1.0 - d_pol).clamp(eps, 1.0 - eps)).mean())


def style_reward(d_value) -> float:
    """-log(1 - D), with D capped below 1 so the reward tops out near 9.21."""
    d = min(max(float(d_value), 0.0), STYLE_REWARD_D_CAP)
    return -math.log(1.0 - d)


def sigmoid(x: float) -> float:
    return 1.0 / (1.0 + math.exp(-x))


def blend(r_mask: float, r_full: float, alpha: float) -> float:
    """Convex blend of the masked and full style rewards by the interaction
    indicator."""
    s = sigmoid(alpha)
    return s * r_mask + (1.0 - s) * r_full


def combined_reward(r_task: float, r_style: float, task_weight: float = 0.5,
                    style_weight: float = 0.5) -> float:
    return task_weight * r_task + style_weight * r_style


@dataclass
class StyleRewarder:
    """Bundles both discriminators and produces blended per-agent style
    rewards from full-feature transition pairs."""

    d_full: Discriminator
    d_mask: Discriminator

    @classmethod
    def fresh(cls, seed: int = 0) -> "StyleRewarder":
        torch.manual_seed(seed)
        return cls(Discriminator(2 * FEATURE_DIM), Discriminator(2 * MASKED_DIM))

    def set_normalizers(self, library: ReferenceLibrary, full_motions,
                        mask_motions) -> None:
        full_ref = library.pairs(full_motions)
        self.d_full.set_normalizer(full_ref)
        self.d_mask.set_normalizer(mask_features(library.pairs(mask_motions)))

    def reward(self, full_pairs: np.ndarray, alphas) -> np.ndarray:
        """Blended style reward per row of (batch, 20) transition features."""
        full_pairs = np.atleast_2d(np.asarray(full_pairs, dtype=float))
        d_f = self.d_full.score(full_pairs)
        d_m = self.d_mask.score(mask_features(full_pairs))
        alphas = np.atleast_1d(np.asarray(alphas, dtype=float))
        return np.array([
            blend(style_reward(m), style_reward(f), a)
            for m, f, a in zip(d_m, d_f, alphas)
        ])
