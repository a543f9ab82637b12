"""Desk-scale surrogate environment: planar agents with two height-controlled
hands, a quasi-static table that is carried kinematically once every agent
grips it, and local-frame observation construction.

The 9-real action per agent is [root accel x, y (heading frame), heading
rate, left-hand vel x, y, z (heading frame), right-hand vel x, y, z]. Actions
are clamped to [-1, 1] and scaled by the constants below.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import style
from .geometry import TableGeometry, TableSpec
from .rewards import (CONTACT_GRIP, PUTDOWN_TRIGGER, RewardWeights,
                      evaluate_rewards)
from .world import (HAND_REACH, HAND_Z_MAX, HAND_Z_MIN, SHOULDER_HEIGHT,
                    TABLE_Z_MAX, TABLE_Z_MIN, AgentState, TableState,
                    WorldState, _default_hands, rot2, wrap_angle)

ACTION_DIM = 9
PROPRIO_DIM = 14
TEAMMATE_DIM = 9

ROOT_ACCEL_SCALE = 4.0  # m/s^2 per unit action
ROOT_DRAG = 0.5  # 1/s
HEADING_RATE_SCALE = 2.0  # rad/s per unit action
HAND_VEL_SCALE = 1.5  # m/s per unit action
GRIP_MIN_Z = 0.88  # table height above which the planar carry engages
HEAVY_MASS_SCALE = 5.0
HEAVY_MIN_TEAM = 4
Z_RELAX_RATE = 0.5  # m/s settle rate toward the resting height
OUT_OF_BOUNDS = 20.0  # m from the table center

MAX_SPAWN_DRAWS = 10_000
MIN_SPAWN_ARC_SEP = 0.5  # m along the spawn circle


class EnvError(RuntimeError):
    pass


@dataclass
class EnvConfig:
    team_size: int = 2
    table: TableSpec = field(default_factory=TableSpec)
    episode_len: int = 600
    dt: float = 1.0 / 30.0
    spawn_radius: float = 8.0
    target_dist: tuple = (3.0, 10.0)
    seed: int = 0

    def __post_init__(self):
        if not (1 <= self.team_size <= 16):
            raise ValueError("team_size must be in [1, 16]")
        if self.episode_len <= 0:
            raise ValueError("episode_len must be > 0")
        if self.dt <= 0:
            raise ValueError("dt must be > 0")
        if isinstance(self.table, dict):
            self.table = TableSpec.from_dict(self.table)
        lo, hi = self.target_dist
        if not (0 < lo <= hi):
            raise ValueError("target_dist must satisfy 0 < lo <= hi")
        self.target_dist = (float(lo), float(hi))
        half_extent = float(np.linalg.norm(self.table.boundary_vertices(), axis=1).max())
        if self.spawn_radius <= half_extent + 1.0:
            raise ValueError("spawn_radius must exceed the table half-extent + 1 m")

    def to_dict(self) -> dict:
        return {
            "team_size": self.team_size,
            "table": self.table.to_dict(),
            "episode_len": self.episode_len,
            "dt": self.dt,
            "spawn_radius": self.spawn_radius,
            "target_dist": list(self.target_dist),
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EnvConfig":
        known = {"team_size", "table", "episode_len", "dt", "spawn_radius",
                 "target_dist", "seed"}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown EnvConfig fields: {sorted(unknown)}")
        kwargs = dict(d)
        if "target_dist" in kwargs:
            kwargs["target_dist"] = tuple(kwargs["target_dist"])
        return cls(**kwargs)

    @classmethod
    def from_json(cls, path) -> "EnvConfig":
        import json

        with open(path) as f:
            return cls.from_dict(json.load(f))


@dataclass
class AgentObservation:
    """One agent's local-frame view of the world."""

    proprio: np.ndarray  # (14,)
    object_center: np.ndarray  # (3,)
    contact_points: np.ndarray  # (n_contact, 3), nearest-to-root first, CCW
    nearest_hand_points: np.ndarray  # (2, 3)
    target: np.ndarray  # (3,): local goal xy + putdown indicator
    teammates: np.ndarray  # (n-1, 9)

    @property
    def object_vec(self) -> np.ndarray:
        """Flat object token input: center + contact points + hand points."""
        return np.concatenate([
            self.object_center,
            self.contact_points.ravel(),
            self.nearest_hand_points.ravel(),
        ])


@dataclass
class StepOutcome:
    observations: list  # AgentObservation per agent
    rewards: list  # RewardBreakdown per agent
    style_pairs: list  # style.TransitionPair per agent
    contacts: list  # ContactState per agent
    terminated: bool
    reason: str | None


class CarryEnv:
    """Single environment instance; owns its state and RNG."""

    def __init__(self, config: EnvConfig, reward_weights: RewardWeights | None = None,
                 formation_only: bool = False):
        self.config = config
        self.geometry = TableGeometry(config.table)
        self.reward_weights = reward_weights or RewardWeights()
        self.formation_only = formation_only
        self.rng = np.random.default_rng(config.seed)
        self.world: WorldState | None = None
        self.done = True
        self.reason: str | None = None

    # -- lifecycle ---------------------------------------------------------

    def reset(self, seed: int | None = None):
        """Spawn the team on the radius-8 circle facing the table, place the
        target 3-10 m away in a random direction, and return observations."""
        if seed is not None:
            self.rng = np.random.default_rng(seed)
        cfg = self.config
        n = cfg.team_size
        min_gap = MIN_SPAWN_ARC_SEP / cfg.spawn_radius
        for _ in range(MAX_SPAWN_DRAWS):
            angles = self.rng.uniform(0.0, 2.0 * np.pi, size=n)
            if n == 1:
                break
            srt = np.sort(angles)
            gaps = np.diff(np.concatenate([srt, [srt[0] + 2.0 * np.pi]]))
            if np.min(gaps) >= min_gap:
                break
        else:
            raise EnvError("could not draw a spawn with the required separation; "
                           "team too large for the spawn circle")

        agents = []
        for ang in angles:
            root = cfg.spawn_radius * np.array([np.cos(ang), np.sin(ang)])
            heading = float(np.arctan2(-root[1], -root[0]))
            agents.append(AgentState(root=root, heading=heading,
                                     hands=_default_hands(root, heading)))

        tdir = self.rng.uniform(0.0, 2.0 * np.pi)
        tdist = self.rng.uniform(*cfg.target_dist)
        target = tdist * np.array([np.cos(tdir), np.sin(tdir)])

        self.world = WorldState(agents=agents, table=TableState(),
                                geometry=self.geometry, target=target, t=0)
        self._bind_state_arrays()
        self.done = False
        self.reason = None
        return build_observations(self.world)

    def _bind_state_arrays(self):
        """Keep the agent state in stacked arrays; the AgentState fields
        become views into them so the step loop avoids re-stacking."""
        agents = self.world.agents
        self._roots = np.stack([a.root for a in agents])
        self._vels = np.stack([a.root_vel for a in agents])
        self._hands = np.stack([a.hands for a in agents])
        self._hand_vels = np.stack([a.hand_vels for a in agents])
        for i, a in enumerate(agents):
            a.root = self._roots[i]
            a.root_vel = self._vels[i]
            a.hands = self._hands[i]
            a.hand_vels = self._hand_vels[i]

    def step(self, actions, lean: bool = False) -> StepOutcome:
        """Advance one control step. ``actions`` is (team_size, 9).

        ``lean`` skips observation, reward, and style-feature construction
        (metrics recompute everything they need from trajectory snapshots).
        """
        if self.done or self.world is None:
            raise EnvError("step() called on a terminated environment; reset first")
        cfg = self.config
        dt = cfg.dt
        n = cfg.team_size
        world = self.world
        acts = np.clip(np.asarray(actions, dtype=float).reshape(n, ACTION_DIM),
                       -1.0, 1.0)

        prev_agents = None if lean else [a.copy() for a in world.agents]
        roots, vels, hands = self._roots, self._vels, self._hands
        headings = np.array([a.heading for a in world.agents])
        prev_roots = roots.copy()
        prev_hands = hands.copy()

        # root integration: commanded acceleration in the heading frame + drag.
        # All writes are in place; the AgentState fields are views into the
        # stacked arrays.
        c, s = np.cos(headings), np.sin(headings)
        ax, ay = ROOT_ACCEL_SCALE * acts[:, 0], ROOT_ACCEL_SCALE * acts[:, 1]
        accel = np.stack([c * ax - s * ay, s * ax + c * ay], axis=1) - ROOT_DRAG * vels
        vels += dt * accel
        roots += dt * vels
        rates = HEADING_RATE_SCALE * acts[:, 2]
        dtheta = dt * rates
        new_headings = np.array([wrap_angle(h + d) for h, d in zip(headings, dtheta)])

        # hands ride with the body (translation + heading rotation), then take
        # their heading-frame velocity commands; z and reach clamps follow
        rel_xy = prev_hands[:, :, :2] - prev_roots[:, None, :]
        cd, sd = np.cos(dtheta), np.sin(dtheta)
        rel_rot = np.empty_like(rel_xy)
        rel_rot[:, :, 0] = cd[:, None] * rel_xy[:, :, 0] - sd[:, None] * rel_xy[:, :, 1]
        rel_rot[:, :, 1] = sd[:, None] * rel_xy[:, :, 0] + cd[:, None] * rel_xy[:, :, 1]
        cmd = HAND_VEL_SCALE * acts[:, 3:9].reshape(n, 2, 3)
        cn, sn = np.cos(new_headings), np.sin(new_headings)
        new_hands = np.empty_like(prev_hands)
        new_hands[:, :, 0] = roots[:, None, 0] + rel_rot[:, :, 0] + dt * (
            cn[:, None] * cmd[:, :, 0] - sn[:, None] * cmd[:, :, 1])
        new_hands[:, :, 1] = roots[:, None, 1] + rel_rot[:, :, 1] + dt * (
            sn[:, None] * cmd[:, :, 0] + cn[:, None] * cmd[:, :, 1])
        new_hands[:, :, 2] = np.clip(prev_hands[:, :, 2] + dt * cmd[:, :, 2],
                                     HAND_Z_MIN, HAND_Z_MAX)
        root3d = np.concatenate([roots, np.full((n, 1), SHOULDER_HEIGHT)], axis=1)
        offset = new_hands - root3d[:, None, :]
        dist = np.sqrt(np.einsum("nhx,nhx->nh", offset, offset))
        scale = np.minimum(1.0, HAND_REACH / np.maximum(dist, 1e-12))
        hands[:] = root3d[:, None, :] + offset * scale[:, :, None]
        self._hand_vels[:] = (hands - prev_hands) / dt

        for i, agent in enumerate(world.agents):
            agent.heading = float(new_headings[i])
            agent.heading_rate = float(rates[i])

        # table response, quasi-static: held and carried only under full grip.
        # The grip is judged on the configuration at the start of the step
        # (same-time hands vs contacts), so a release stops the table on the
        # following step.
        contact_pts = world.contact_points_world()
        d_prev = np.linalg.norm(contact_pts[None, None, :, :] - prev_hands[:, :, None, :],
                                axis=3).min(axis=2)
        grips_ok = bool(np.all(d_prev < CONTACT_GRIP))
        heavy = self.geometry.spec.mass_scale >= HEAVY_MASS_SCALE
        can_hold = grips_ok and (not heavy or n >= HEAVY_MIN_TEAM)

        table = world.table
        if can_hold:
            table.z = float(np.clip(hands[:, :, 2].mean(), TABLE_Z_MIN, TABLE_Z_MAX))
            gripped = table.z >= GRIP_MIN_Z
            if gripped:
                vbar = vels.mean(axis=0)
                q = prev_roots - table.position
                q_new = (prev_roots + vels * dt) - (table.position + vbar * dt)
                num = float(np.sum(q[:, 0] * q_new[:, 1] - q[:, 1] * q_new[:, 0]))
                den = float(np.sum(np.sum(q * q_new, axis=1)))
                omega_dt = float(np.arctan2(num, den)) if (num != 0.0 or den != 0.0) else 0.0
                table.planar_vel = vbar
                table.position = table.position + vbar * dt
                table.yaw_rate = omega_dt / dt
                table.yaw = wrap_angle(table.yaw + omega_dt)
            else:
                table.planar_vel = np.zeros(2)
                table.yaw_rate = 0.0
            table.gripped = gripped
        else:
            table.planar_vel = np.zeros(2)
            table.yaw_rate = 0.0
            table.gripped = False
            if table.z > TABLE_Z_MIN:
                table.z = max(TABLE_Z_MIN, table.z - Z_RELAX_RATE * dt)

        world.t += 1
        # inline termination check on the already-stacked arrays
        if world.t >= cfg.episode_len:
            terminated, reason = True, "timeout"
        elif np.max(np.sum((roots - table.position) ** 2, axis=1)) > OUT_OF_BOUNDS**2:
            terminated, reason = True, "out_of_bounds"
        elif not (np.all(np.isfinite(roots)) and np.all(np.isfinite(hands))
                  and np.all(np.isfinite(new_headings))
                  and np.all(np.isfinite(table.position)) and np.isfinite(table.z)):
            terminated, reason = True, "non_finite"
        else:
            terminated, reason = False, None
        if terminated:
            self.done = True
            self.reason = reason
        if lean:
            return StepOutcome(None, None, None, None, terminated, reason)
        evaluation = evaluate_rewards(world, self.reward_weights,
                                      formation_only=self.formation_only)
        pairs = [style.extract_transition(p, a) for p, a in zip(prev_agents, world.agents)]
        obs = build_observations(world)
        return StepOutcome(obs, evaluation.breakdowns, pairs, evaluation.contacts,
                           terminated, reason)

    def check_termination(self):
        world = self.world
        if world.t >= self.config.episode_len:
            return True, "timeout"
        center = world.table.position
        for a in world.agents:
            if np.linalg.norm(a.root - center) > OUT_OF_BOUNDS:
                return True, "out_of_bounds"
        finite = all(
            np.all(np.isfinite(a.root)) and np.all(np.isfinite(a.hands))
            and np.isfinite(a.heading) for a in world.agents)
        if not (finite and np.all(np.isfinite(world.table.position))
                and np.isfinite(world.table.z)):
            return True, "non_finite"
        return False, None

    # -- observations --------------------------------------------------------

    def build_observation(self, i: int) -> AgentObservation:
        return build_observation(self.world, i)

    def interaction_indicator(self, i: int) -> float:
        return interaction_indicator(self.world, i)

    # -- snapshot / restore (bit-exact resume) -------------------------------

    def get_state(self) -> dict:
        return {
            "world": self.world.to_dict() if self.world is not None else None,
            "rng": self.rng.bit_generator.state,
            "done": self.done,
            "reason": self.reason,
        }

    def set_state(self, blob: dict) -> None:
        if blob["world"] is not None:
            self.world = WorldState.from_dict(blob["world"], self.geometry)
            self._bind_state_arrays()
        else:
            self.world = None
        self.rng.bit_generator.state = blob["rng"]
        self.done = blob["done"]
        self.reason = blob["reason"]


def build_observation(world: WorldState, i: int) -> AgentObservation:
    """Everything the observing agent sees, in its own frame (origin at the
    root, x along the heading)."""
    agent = world.agents[i]
    r_inv = rot2(-agent.heading)

    def local_xy(p):
        return r_inv @ (np.asarray(p) - agent.root)

    contact_pts = world.contact_points_world()
    center = world.table_center()

    d_root = np.linalg.norm(contact_pts[:, :2] - agent.root, axis=1)
    k = int(np.argmin(d_root))

    hands_rel = np.empty((2, 3))
    hands_rel[:, :2] = (agent.hands[:, :2] - agent.root) @ r_inv.T
    hands_rel[:, 2] = agent.hands[:, 2] - SHOULDER_HEIGHT

    d_hands = np.linalg.norm(contact_pts[None, :, :] - agent.hands[:, None, :], axis=2)
    nearest_hand_idx = np.argmin(d_hands, axis=1)
    own_grip = float(np.all(d_hands[np.arange(2), nearest_hand_idx] < CONTACT_GRIP))

    proprio = np.concatenate([
        r_inv @ agent.root_vel,
        [agent.heading_rate],
        hands_rel.ravel(),
        agent.hand_vels[:, 2],
        [float(np.linalg.norm(center - agent.root))],
        [own_grip, float(world.table.gripped)],
    ])

    order = (np.arange(len(contact_pts)) + k) % len(contact_pts)
    local_contacts = np.empty((len(contact_pts), 3))
    local_contacts[:, :2] = (contact_pts[order, :2] - agent.root) @ r_inv.T
    local_contacts[:, 2] = contact_pts[order, 2]

    hand_points = np.empty((2, 3))
    hand_points[:, :2] = (contact_pts[nearest_hand_idx, :2] - agent.root) @ r_inv.T
    hand_points[:, 2] = contact_pts[nearest_hand_idx, 2]

    putdown_flag = float(np.linalg.norm(world.target - center) < PUTDOWN_TRIGGER)
    target = np.concatenate([local_xy(world.target), [putdown_flag]])

    object_center = np.concatenate([local_xy(center), [world.table.z]])

    mates = np.empty((world.n_agents - 1, TEAMMATE_DIM))
    angles = [float(np.arctan2(*(a.root - center)[::-1])) for a in world.agents]
    row = 0
    for j, other in enumerate(world.agents):
        if j == i:
            continue
        rel_yaw = other.heading - agent.heading
        c, s = np.cos(rel_yaw), np.sin(rel_yaw)
        mates[row, 0:2] = local_xy(other.root)
        # first two columns of the 3D yaw rotation matrix
        mates[row, 2:8] = (c, s, 0.0, -s, c, 0.0)
        mates[row, 8] = wrap_angle(angles[j] - angles[i])
        row += 1

    return AgentObservation(proprio, object_center, local_contacts, hand_points,
                            target, mates)


def build_observations(world: WorldState) -> list:
    """Batched :func:`build_observation` for every agent (identical output,
    shared intermediate work)."""
    n = world.n_agents
    contact_pts = world.contact_points_world()
    nc = len(contact_pts)
    center = world.table_center()
    putdown_flag = float(np.linalg.norm(world.target - center) < PUTDOWN_TRIGGER)
    gripped = float(world.table.gripped)

    roots = np.stack([a.root for a in world.agents])
    headings = np.array([a.heading for a in world.agents])
    hands = np.stack([a.hands for a in world.agents])
    cos_h, sin_h = np.cos(-headings), np.sin(-headings)

    def to_local(i, pts_xy):
        d = np.atleast_2d(pts_xy) - roots[i]
        return np.stack([cos_h[i] * d[:, 0] - sin_h[i] * d[:, 1],
                         sin_h[i] * d[:, 0] + cos_h[i] * d[:, 1]], axis=1)

    d_root = np.linalg.norm(contact_pts[None, :, :2] - roots[:, None, :], axis=2)
    nearest_root = np.argmin(d_root, axis=1)
    d_hands = np.linalg.norm(contact_pts[None, None, :, :] - hands[:, :, None, :], axis=3)
    nearest_hand = np.argmin(d_hands, axis=2)
    rel_center = center - roots
    center_dist = np.linalg.norm(rel_center, axis=1)
    angles = np.arctan2(roots[:, 1] - center[1], roots[:, 0] - center[0])

    observations = []
    for i, agent in enumerate(world.agents):
        hands_rel = np.empty((2, 3))
        hands_rel[:, :2] = to_local(i, hands[i, :, :2])
        hands_rel[:, 2] = hands[i, :, 2] - SHOULDER_HEIGHT
        own_grip = float(np.all(d_hands[i, np.arange(2), nearest_hand[i]] < CONTACT_GRIP))
        vx, vy = agent.root_vel
        proprio = np.concatenate([
            [cos_h[i] * vx - sin_h[i] * vy, sin_h[i] * vx + cos_h[i] * vy],
            [agent.heading_rate],
            hands_rel.ravel(),
            agent.hand_vels[:, 2],
            [float(center_dist[i])],
            [own_grip, gripped],
        ])

        order = (np.arange(nc) + nearest_root[i]) % nc
        local_contacts = np.empty((nc, 3))
        local_contacts[:, :2] = to_local(i, contact_pts[order, :2])
        local_contacts[:, 2] = contact_pts[order, 2]

        hand_points = np.empty((2, 3))
        hand_points[:, :2] = to_local(i, contact_pts[nearest_hand[i], :2])
        hand_points[:, 2] = contact_pts[nearest_hand[i], 2]

        target = np.concatenate([to_local(i, world.target)[0], [putdown_flag]])
        object_center = np.concatenate([to_local(i, center)[0], [world.table.z]])

        mates = np.empty((n - 1, TEAMMATE_DIM))
        others = [j for j in range(n) if j != i]
        if others:
            mates[:, 0:2] = to_local(i, roots[others])
            rel_yaw = headings[others] - headings[i]
            cy, sy = np.cos(rel_yaw), np.sin(rel_yaw)
            mates[:, 2], mates[:, 3], mates[:, 4] = cy, sy, 0.0
            mates[:, 5], mates[:, 6], mates[:, 7] = -sy, cy, 0.0
            mates[:, 8] = [wrap_angle(angles[j] - angles[i]) for j in others]

        observations.append(AgentObservation(proprio, object_center, local_contacts,
                                             hand_points, target, mates))
    return observations


def interaction_indicator(world: WorldState, i: int) -> float:
    """Continuous interaction indicator: positive within 1 m of the nearest
    perimeter point, scaled so that sigma(alpha) ramps over ~0.2 m."""
    agent = world.agents[i]
    contact_pts = world.contact_points_world()
    d = float(np.min(np.linalg.norm(contact_pts[:, :2] - agent.root, axis=1)))
    return (1.0 - d) / 0.2
