"""Task reward stack for cooperative carrying: walking shaping, formation
(angular spread + principal-axes coverage), hand preparation, contact,
lifting, transport, alignment, and putdown, plus the weighted aggregate.

Every function is pure; :func:`evaluate_rewards` computes the per-agent
breakdown for one :class:`~teamhoi.world.WorldState`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields

import numpy as np

from .world import WorldState

TARGET_GAP = 0.3  # preferred root-to-perimeter standing gap (m)
# squared-deviation band treated as "at the gap"; the epsilon keeps the
# boundary d = 0.5 inside the band despite (0.5 - 0.3)**2 rounding up
GAP_TOL_SQ = 0.04 + 1e-12
SPEED_LOW, SPEED_HIGH = 1.5, 2.5  # preferred approach speed band (m/s)
NEAR_TABLE_DIST = 1.0  # root-to-perimeter gate for hand/contact/lift (m)
CONTACT_FALLOFF = 0.06  # hand-contact score reaches 0 here (m)
CONTACT_GRIP = 0.04  # hand-contact distance counted as a grip (m)
LIFT_TARGET_Z = 0.94  # contact-point height the team should lift to (m)
SEP_LOW, SEP_HIGH = 0.4, 0.6  # preferred horizontal hand separation (m)
ALIGN_NEAR = 0.5  # object-target distance where alignment stops mattering (m)
PUTDOWN_TRIGGER = 0.03  # object-target distance that starts the putdown (m)
RELEASE_DIST = 0.07  # hand-contact distance counted as released (m)
PUTDOWN_HAND_Z = 0.65  # target hand height while putting down (m)


@dataclass
class RewardWeights:
    """Aggregation weights of the total task reward plus the angular-spread
    sharpness k_theta."""

    w_walk_pos: float = 0.2
    w_walk_vel: float = 0.4
    w_face_ang: float = 0.2
    w_form: float = 0.6
    w_hand_cov: float = 0.7
    w_contact: float = 0.7
    w_lift_cov: float = 0.7
    w_transport: float = 1.0
    w_align: float = 0.4
    w_put: float = 1.0
    k_theta: float = 2.0

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"{f.name} must be >= 0")

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "RewardWeights":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown reward weight fields: {sorted(unknown)}")
        return cls(**d)


@dataclass
class ContactState:
    """Per-hand contact info for one agent: 3D distance to the nearest
    contact point, linear contact score gamma, grip flag m, the contact
    index, and the height of that contact point."""

    dists: np.ndarray  # (2,) [L, R]
    gammas: np.ndarray  # (2,)
    grips: np.ndarray  # (2,) 0/1 ints
    indices: np.ndarray  # (2,) ints
    contact_z: np.ndarray  # (2,)

    @property
    def both_gripped(self) -> bool:
        return bool(self.grips[0] and self.grips[1])


@dataclass
class RewardBreakdown:
    """Every sub-reward for one agent at one step, plus the aggregate."""

    r_walk_pos: float = 0.0
    r_walk_vel: float = 0.0
    r_walk_face: float = 0.0
    r_ang: float = 0.0
    r_cov: float = 0.0
    r_form: float = 0.0
    r_hand: float = 0.0
    r_prox: float = 0.0
    r_above: float = 0.0
    r_sep: float = 0.0
    r_same_z: float = 0.0
    r_contact: float = 0.0
    r_lift: float = 0.0
    r_transport: float = 0.0
    r_align: float = 0.0
    r_put: float = 0.0
    r_put_release: float = 0.0
    r_put_vel: float = 0.0
    r_task: float = 0.0

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def walk_position(d: float) -> float:
    """Standing-gap reward: 1 inside the (d - 0.3)^2 <= 0.04 band, else a
    squared-deviation exponential."""
    delta = (d - TARGET_GAP) ** 2
    return 1.0 if delta <= GAP_TOL_SQ else math.exp(-2.0 * delta)


def walk_velocity(v, u_star, delta_gap: float) -> float:
    """Approach-speed reward: zero when retreating, saturated once standing
    at the gap, otherwise a band penalty on the inward speed."""
    s = float(np.dot(u_star, v))
    if s <= 0.0:
        return 0.0
    if delta_gap <= GAP_TOL_SQ:
        return 1.0
    dv = max(0.0, SPEED_LOW - s) + max(0.0, s - SPEED_HIGH)
    return math.exp(-2.0 * dv * dv)


def walk_facing(f, u_star, c_star, d: float, transport_active: bool) -> float:
    """Facing reward: the inward normal up close, the center direction from
    afar, and unconditionally 1 while the team is transporting."""
    if transport_active:
        return 1.0
    if d <= NEAR_TABLE_DIST:
        return max(0.0, float(np.dot(u_star, f)))
    return max(0.0, float(np.dot(c_star, f)))


def angular_spread(roots, center, i: int, k_theta: float) -> float:
    """Gaussian reward on the deviation of agent i's two neighbor gaps about
    the center from the ideal 2*pi/m spacing. A lone agent scores 1."""
    m = len(roots)
    if m < 1:
        raise ValueError("angular_spread needs at least one agent")
    if m == 1:
        return 1.0
    center = np.asarray(center, dtype=float)
    rel = np.asarray(roots, dtype=float) - center
    # coincident with the center: degenerate, angle treated as 0
    ang = np.arctan2(rel[:, 1], rel[:, 0])
    ideal = 2.0 * np.pi / m
    others = np.delete(ang, i)
    diffs = (others - ang[i]) % (2.0 * np.pi)
    gap_ccw = float(np.min(diffs)) if len(diffs) else 2.0 * np.pi
    gap_cw = float(np.min((-diffs) % (2.0 * np.pi))) if len(diffs) else 2.0 * np.pi
    err = 0.5 * ((gap_ccw - ideal) ** 2 + (gap_cw - ideal) ** 2)
    return math.exp(-k_theta * err)


def formation(r_ang: float, r_cov: float) -> float:
    return 0.25 * r_ang + 0.75 * r_cov


def hand_preparation(hands, contact_points, gate: bool, _nearest=None):
    """Product of proximity, approach-from-below, separation, and equal-height
    terms. Returns (r_hand, r_prox, r_above, r_sep, r_same_z); r_hand is zero
    when the near-table gate is off (sub-terms still reported)."""
    hands = np.asarray(hands, dtype=float).reshape(2, 3)
    if _nearest is None:
        d = np.linalg.norm(contact_points[None, :, :] - hands[:, None, :], axis=2)
        nearest = np.argmin(d, axis=1)
        d_hand = d[np.arange(2), nearest]
    else:
        nearest, d_hand = _nearest
    r_prox = 0.5 * float(np.sum(np.exp(-5.0 * d_hand)))

    r_above_terms = []
    for j in range(2):
        v = hands[j] - contact_points[nearest[j]]
        norm = np.linalg.norm(v)
        cos_t = 0.0 if norm == 0.0 else float(v[2] / norm)
        r_above_terms.append(math.exp(-3.0 * cos_t) if cos_t > 0.0 else 1.0)
    r_above = 0.5 * sum(r_above_terms)

    d_xy = float(np.linalg.norm(hands[0, :2] - hands[1, :2]))
    delta = max(0.0, SEP_LOW - d_xy) + max(0.0, d_xy - SEP_HIGH)
    r_sep = math.exp(-5.0 * delta * delta)
    r_same_z = math.exp(-20.0 * (hands[0, 2] - hands[1, 2]) ** 2)

    r_hand = r_prox * r_above * r_sep * r_same_z if gate else 0.0
    return r_hand, r_prox, r_above, r_sep, r_same_z


def contact(hands, contact_points, _nearest=None) -> ContactState:
    """Per-hand contact scores gamma = max(0, 1 - d/0.06) and grip flags
    m = [d < 0.04]."""
    hands = np.asarray(hands, dtype=float).reshape(2, 3)
    if _nearest is None:
        d = np.linalg.norm(contact_points[None, :, :] - hands[:, None, :], axis=2)
        nearest = np.argmin(d, axis=1)
        d_hand = d[np.arange(2), nearest]
    else:
        nearest, d_hand = _nearest
    gammas = np.maximum(0.0, 1.0 - d_hand / CONTACT_FALLOFF)
    grips = (d_hand < CONTACT_GRIP).astype(int)
    contact_z = contact_points[nearest, 2]
    return ContactState(d_hand, gammas, grips, nearest, contact_z)


def contact_reward(state: ContactState) -> float:
    return float(np.min(state.gammas))


def lift(state: ContactState, z_target: float = LIFT_TARGET_Z) -> float:
    """Height shaping on gripped contact points only."""
    rho = np.exp(-5.0 * np.abs(state.contact_z - z_target))
    return 0.5 * float(np.sum(state.grips * rho))


def transport(x_obj, x_tar, all_gripped: bool) -> float:
    if not all_gripped:
        return 0.0
    dist_sq = float(np.sum((np.asarray(x_tar) - np.asarray(x_obj)) ** 2))
    return math.exp(-0.15 * dist_sq)


def alignment(facings, roots, x_obj, x_tar, all_gripped: bool) -> float:
    """Shared reward asking the agent farthest from the target to face the
    transport direction; saturates once the object is nearly there."""
    if not all_gripped:
        return 0.0
    to_target = np.asarray(x_tar, dtype=float) - np.asarray(x_obj, dtype=float)
    dist = float(np.linalg.norm(to_target))
    if dist < ALIGN_NEAR:
        return 1.0
    u_tar = to_target / dist
    d_agents = np.linalg.norm(np.asarray(roots) - np.asarray(x_tar), axis=1)
    far = int(np.argmax(d_agents))  # argmax ties resolve to the lowest index
    return max(0.0, float(np.dot(u_tar, facings[far])))


def putdown(contact_state: ContactState, hand_z, root_vel, active: bool) -> tuple:
    """(r_put, release, vel): hands either fully released or lowered to the
    putdown height, while the root comes to rest. Zero unless the object has
    reached the target."""
    if not active:
        return 0.0, 0.0, 0.0
    if np.all(contact_state.dists > RELEASE_DIST):
        release = 1.0
    else:
        release = float(np.min(np.exp(-5.0 * np.abs(np.asarray(hand_z) - PUTDOWN_HAND_Z))))
    vel = math.exp(-2.0 * float(np.linalg.norm(root_vel)))
    return 0.8 * release + 0.2 * vel, release, vel


def total_task(b: RewardBreakdown, w: RewardWeights) -> float:
    """Weighted aggregate with the documented couplings: the facing/spread
    geometric mean and the coverage-gated hand and lift terms."""
    return (
        w.w_walk_pos * b.r_walk_pos
        + w.w_walk_vel * b.r_walk_vel
        + w.w_face_ang * math.sqrt(b.r_walk_face * b.r_ang)
        + w.w_form * b.r_form
        + w.w_hand_cov * (b.r_hand * b.r_cov)
        + w.w_contact * b.r_contact
        + w.w_lift_cov * (b.r_lift * b.r_cov)
        + w.w_transport * b.r_transport
        + w.w_align * b.r_align
        + w.w_put * b.r_put
    )


def approach_angle(x_root, x_obj, p_des) -> float:
    """Cosine-similarity shaping between the object-to-agent and the
    object-to-designated-point directions, mapped to [0, 1]."""
    a = np.asarray(x_root, dtype=float) - np.asarray(x_obj, dtype=float)
    p = np.asarray(p_des, dtype=float) - np.asarray(x_obj, dtype=float)
    na, np_ = np.linalg.norm(a), np.linalg.norm(p)
    if na == 0.0 or np_ == 0.0:
        raise ValueError("agent or designated point coincides with the object center")
    return (float(np.dot(a, p)) / (na * np_) + 1.0) / 2.0


@dataclass
class SceneEvaluation:
    """Reward breakdowns for all agents plus the shared geometric internals."""

    breakdowns: list
    contacts: list  # ContactState per agent
    all_gripped: bool
    g1: float
    g2: float
    r_cov: float
    putdown_active: bool


def evaluate_rewards(world: WorldState, weights: RewardWeights | None = None,
                     formation_only: bool = False) -> SceneEvaluation:
    """Per-agent reward breakdowns for one world state.

    ``formation_only`` zeroes the transport, alignment, and putdown rewards
    (the staged-training gate); everything else is unaffected.
    """
    w = weights or RewardWeights()
    contact_pts = world.contact_points_world()
    normals_w = world.inward_normals_world()
    sampling_pts_w = contact_pts[:, :2]
    center = world.table_center()
    roots = np.stack([a.root for a in world.agents])
    facings = [a.facing for a in world.agents]

    all_hands = np.stack([a.hands for a in world.agents])  # (n, 2, 3)
    d_all = np.linalg.norm(contact_pts[None, None, :, :] - all_hands[:, :, None, :],
                           axis=3)
    nearest_all = np.argmin(d_all, axis=2)
    d_hand_all = np.take_along_axis(d_all, nearest_all[:, :, None], axis=2)[:, :, 0]
    contacts = [contact(a.hands, contact_pts, (nearest_all[i], d_hand_all[i]))
                for i, a in enumerate(world.agents)]
    all_gripped = all(c.both_gripped for c in contacts)
    d_roots = np.linalg.norm(sampling_pts_w[None, :, :] - roots[:, None, :], axis=2)

    g1, g2, r_cov = world.geometry.coverage(world.roots_table_frame())

    obj_target_dist = float(np.linalg.norm(world.target - center))
    putdown_active = obj_target_dist < PUTDOWN_TRIGGER
    r_transport = transport(center, world.target, all_gripped)
    if formation_only:
        r_transport = 0.0
        r_align = 0.0
    else:
        r_align = alignment(facings, roots, center, world.target, all_gripped)

    breakdowns = []
    for i, agent in enumerate(world.agents):
        k = int(np.argmin(d_roots[i]))
        d = float(d_roots[i, k])
        u_star = normals_w[k]
        to_center = center - agent.root
        nc = np.linalg.norm(to_center)
        c_star = to_center / nc if nc > 0 else np.zeros(2)

        b = RewardBreakdown()
        delta_gap = (d - TARGET_GAP) ** 2
        b.r_walk_pos = walk_position(d)
        b.r_walk_vel = walk_velocity(agent.root_vel, u_star, delta_gap)
        b.r_walk_face = walk_facing(agent.facing, u_star, c_star, d, all_gripped)
        b.r_ang = angular_spread(roots, center, i, w.k_theta)
        b.r_cov = r_cov
        b.r_form = formation(b.r_ang, r_cov)

        near = d <= NEAR_TABLE_DIST
        (b.r_hand, b.r_prox, b.r_above, b.r_sep, b.r_same_z) = hand_preparation(
            agent.hands, contact_pts, gate=near,
            _nearest=(nearest_all[i], d_hand_all[i]))
        b.r_contact = contact_reward(contacts[i]) if near else 0.0
        b.r_lift = lift(contacts[i]) if near else 0.0
        b.r_transport = r_transport
        b.r_align = r_align
        if formation_only:
            b.r_put, b.r_put_release, b.r_put_vel = 0.0, 0.0, 0.0
        else:
            b.r_put, b.r_put_release, b.r_put_vel = putdown(
                contacts[i], agent.hands[:, 2], agent.root_vel, putdown_active)
        b.r_task = total_task(b, w)
        breakdowns.append(b)

    return SceneEvaluation(breakdowns, contacts, all_gripped, g1, g2, r_cov,
                           putdown_active)
