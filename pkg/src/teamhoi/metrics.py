"""Evaluation: success rate, final object-target distance, cooperative time
ratio, and mean absolute contact-point jerk, plus the batch evaluation runner
and a scripted oracle controller used to validate the whole harness.

All metrics are pure functions of trajectory snapshots (lists of WorldState),
so they can be recomputed from dumped trajectories.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .env import ACTION_DIM, CarryEnv, EnvConfig
from .geometry import TableSpec
from .policy import batch_observations
from .rewards import CONTACT_GRIP, PUTDOWN_TRIGGER
from .world import WorldState, rot2, wrap_angle

SUCCESS_DIST = 0.03
REPORTED_SUCCESS_D = 0.03

PAPER_TABLES = {
    "round": 2.0,  # diameter
    "square": 1.6,
    "rectangle": (2.0, 1.2),
}


def table_for_shape(shape: str, mass_scale: float = 1.0) -> TableSpec:
    if shape not in PAPER_TABLES:
        raise ValueError(f"unknown table shape {shape!r}; expected one of "
                         f"{sorted(PAPER_TABLES)}")
    return TableSpec(shape=shape, dimensions=PAPER_TABLES[shape],
                     mass_scale=mass_scale)


@dataclass
class EpisodeMetrics:
    success: bool
    d_final: float
    t_coop: float
    jerk: float | None
    team_size: int
    shape: str
    seed: int

    def to_dict(self) -> dict:
        return {"success": self.success, "d_final": self.d_final,
                "t_coop": self.t_coop, "jerk": self.jerk,
                "team_size": self.team_size, "shape": self.shape,
                "seed": self.seed}


@dataclass
class AggregateRow:
    team_size: int
    shape: str
    sr_percent: float
    mean_d: float
    mean_t_coop_percent: float
    mean_jerk: float  # NaN when undefined for every episode
    episodes: int

    def to_dict(self) -> dict:
        return {"team_size": self.team_size, "shape": self.shape,
                "sr_percent": self.sr_percent, "mean_d": self.mean_d,
                "mean_t_coop_percent": self.mean_t_coop_percent,
                "mean_jerk": self.mean_jerk, "episodes": self.episodes}


@dataclass
class AggregateReport:
    rows: list  # AggregateRow per (team_size, shape)
    episodes: list  # EpisodeMetrics

    def to_dict(self) -> dict:
        return {"rows": [r.to_dict() for r in self.rows],
                "episodes": [e.to_dict() for e in self.episodes]}


# -- per-episode metrics -------------------------------------------------------


def _object_target_distances(trajectory) -> np.ndarray:
    return np.array([float(np.linalg.norm(w.target - w.table_center()))
                     for w in trajectory])


def _all_grip_flags(trajectory, require_both_hands: bool):
    """Per snapshot: does every agent satisfy the contact condition?
    Vectorized over the whole trajectory."""
    pts = np.stack([w.contact_points_world() for w in trajectory])  # (T, nc, 3)
    hands = np.stack([[a.hands for a in w.agents] for w in trajectory])  # (T, n, 2, 3)
    diff = pts[:, None, None, :, :] - hands[:, :, :, None, :]
    d_sq = np.min(np.einsum("tnhcx,tnhcx->tnhc", diff, diff), axis=3)
    hit = d_sq < CONTACT_GRIP**2  # (T, n, 2)
    per_agent = hit.all(axis=2) if require_both_hands else hit.any(axis=2)
    return per_agent.all(axis=1)


def transport_window(trajectory):
    """[start, end) snapshot indices of the transport phase: from the first
    step with every hand of every agent gripping, to the putdown trigger
    (object within 0.03 m of the target) or the episode end. None when the
    team never establishes a full grip."""
    full_grip = _all_grip_flags(trajectory, require_both_hands=True)
    if not np.any(full_grip):
        return None
    start = int(np.argmax(full_grip))
    dists = _object_target_distances(trajectory)
    end = len(trajectory)
    for t in range(start, len(trajectory)):
        if dists[t] < PUTDOWN_TRIGGER:
            end = t + 1
            break
    return start, end


def success_and_distance(trajectory):
    """Success when the object-target distance ever reaches 0.03 m; d is
    reported as 0.03 for successes and as the terminal distance otherwise."""
    if not trajectory:
        raise ValueError("empty trajectory")
    dists = _object_target_distances(trajectory)
    success = bool(np.min(dists) <= SUCCESS_DIST)
    return success, REPORTED_SUCCESS_D if success else float(dists[-1])


def cooperative_time_ratio(trajectory, require_both_hands: bool = False,
                           window=None) -> float:
    """Fraction of the transport window during which every agent keeps at
    least one hand (optionally both) on some contact point."""
    if window is None:
        window = transport_window(trajectory)
    if window is None:
        return 0.0
    start, end = window
    if end <= start:
        return 0.0
    flags = _all_grip_flags(trajectory[start:end], require_both_hands)
    return float(np.mean(flags))


def mean_abs_jerk(trajectory, dt: float, window=None) -> float | None:
    """Mean magnitude of the third finite difference of every contact point's
    world position over the transport window, divided by dt^3. Windows
    shorter than 4 steps have no estimate and return None."""
    if window is None:
        window = transport_window(trajectory)
    if window is None:
        return None
    start, end = window
    if end - start < 4:
        return None
    pts = np.stack([trajectory[t].contact_points_world() for t in range(start, end)])
    third = pts[3:] - 3.0 * pts[2:-1] + 3.0 * pts[1:-2] - pts[:-3]
    jerk = np.linalg.norm(third, axis=2) / dt**3
    return float(np.mean(jerk))


def episode_metrics(trajectory, dt: float, team_size: int, shape: str,
                    seed: int) -> EpisodeMetrics:
    success, d_final = success_and_distance(trajectory)
    window = transport_window(trajectory)
    return EpisodeMetrics(
        success=success,
        d_final=d_final,
        t_coop=cooperative_time_ratio(trajectory, window=window),
        jerk=mean_abs_jerk(trajectory, dt, window=window),
        team_size=team_size,
        shape=shape,
        seed=seed,
    )


# -- controllers ----------------------------------------------------------------


class OracleController:
    """Scripted full-task controller: proportional navigation to evenly
    spaced perimeter slots, hand descent onto the contact points, a
    synchronized lift, a straight-line kinematic carry, and release. Serves
    as a 100%-success ground truth for the environment and metrics."""

    APPROACH_SPEED = 2.0
    CARRY_SPEED = 1.5
    LIFT_RATE = 0.35  # m/s hand rise while lifting

    def __init__(self):
        self._slots = None
        self._hand_ids = None
        self._putdown = False
        self._done = False

    def reset(self, env: CarryEnv) -> None:
        world = env.world
        n = world.n_agents
        sampling = env.geometry.sampling
        nc = len(sampling)
        per_slot = nc / n
        slot_indices = [int(round((i + 0.5) * per_slot)) % nc for i in range(n)]

        # match agents to slots in circular order, trying every cyclic offset
        center = world.table.position
        agent_angles = [float(np.arctan2(*(a.root - center)[::-1])) for a in world.agents]
        slot_world = sampling.points @ rot2(world.table.yaw).T + center
        slot_angles = [float(np.arctan2(*(slot_world[k] - center)[::-1]))
                       for k in slot_indices]
        agent_order = np.argsort(agent_angles)
        slot_order = np.argsort(slot_angles)
        best, best_cost = None, np.inf
        for off in range(n):
            cost = 0.0
            pairing = {}
            for r, ai in enumerate(agent_order):
                si = slot_order[(r + off) % n]
                pairing[int(ai)] = slot_indices[si]
                cost += abs(wrap_angle(agent_angles[ai] - slot_angles[si]))
            if cost < best_cost:
                best, best_cost = pairing, cost
        self._slots = np.array([best[i] for i in range(n)])
        self._hand_ids = np.stack([(self._slots - 2) % nc,
                                   (self._slots + 2) % nc], axis=1)  # [L, R]
        self._putdown = False
        self._done = False

    def act(self, env: CarryEnv) -> np.ndarray:
        world = env.world
        dt = env.config.dt
        n = world.n_agents
        if self._done:
            # task finished and hands released; everyone stands still
            return np.zeros((n, ACTION_DIM))
        table = world.table
        contact_pts = world.contact_points_world()
        sampling = env.geometry.sampling

        roots = np.stack([a.root for a in world.agents])
        vels = np.stack([a.root_vel for a in world.agents])
        headings = np.array([a.heading for a in world.agents])
        hands = np.stack([a.hands for a in world.agents])
        facings = np.stack([a.facing for a in world.agents])

        center = world.table_center()
        if float(np.linalg.norm(world.target - center)) < PUTDOWN_TRIGGER:
            self._putdown = True

        d_hand = np.linalg.norm(contact_pts[None, None, :, :] - hands[:, :, None, :],
                                axis=3).min(axis=2)  # (n, 2)
        all_gripped = bool(np.all(d_hand < CONTACT_GRIP))
        carrying = table.gripped and table.z >= 0.93

        r_yaw = rot2(table.yaw)
        slot_pts = sampling.points[self._slots] @ r_yaw.T + table.position
        inward = sampling.inward_normals[self._slots] @ r_yaw.T
        stand = slot_pts - 0.3 * inward
        to_stand = stand - roots
        dist_stand = np.linalg.norm(to_stand, axis=1)
        face_inward = np.arctan2(inward[:, 1], inward[:, 0])

        hand_targets = contact_pts[self._hand_ids].copy()  # (n, 2, 3)
        v_des = np.zeros((n, 2))
        heading_des = headings.copy()

        if self._putdown:
            if table.z > 0.821 and all_gripped:
                hand_targets[:, :, 2] = table.z - self.LIFT_RATE * dt
            else:
                # release: retreat horizontally at low height first (so the
                # table is not dragged back up), then raise
                if (np.all(d_hand > 0.2)
                        and np.all(np.linalg.norm(vels, axis=1) < 0.05)):
                    self._done = True
                    return np.zeros((n, ACTION_DIM))
                back = roots - 0.35 * inward
                hand_targets[:, :, :2] = back[:, None, :]
                hand_targets[:, :, 2] = np.where(
                    np.any(d_hand < 0.12, axis=1), 0.78, 1.0)[:, None]
        elif carrying:
            direction = world.target - center
            dist = float(np.linalg.norm(direction))
            if dist > 1e-9:
                v_des[:] = (direction / dist) * min(self.CARRY_SPEED, 2.5 * dist)
            hand_targets[:, :, 2] = table.z
        elif all_gripped:
            # lift: raise the hands together; the table follows their mean
            hand_targets[:, :, 2] = min(0.94, table.z + self.LIFT_RATE * dt)
            heading_des = face_inward
        else:
            reach = (dist_stand < 0.08) & (np.linalg.norm(vels, axis=1) < 0.5)
            hand_targets[:, :, 2] = table.z
            walk = ~reach
            scale = np.minimum(self.APPROACH_SPEED, 3.0 * dist_stand) \
                / np.maximum(dist_stand, 1e-9)
            v_des[walk] = to_stand[walk] * scale[walk, None]
            neutral = roots + 0.25 * facings
            hand_targets[walk, :, :2] = neutral[walk][:, None, :]
            hand_targets[walk, :, 2] = 1.0
            heading_des = face_inward

        # the body ride and the table's own motion cancel during carry, so a
        # plain position servo keeps the hands glued to their contacts
        actions = np.zeros((n, ACTION_DIM))
        c, s = np.cos(headings), np.sin(headings)
        accel = (v_des - vels) / dt + 0.5 * vels
        actions[:, 0] = np.clip((c * accel[:, 0] + s * accel[:, 1]) / 4.0, -1.0, 1.0)
        actions[:, 1] = np.clip((-s * accel[:, 0] + c * accel[:, 1]) / 4.0, -1.0, 1.0)
        dh = np.array([wrap_angle(x) for x in heading_des - headings])
        actions[:, 2] = np.clip(dh / (2.0 * dt), -1.0, 1.0)
        cmd = (hand_targets - hands) / dt  # (n, 2, 3) world frame
        local = np.empty_like(cmd)
        local[:, :, 0] = c[:, None] * cmd[:, :, 0] + s[:, None] * cmd[:, :, 1]
        local[:, :, 1] = -s[:, None] * cmd[:, :, 0] + c[:, None] * cmd[:, :, 1]
        local[:, :, 2] = cmd[:, :, 2]
        actions[:, 3:9] = np.clip(local / 1.5, -1.0, 1.0).reshape(n, 6)
        return actions


class RandomPolicy:
    """Uniform actions in [-1, 1]; the zero-skill baseline."""

    def __init__(self, seed: int = 0):
        self.rng = np.random.default_rng(seed)

    def reset(self, env: CarryEnv) -> None:
        pass

    def act(self, env: CarryEnv) -> np.ndarray:
        return self.rng.uniform(-1.0, 1.0, size=(env.config.team_size, ACTION_DIM))


class ZeroPolicy:
    """No-op actions; the table never moves."""

    def reset(self, env: CarryEnv) -> None:
        pass

    def act(self, env: CarryEnv) -> np.ndarray:
        return np.zeros((env.config.team_size, ACTION_DIM))


class CheckpointPolicy:
    """Deterministic mean actions from a trained actor network."""

    def __init__(self, actor, mask_target: bool = False):
        self.actor = actor
        self.mask_target = mask_target

    def reset(self, env: CarryEnv) -> None:
        pass

    def act(self, env: CarryEnv) -> np.ndarray:
        obs = [env.build_observation(i) for i in range(env.config.team_size)]
        with torch.no_grad():
            mean = self.actor(*batch_observations(obs), mask_target=self.mask_target)
        return mean.numpy()


def make_policy(name: str, checkpoint_path: str | None = None, seed: int = 0):
    if name == "oracle":
        return OracleController()
    if name == "random":
        return RandomPolicy(seed)
    if name == "zero":
        return ZeroPolicy()
    if name == "checkpoint":
        from .policy import load_checkpoint

        actor, _, _ = load_checkpoint(checkpoint_path)
        actor.eval()
        return CheckpointPolicy(actor)
    raise ValueError(f"unknown policy {name!r}")


# -- batch evaluation ------------------------------------------------------------


def run_episode(env: CarryEnv, policy, seed: int, lean: bool = True):
    """One seeded episode under the given controller; returns the trajectory
    snapshots (initial state included). ``lean`` skips per-step reward and
    observation construction inside the env (metrics recompute from the
    snapshots; observation-driven policies need lean=False)."""
    env.reset(seed=seed)
    policy.reset(env)
    trajectory = [env.world.copy()]
    while True:
        outcome = env.step(policy.act(env), lean=lean)
        trajectory.append(env.world.copy())
        if outcome.terminated:
            break
    return trajectory


def evaluate(policy, env_template: EnvConfig, team_sizes, shapes, episodes: int,
             seed: int = 0, mass_scale: float = 1.0) -> AggregateReport:
    """Seeded episode grid over (team_size, shape); deterministic fold
    ordered by seed."""
    all_eps = []
    rows = []
    for n in team_sizes:
        for shape in shapes:
            cfg = EnvConfig.from_dict({
                **env_template.to_dict(),
                "team_size": int(n),
                "table": table_for_shape(shape, mass_scale).to_dict(),
            })
            env = CarryEnv(cfg)
            eps = []
            for e in range(episodes):
                ep_seed = int(np.random.SeedSequence([seed, n, hash(shape) & 0xFFFF, e])
                              .generate_state(1)[0])
                trajectory = run_episode(env, policy, ep_seed)
                eps.append(episode_metrics(trajectory, cfg.dt, n, shape, ep_seed))
            jerks = [m.jerk for m in eps if m.jerk is not None]
            rows.append(AggregateRow(
                team_size=int(n),
                shape=shape,
                sr_percent=100.0 * float(np.mean([m.success for m in eps])),
                mean_d=float(np.mean([m.d_final for m in eps])),
                mean_t_coop_percent=100.0 * float(np.mean([m.t_coop for m in eps])),
                mean_jerk=float(np.mean(jerks)) if jerks else float("nan"),
                episodes=episodes,
            ))
            all_eps.extend(eps)
    return AggregateReport(rows=rows, episodes=all_eps)


def write_report_csv(report: AggregateReport, path) -> None:
    import csv

    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["team_size", "shape", "sr_percent", "mean_d",
                         "mean_t_coop_percent", "mean_jerk", "episodes"])
        for r in report.rows:
            writer.writerow([r.team_size, r.shape, r.sr_percent, r.mean_d,
                             r.mean_t_coop_percent, r.mean_jerk, r.episodes])


def write_report_json(report: AggregateReport, path, per_episode: bool = False) -> None:
    import json

    doc = {"rows": [r.to_dict() for r in report.rows]}
    if per_episode:
        doc["episodes"] = [e.to_dict() for e in report.episodes]
    with open(path, "w") as f:
        json.dump(doc, f, indent=2)


def write_episodes_jsonl(report: AggregateReport, path) -> None:
    import json

    with open(path, "w") as f:
        for e in report.episodes:
            f.write(json.dumps(e.to_dict()) + "\n")
