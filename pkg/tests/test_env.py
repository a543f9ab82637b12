"""Environment tests: seeded determinism, spawn/target protocol, surrogate
dynamics (drag, grip gating, kinematic carry), local-frame observations, and
termination."""

import numpy as np
import pytest

from teamhoi.env import (ACTION_DIM, CarryEnv, EnvConfig, EnvError,
                         build_observation, build_observations,
                         interaction_indicator)
from teamhoi.geometry import TableSpec
from teamhoi.metrics import table_for_shape
from teamhoi.world import AgentState, TableState, WorldState, rot2


def make_env(team_size=2, shape="square", seed=0, episode_len=600, mass_scale=1.0):
    return CarryEnv(EnvConfig(team_size=team_size,
                              table=table_for_shape(shape, mass_scale),
                              episode_len=episode_len, seed=seed))


def inject_world(env: CarryEnv, agents, table=None, target=(5.0, 0.0), t=0):
    world = WorldState(agents=agents, table=table or TableState(),
                       geometry=env.geometry, target=target, t=t)
    env.set_state({"world": world.to_dict(), "rng": env.rng.bit_generator.state,
                   "done": False, "reason": None})
    return env.world


def gripped_agents(env, z=0.94):
    """Two agents standing at the grip with hands exactly on contact points."""
    samp = env.geometry.sampling
    agents = []
    for k in (8, 40):  # bottom / top edge midpoints of the square table
        p = samp.points[k]
        u = samp.inward_normals[k]
        root = p - 0.3 * u
        heading = float(np.arctan2(u[1], u[0]))
        hands = np.array([
            [samp.points[(k - 2) % 64][0], samp.points[(k - 2) % 64][1], z],
            [samp.points[(k + 2) % 64][0], samp.points[(k + 2) % 64][1], z],
        ])
        agents.append(AgentState(root=root, heading=heading, hands=hands))
    return agents


class TestReset:
    def test_deterministic(self):
        a = make_env(team_size=3, seed=42)
        b = make_env(team_size=3, seed=42)
        a.reset()
        b.reset()
        for x, y in zip(a.world.agents, b.world.agents):
            assert np.array_equal(x.root, y.root)
            assert x.heading == y.heading
        assert np.array_equal(a.world.target, b.world.target)

    def test_spawn_radius_exact(self):
        env = make_env(team_size=8, seed=1)
        env.reset()
        for a in env.world.agents:
            assert np.linalg.norm(a.root) == pytest.approx(8.0, abs=1e-9)

    def test_headings_face_center(self):
        env = make_env(team_size=4, seed=2)
        env.reset()
        for a in env.world.agents:
            toward = -a.root / np.linalg.norm(a.root)
            assert np.dot(a.facing, toward) == pytest.approx(1.0, abs=1e-9)

    def test_min_arc_separation(self):
        env = make_env(team_size=8, seed=3)
        for trial in range(50):
            env.reset(seed=trial)
            ang = np.sort([np.arctan2(a.root[1], a.root[0])
                           for a in env.world.agents])
            gaps = np.diff(np.concatenate([ang, [ang[0] + 2 * np.pi]]))
            assert np.min(gaps) * 8.0 >= 0.5 - 1e-9

    def test_target_distance_range(self):
        env = make_env(team_size=2, seed=4)
        dists = []
        for trial in range(500):
            env.reset(seed=trial)
            dists.append(np.linalg.norm(env.world.target))
        dists = np.array(dists)
        assert np.all((dists >= 3.0) & (dists <= 10.0))
        assert dists.min() < 4.0 and dists.max() > 9.0

    def test_table_at_origin_resting(self):
        env = make_env(seed=5)
        env.reset()
        assert np.array_equal(env.world.table.position, [0.0, 0.0])
        assert env.world.table.z == 0.82

    def test_spawn_radius_validation(self):
        with pytest.raises(ValueError):
            EnvConfig(team_size=2, table=TableSpec(shape="round", dimensions=2.0),
                      spawn_radius=1.5)

    def test_team_size_validation(self):
        with pytest.raises(ValueError):
            EnvConfig(team_size=0)
        with pytest.raises(ValueError):
            EnvConfig(team_size=17)

    def test_unknown_config_key_rejected(self):
        with pytest.raises(ValueError):
            EnvConfig.from_dict({"team_size": 2, "bogus": 1})


class TestStepDynamics:
    def test_zero_actions_fixed_point(self):
        env = make_env(seed=6)
        env.reset()
        before = env.world.to_dict()
        env.step(np.zeros((2, ACTION_DIM)))
        after = env.world.to_dict()
        for a0, a1 in zip(before["agents"], after["agents"]):
            assert a0 == a1
        assert after["table"]["z"] == 0.82

    def test_z_relaxation(self):
        env = make_env(seed=7)
        env.reset()
        env.world.table.z = 1.0
        env.step(np.zeros((2, ACTION_DIM)))
        assert env.world.table.z == pytest.approx(1.0 - 0.5 / 30.0, abs=1e-12)

    def test_speed_decays_monotonically(self):
        env = make_env(seed=8)
        env.reset()
        for a in env.world.agents:
            a.root_vel[:] = (2.0, 1.0)
        speeds = [np.linalg.norm(env.world.agents[0].root_vel)]
        for _ in range(50):
            env.step(np.zeros((2, ACTION_DIM)))
            speeds.append(np.linalg.norm(env.world.agents[0].root_vel))
        assert all(s1 < s0 for s0, s1 in zip(speeds, speeds[1:]))

    def test_forward_accel_in_heading_frame(self):
        env = make_env(seed=9)
        env.reset()
        agent = env.world.agents[0]
        heading = agent.heading
        acts = np.zeros((2, ACTION_DIM))
        acts[0, 0] = 1.0
        env.step(acts)
        v = env.world.agents[0].root_vel
        expect = (4.0 * np.array([np.cos(heading), np.sin(heading)])) / 30.0
        assert np.allclose(v, expect, atol=1e-12)

    def test_hand_z_clamp_and_reach(self):
        env = make_env(seed=10)
        env.reset()
        acts = np.zeros((2, ACTION_DIM))
        acts[:, 5] = 1.0  # left hand up
        acts[:, 8] = 1.0  # right hand up
        for _ in range(300):
            env.step(acts)
        for a in env.world.agents:
            assert np.all(a.hands[:, 2] <= 1.4 + 1e-12)
            assert np.all(np.linalg.norm(a.hands - a.root3d, axis=1) <= 0.9 + 1e-9)

    def test_hands_ride_with_root(self):
        env = make_env(seed=11)
        env.reset()
        agent = env.world.agents[0]
        rel_before = agent.hands - agent.root3d
        acts = np.zeros((2, ACTION_DIM))
        acts[0, 0] = 0.5
        for _ in range(10):
            env.step(acts)
        rel_after = env.world.agents[0].hands - env.world.agents[0].root3d
        assert np.allclose(rel_before, rel_after, atol=1e-9)

    def test_determinism_bit_exact(self):
        rng = np.random.default_rng(0)
        acts = rng.uniform(-1, 1, size=(40, 3, ACTION_DIM))
        states = []
        for _ in range(2):
            env = make_env(team_size=3, seed=12)
            env.reset()
            for t in range(40):
                env.step(acts[t])
            states.append(env.world.to_dict())
        assert states[0] == states[1]


class TestTableCoupling:
    def test_never_moves_without_full_grip(self):
        rng = np.random.default_rng(13)
        env = make_env(team_size=2, seed=13, episode_len=200)
        env.reset()
        for _ in range(200):
            pts = env.world.contact_points_world()
            hands = np.stack([a.hands for a in env.world.agents])
            d = np.linalg.norm(pts[None, None] - hands[:, :, None], axis=3).min(axis=2)
            any_loose = bool(np.any(d >= 0.04))
            pos_before = env.world.table.position.copy()
            out = env.step(rng.uniform(-1, 1, size=(2, ACTION_DIM)))
            if any_loose:
                assert np.array_equal(env.world.table.position, pos_before)
            if out.terminated:
                env.reset()

    def test_kinematic_carry_displacement(self):
        env = make_env(seed=14)
        env.reset()
        inject_world(env, gripped_agents(env, z=0.94),
                     table=TableState(z=0.94, gripped=True))
        acts = np.zeros((2, ACTION_DIM))
        # both agents accelerate along world +x (heading frames differ)
        for i, a in enumerate(env.world.agents):
            h = a.heading
            acts[i, 0:2] = rot2(-h) @ np.array([1.0, 0.0])
        pos_before = env.world.table.position.copy()
        env.step(acts)
        vels = np.stack([a.root_vel for a in env.world.agents])
        vbar = vels.mean(axis=0)
        assert np.allclose(env.world.table.position - pos_before, vbar / 30.0,
                           atol=1e-12)
        assert env.world.table.gripped

    def test_common_velocity_no_rotation(self):
        env = make_env(seed=15)
        env.reset()
        inject_world(env, gripped_agents(env, z=0.94),
                     table=TableState(z=0.94, gripped=True))
        acts = np.zeros((2, ACTION_DIM))
        for i, a in enumerate(env.world.agents):
            acts[i, 0:2] = rot2(-a.heading) @ np.array([0.7, 0.3])
        env.step(acts)
        assert env.world.table.yaw_rate == pytest.approx(0.0, abs=1e-12)

    def test_lift_follows_mean_hand_height(self):
        env = make_env(seed=16)
        env.reset()
        inject_world(env, gripped_agents(env, z=0.84), table=TableState(z=0.84))
        acts = np.zeros((2, ACTION_DIM))
        acts[:, 5] = 0.2  # raise both hands
        acts[:, 8] = 0.2
        env.step(acts)
        hands_z = np.mean([a.hands[:, 2] for a in env.world.agents])
        assert env.world.table.z == pytest.approx(hands_z, abs=1e-12)

    def test_heavy_table_needs_four(self):
        for n, expect_grip in ((2, False), (4, True)):
            env = make_env(team_size=n, seed=17, mass_scale=5.0)
            env.reset()
            samp = env.geometry.sampling
            slots = [8, 40, 24, 56][:n]
            agents = []
            for k in slots:
                p, u = samp.points[k], samp.inward_normals[k]
                hands = np.array([
                    list(samp.points[(k - 2) % 64]) + [0.94],
                    list(samp.points[(k + 2) % 64]) + [0.94]])
                agents.append(AgentState(root=p - 0.3 * u,
                                         heading=float(np.arctan2(u[1], u[0])),
                                         hands=hands))
            inject_world(env, agents, table=TableState(z=0.94))
            env.step(np.zeros((n, ACTION_DIM)))
            assert env.world.table.gripped == expect_grip


class TestTermination:
    def test_timeout(self):
        env = make_env(seed=18, episode_len=5)
        env.reset()
        for _ in range(4):
            out = env.step(np.zeros((2, ACTION_DIM)))
            assert not out.terminated
        out = env.step(np.zeros((2, ACTION_DIM)))
        assert out.terminated and out.reason == "timeout"

    def test_step_after_done_raises(self):
        env = make_env(seed=19, episode_len=1)
        env.reset()
        env.step(np.zeros((2, ACTION_DIM)))
        with pytest.raises(EnvError):
            env.step(np.zeros((2, ACTION_DIM)))

    def test_out_of_bounds(self):
        env = make_env(seed=20)
        env.reset()
        env.world.agents[0].root[:] = (25.0, 0.0)
        out = env.step(np.zeros((2, ACTION_DIM)))
        assert out.terminated and out.reason == "out_of_bounds"

    def test_nominal_not_terminated(self):
        env = make_env(seed=21)
        env.reset()
        out = env.step(np.zeros((2, ACTION_DIM)))
        assert not out.terminated and out.reason is None


class TestObservations:
    def test_batched_matches_single(self):
        env = make_env(team_size=4, seed=22)
        env.reset()
        batched = build_observations(env.world)
        for i in range(4):
            single = build_observation(env.world, i)
            assert np.allclose(single.proprio, batched[i].proprio, atol=1e-12)
            assert np.allclose(single.contact_points, batched[i].contact_points,
                               atol=1e-12)
            assert np.allclose(single.teammates, batched[i].teammates, atol=1e-12)
            assert np.allclose(single.target, batched[i].target, atol=1e-12)

    def test_dimensions(self):
        env = make_env(team_size=3, seed=23)
        obs = env.reset()
        assert obs[0].proprio.shape == (14,)
        assert obs[0].object_center.shape == (3,)
        assert obs[0].contact_points.shape == (64, 3)
        assert obs[0].nearest_hand_points.shape == (2, 3)
        assert obs[0].target.shape == (3,)
        assert obs[0].teammates.shape == (2, 9)
        assert obs[0].object_vec.shape == (201,)

    def test_teammate_ahead_identity(self):
        env = make_env(team_size=2, seed=24)
        env.reset()
        agents = [AgentState(root=(-3.0, 0.0), heading=0.0,
                             hands=[[-2.8, 0.2, 0.9], [-2.8, -0.2, 0.9]]),
                  AgentState(root=(-2.0, 0.0), heading=0.0,
                             hands=[[-1.8, 0.2, 0.9], [-1.8, -0.2, 0.9]])]
        inject_world(env, agents)
        cue = build_observation(env.world, 0).teammates[0]
        assert np.allclose(cue[0:2], [1.0, 0.0], atol=1e-12)
        assert np.allclose(cue[2:8], [1, 0, 0, 0, 1, 0], atol=1e-12)

    def test_contact_ordering_starts_at_nearest(self):
        env = make_env(team_size=2, seed=25)
        env.reset()
        world = env.world
        obs = build_observation(world, 0)
        pts = world.contact_points_world()
        agent = world.agents[0]
        k = int(np.argmin(np.linalg.norm(pts[:, :2] - agent.root, axis=1)))
        first_local = obs.contact_points[0]
        expect = rot2(-agent.heading) @ (pts[k, :2] - agent.root)
        assert np.allclose(first_local[:2], expect, atol=1e-12)
        # counterclockwise successor
        second_local = obs.contact_points[1]
        expect2 = rot2(-agent.heading) @ (pts[(k + 1) % 64, :2] - agent.root)
        assert np.allclose(second_local[:2], expect2, atol=1e-12)

    def test_world_rotation_invariance(self):
        env = make_env(team_size=3, seed=26)
        env.reset()
        rng = np.random.default_rng(3)
        env.step(rng.uniform(-1, 1, size=(3, ACTION_DIM)))
        base = build_observations(env.world)

        phi = 1.234
        rot = rot2(phi)
        world = env.world
        agents = []
        for a in world.agents:
            hands = a.hands.copy()
            hands[:, :2] = (hands[:, :2] - world.table.position) @ rot.T \
                + world.table.position
            hv = a.hand_vels.copy()
            hv[:, :2] = hv[:, :2] @ rot.T
            agents.append(AgentState(
                root=rot @ (a.root - world.table.position) + world.table.position,
                heading=a.heading + phi, root_vel=rot @ a.root_vel,
                heading_rate=a.heading_rate, hands=hands, hand_vels=hv))
        env2 = make_env(team_size=3, seed=26)
        env2.reset()
        inject_world(
            env2, agents,
            table=TableState(position=world.table.position,
                             yaw=world.table.yaw + phi, z=world.table.z,
                             gripped=world.table.gripped),
            target=rot @ (world.target - world.table.position) + world.table.position)
        rotated = build_observations(env2.world)
        for b, r in zip(base, rotated):
            assert np.allclose(b.proprio, r.proprio, atol=1e-9)
            assert np.allclose(b.object_center, r.object_center, atol=1e-9)
            assert np.allclose(b.contact_points, r.contact_points, atol=1e-9)
            assert np.allclose(b.nearest_hand_points, r.nearest_hand_points,
                               atol=1e-9)
            assert np.allclose(b.target, r.target, atol=1e-9)
            assert np.allclose(b.teammates, r.teammates, atol=1e-9)


class TestInteractionIndicator:
    def test_values(self):
        env = make_env(seed=27)
        env.reset()
        samp = env.geometry.sampling
        agents = gripped_agents(env)
        # place agent 0 exactly 1 m outside its nearest perimeter point
        agents[0].root[:] = samp.points[8] - 1.0 * samp.inward_normals[8]
        inject_world(env, agents)
        alpha = interaction_indicator(env.world, 0)
        assert alpha == pytest.approx(0.0, abs=1e-9)
        assert 1.0 / (1.0 + np.exp(-alpha)) == pytest.approx(0.5, abs=1e-9)
        agents[0].root[:] = samp.points[8] - 0.2 * samp.inward_normals[8]
        inject_world(env, agents)
        alpha = interaction_indicator(env.world, 0)
        assert alpha == pytest.approx(4.0, abs=1e-9)
        assert 1.0 / (1.0 + np.exp(-alpha)) == pytest.approx(0.982, abs=1e-3)

    def test_far_limit(self):
        env = make_env(seed=28)
        env.reset()
        agents = gripped_agents(env)
        agents[0].root[:] = (15.0, 0.0)
        inject_world(env, agents)
        alpha = interaction_indicator(env.world, 0)
        assert 1.0 / (1.0 + np.exp(-alpha)) < 1e-9


class TestSnapshotRestore:
    def test_round_trip_continuation(self):
        rng = np.random.default_rng(5)
        acts = rng.uniform(-1, 1, size=(30, 2, ACTION_DIM))
        env = make_env(seed=29)
        env.reset()
        for t in range(10):
            env.step(acts[t])
        blob = env.get_state()
        cont1 = []
        for t in range(10, 30):
            env.step(acts[t])
            cont1.append(env.world.to_dict())
        env2 = make_env(seed=29)
        env2.set_state(blob)
        cont2 = []
        for t in range(10, 30):
            env2.step(acts[t])
            cont2.append(env2.world.to_dict())
        assert cont1 == cont2
