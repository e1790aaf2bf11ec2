import math

import numpy as np
import pytest

from spikenav import crowdenv as ce
from spikenav.crowdenv import (
    Action,
    AgentState,
    CrowdEnv,
    RewardConfig,
    ScenarioConfig,
    ScenarioError,
    WorldState,
    compute_reward,
    generate_world,
    human_policy_step,
    stock_scenario,
    surface_distance,
)


def make_agent(pos, goal, v_pref=1.0, r_prox=0.5, vel=(0.0, 0.0), radius=0.3):
    pos = np.asarray(pos, dtype=float)
    goal = np.asarray(goal, dtype=float)
    heading = math.atan2(*(goal - pos)[::-1]) if np.any(goal != pos) else 0.0
    return AgentState(
        position=pos, velocity=np.asarray(vel, dtype=float), radius=radius,
        goal=goal, v_pref=v_pref, heading=heading, psi_pref=heading, r_prox=r_prox,
    )


def make_world(robot, humans, tick=0, dt=0.25):
    return WorldState(robot=robot, humans=list(humans), tick=tick, dt=dt)


# -- scenario generation -------------------------------------------------


def test_reset_deterministic():
    cfg = stock_scenario("circle_crossing")
    w1 = generate_world(cfg, seed=123)
    w2 = generate_world(cfg, seed=123)
    for a, b in zip(w1.agents(), w2.agents()):
        assert np.array_equal(a.position, b.position)
        assert np.array_equal(a.goal, b.goal)
        assert a.v_pref == b.v_pref and a.r_prox == b.r_prox


def test_circle_interaction_counts_and_separation():
    w = generate_world(stock_scenario("circle_interaction"), seed=7)
    assert len(w.agents()) == 8
    agents = w.agents()
    for i in range(len(agents)):
        for j in range(i + 1, len(agents)):
            assert surface_distance(agents[i], agents[j]) > 0.0


@pytest.mark.parametrize("kind,count", [("circle_interaction", 8), ("circle_crossing", 8), ("random", 10)])
def test_stock_agent_counts_and_randomization_ranges(kind, count):
    for seed in range(5):
        w = generate_world(stock_scenario(kind), seed=seed)
        assert len(w.agents()) == count
        for agent in w.agents():
            assert 0.5 <= agent.v_pref <= 1.0
        for human in w.humans:
            assert 0.3 <= human.r_prox <= 0.7


def test_infeasible_placement_raises():
    cfg = ScenarioConfig(kind="random", n_agents=40, arena_half=0.5)
    with pytest.raises(ScenarioError):
        generate_world(cfg, seed=0)


# -- human policy ----------------------------------------------------------


def test_human_pure_attraction():
    h = make_agent((0.0, 0.0), (4.0, 0.0), v_pref=0.8)
    w = make_world(make_agent((50.0, 50.0), (60.0, 60.0)), [h])
    v = human_policy_step(h, w)
    assert np.allclose(v, [0.8, 0.0], atol=1e-15)


def test_human_at_goal_stays():
    h = make_agent((2.0, 2.0), (2.0, 2.0))
    w = make_world(make_agent((50.0, 50.0), (60.0, 60.0)), [h])
    assert np.array_equal(human_policy_step(h, w), [0.0, 0.0])


def test_head_on_tie_break_goes_left():
    h = make_agent((0.0, 0.0), (4.0, 0.0), v_pref=1.0, r_prox=0.5)
    blocker = make_agent((0.8, 0.0), (0.8, 0.0))  # parked, exactly on the goal line
    w = make_world(blocker, [h])
    v = human_policy_step(h, w)
    assert v[1] > 0.0  # +y is left of the +x travel direction
    assert np.hypot(*v) <= h.v_pref + 1e-12


def test_repulsion_grows_as_gap_closes():
    goal = (10.0, 0.0)
    far = make_agent((0.0, 0.0), goal, r_prox=0.6)
    w_far = make_world(make_agent((0.0, 0.79), (0.0, 0.79)), [far])
    v_far = human_policy_step(far, w_far)
    near = make_agent((0.0, 0.0), goal, r_prox=0.6)
    w_near = make_world(make_agent((0.0, 0.65), (0.0, 0.65)), [near])
    v_near = human_policy_step(near, w_near)
    assert v_near[1] < v_far[1] < 0.0  # pushed in -y, harder when closer


def test_speed_clamped_to_v_pref():
    h = make_agent((0.0, 0.0), (4.0, 0.0), v_pref=0.6, r_prox=0.7)
    crowd = [make_agent((0.0, 0.5), (0.0, 0.5)), make_agent((0.3, -0.4), (0.3, -0.4))]
    w = make_world(crowd[0], [h, crowd[1]])
    v = human_policy_step(h, w)
    assert np.hypot(*v) <= 0.6 + 1e-12


# -- reward engine ------------------------------------------------------------


def far_human():
    return make_agent((100.0, 100.0), (101.0, 100.0))


def test_reward_goal_branch():
    prev = make_world(make_agent((0.0, 0.0), (1.0, 0.0)), [far_human()])
    now = make_world(make_agent((0.9, 0.0), (1.0, 0.0)), [far_human()], tick=1)
    total, comps = compute_reward(prev, now, ce.GOAL, RewardConfig())
    assert comps["nav_goal"] == 4.0
    assert total == sum(comps.values())


def test_reward_collision_branch():
    prev = make_world(make_agent((0.0, 0.0), (5.0, 0.0)), [far_human()])
    now = make_world(make_agent((0.5, 0.0), (5.0, 0.0)), [far_human()], tick=1)
    total, comps = compute_reward(prev, now, ce.COLLISION, RewardConfig())
    assert comps["nav_collision"] == -4.0


def test_reward_timeout_branch():
    prev = make_world(make_agent((0.0, 0.0), (5.0, 0.0)), [far_human()])
    now = make_world(make_agent((0.0, 0.0), (5.0, 0.0)), [far_human()], tick=200)
    total, comps = compute_reward(prev, now, ce.TIMEOUT, RewardConfig())
    assert comps["nav_timeout"] == -4.0


def test_reward_progress_hand_value():
    # 0.1 m closer with nobody inside the social radius: 0.1 * 0.1 = 0.01
    prev = make_world(make_agent((0.0, 0.0), (4.0, 0.0)), [far_human()])
    now = make_world(make_agent((0.1, 0.0), (4.0, 0.0)), [far_human()], tick=1)
    total, comps = compute_reward(prev, now, ce.RUNNING, RewardConfig())
    assert abs(total - 0.01) < 1e-12
    assert set(comps) == {"nav_progress", "social"} and comps["social"] == 0.0


def test_reward_regress_hand_value():
    prev = make_world(make_agent((0.1, 0.0), (4.0, 0.0)), [far_human()])
    now = make_world(make_agent((0.0, 0.0), (4.0, 0.0)), [far_human()], tick=1)
    total, comps = compute_reward(prev, now, ce.RUNNING, RewardConfig())
    assert abs(comps["nav_regress"] + 0.02) < 1e-12


def test_reward_social_hand_value():
    # one human in range, |speed gap| = 0.5, inside its proxemics: -(0.058*0.5 + 1.1)
    robot = make_agent((0.0, 0.0), (4.0, 0.0), vel=(0.5, 0.0))
    robot.position = np.array([0.0, 0.0])
    human = make_agent((1.0, 0.0), (1.0, 0.0), r_prox=0.6, vel=(0.0, 0.0))
    prev = make_world(make_agent((0.0, 0.0), (4.0, 0.0)), [human])
    now = make_world(robot, [human], tick=1)
    total, comps = compute_reward(prev, now, ce.RUNNING, RewardConfig())
    assert abs(comps["social"] + 1.129) < 1e-12


def test_reward_social_averages_over_humans_in_radius():
    robot = make_agent((0.0, 0.0), (4.0, 0.0), vel=(0.5, 0.0))
    inside = make_agent((1.0, 0.0), (1.0, 0.0), r_prox=0.6)  # violated
    inside2 = make_agent((0.0, 1.8), (0.0, 1.8), r_prox=0.3)  # in r_SI only
    outside = make_agent((3.0, 0.0), (3.0, 0.0), r_prox=0.7)
    prev = make_world(make_agent((0.0, 0.0), (4.0, 0.0)), [inside, inside2, outside])
    now = make_world(robot, [inside, inside2, outside], tick=1)
    _, comps = compute_reward(prev, now, ce.RUNNING, RewardConfig())
    expected = ((-0.058 * 0.5 - 1.1) + (-0.058 * 0.5)) / 2.0
    assert abs(comps["social"] - expected) < 1e-12


def test_reward_decomposition_exact_over_random_episode():
    env = CrowdEnv(stock_scenario("circle_crossing"), max_steps=60)
    env.reset(seed=5)
    rng = np.random.default_rng(0)
    while True:
        res = env.step(Action(rng.uniform(0, 1), rng.uniform(-0.5, 0.5)))
        assert res.reward == sum(res.components.values())
        if res.outcome != ce.RUNNING:
            break


# -- environment stepping -------------------------------------------------------


def test_step_reaching_goal_pays_bonus():
    env = CrowdEnv(stock_scenario("circle_interaction", n_agents=2))
    env.reset(seed=3)
    robot = env.world.robot
    robot.position = robot.goal - np.array([0.25, 0.0])  # inside the tolerance radius
    env.world.humans[0].position = np.array([100.0, 100.0])
    env.world.humans[0].goal = np.array([100.0, 100.0])
    res = env.step(Action(0.0, 0.0))
    assert res.outcome == ce.GOAL
    assert res.components["nav_goal"] == 4.0
    assert res.reward == 4.0  # nobody in the social radius


def test_step_collision_pays_penalty():
    env = CrowdEnv(stock_scenario("circle_interaction", n_agents=2))
    env.reset(seed=3)
    robot = env.world.robot
    robot.position = np.array([0.0, 0.0])
    robot.goal = np.array([5.0, 0.0])
    robot.heading = 0.0
    human = env.world.humans[0]
    human.position = np.array([0.7, 0.0])
    human.goal = human.position.copy()  # parked in the way
    res = env.step(Action(0.5, 0.0))
    assert res.outcome == ce.COLLISION
    assert res.components["nav_collision"] == -4.0
    assert abs(res.components["social"] + 1.129) < 1e-12


def test_step_zero_action_keeps_position():
    env = CrowdEnv(stock_scenario("circle_interaction", n_agents=3))
    env.reset(seed=11)
    before = env.world.robot.position.copy()
    res = env.step(Action(0.0, 0.0))
    assert np.array_equal(res.world.robot.position, before)
    assert set(res.components) <= {"nav_progress", "nav_regress", "social"}


def test_action_clipping_recorded():
    env = CrowdEnv(stock_scenario("circle_interaction", n_agents=2))
    env.reset(seed=1)
    res = env.step(Action(99.0, 99.0))
    assert res.info["action_clipped"]
    applied = res.info["applied_action"]
    assert applied.speed == env.world.robot.v_pref
    assert applied.d_heading == env.d_heading_max


def test_episode_trichotomy_and_termination():
    outcomes = set()
    for seed in range(12):
        env = CrowdEnv(stock_scenario("circle_crossing"), max_steps=50)
        env.reset(seed=seed)
        rng = np.random.default_rng(seed)
        steps = 0
        res = None
        while True:
            res = env.step(Action(rng.uniform(0, 1), rng.uniform(-0.6, 0.6)))
            steps += 1
            if res.outcome != ce.RUNNING:
                break
        assert steps <= 50
        assert res.outcome in (ce.GOAL, ce.COLLISION, ce.TIMEOUT)
        outcomes.add(res.outcome)
        with pytest.raises(ce.EpisodeError):
            env.step(Action(0.0, 0.0))
    assert ce.TIMEOUT in outcomes or ce.COLLISION in outcomes


def test_trajectory_determinism_bit_identical():
    def run():
        env = CrowdEnv(stock_scenario("random"), max_steps=40)
        env.reset(seed=77)
        rng = np.random.default_rng(99)
        trace = []
        while True:
            res = env.step(Action(rng.uniform(0, 1), rng.uniform(-0.5, 0.5)))
            trace.append(
                (res.world.robot.position.copy(), [h.position.copy() for h in res.world.humans], res.reward)
            )
            if res.outcome != ce.RUNNING:
                return trace

    t1, t2 = run(), run()
    assert len(t1) == len(t2)
    for (p1, hs1, r1), (p2, hs2, r2) in zip(t1, t2):
        assert np.array_equal(p1, p2) and r1 == r2
        for h1, h2 in zip(hs1, hs2):
            assert np.array_equal(h1, h2)


# -- observations -----------------------------------------------------------------


def test_observation_robot_at_goal():
    env = CrowdEnv(stock_scenario("circle_interaction", n_agents=2))
    env.reset(seed=2)
    env.world.robot.position = env.world.robot.goal.copy()
    robot_obs, _ = ce.build_observation(env.world, env._history, env.k)
    assert robot_obs.d_g == 0.0
    assert np.array_equal(robot_obs.dp_g, [0.0, 0.0])


def test_observation_sorted_closest_first():
    env = CrowdEnv(stock_scenario("circle_interaction", n_agents=3))
    _, (_, humans) = env.reset(seed=4)
    env.world.humans[0].position = env.world.robot.position + np.array([1.0, 0.0])
    env.world.humans[1].position = env.world.robot.position + np.array([0.5, 0.0])
    res = env.step(Action(0.0, 0.0))
    _, sorted_humans = res.observation
    assert sorted_humans[0].distance <= sorted_humans[1].distance


def test_observation_distance_consistency():
    env = CrowdEnv(stock_scenario("random"))
    env.reset(seed=9)
    for _ in range(5):
        res = env.step(Action(0.4, 0.1))
        for h in res.observation[1]:
            for block in h.blocks:
                assert abs(block[0] - np.hypot(block[1], block[2])) < 1e-12


def test_observation_history_padding_then_shift():
    env = CrowdEnv(stock_scenario("circle_interaction", n_agents=2), k=2)
    _, (_, humans0) = env.reset(seed=6)
    b = humans0[0].blocks
    assert np.array_equal(b[0], b[1]) and np.array_equal(b[1], b[2])
    res = env.step(Action(0.3, 0.0))
    b1 = res.observation[1][0].blocks
    assert not np.array_equal(b1[0], b1[1])
    assert np.array_equal(b1[1], b1[2])  # oldest still repeated


def test_observation_stationary_world_identical_blocks():
    env = CrowdEnv(stock_scenario("circle_interaction", n_agents=3), k=2)
    env.reset(seed=8)
    for h in env.world.humans:
        h.goal = h.position.copy()  # park everyone
    env.world.robot.goal = env.world.robot.position + np.array([5.0, 0.0])
    res = None
    for _ in range(3):
        res = env.step(Action(0.0, 0.0))
    for h in res.observation[1]:
        assert np.array_equal(h.blocks[0], h.blocks[1])
        assert np.array_equal(h.blocks[1], h.blocks[2])


def test_observation_dim():
    assert ce.observation_dim(2) == 23
    env = CrowdEnv(stock_scenario("random"), k=2)
    _, (robot_obs, humans) = env.reset(seed=1)
    assert robot_obs.vector().shape == (6,)
    assert humans[0].vector().shape == (17,)


# -- human-human safety ------------------------------------------------------------


def test_humans_never_collide_without_robot():
    episodes = [("circle_interaction", 67), ("circle_crossing", 67), ("random", 66)]
    seed = 0
    for kind, count in episodes:
        for _ in range(count):
            world = generate_world(stock_scenario(kind), seed=seed, dt=0.25)
            seed += 1
            # remove the robot from play: park it far outside everyone's range
            world.robot.position = np.array([1e6, 1e6])
            world.robot.goal = world.robot.position.copy()
            world.robot.velocity = np.zeros(2)
            for _ in range(200):
                ce.step_humans(world)
                hs = world.humans
                for i in range(len(hs)):
                    for j in range(i + 1, len(hs)):
                        assert surface_distance(hs[i], hs[j]) > 0.0, (
                            f"{kind} seed {seed - 1}: humans {i},{j} collided"
                        )
                if all(h.speed == 0.0 for h in hs):
                    break


def test_world_records_shape():
    world = generate_world(stock_scenario("circle_interaction"), seed=0)
    recs = ce.world_records(world, components={"nav_progress": 0.0}, outcome=ce.RUNNING)
    assert len(recs) == 8
    assert recs[0]["agent"] == 0 and "reward_components" in recs[0]
    assert "reward_components" not in recs[1]
