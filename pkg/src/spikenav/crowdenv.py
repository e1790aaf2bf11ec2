"""Microscopic social-navigation environment.

One robot and N-1 humans move in the plane. Humans follow a deterministic
social-force rule: full-speed attraction toward their goal plus a linear
repulsion from any agent inside their personal proxemic radius, with a
fixed left tie-break for exactly head-on encounters. The robot is driven
externally through (speed, heading-change) actions.

The robot is rewarded for efficient navigation (goal bonus, collision and
timeout penalties, per-step progress shaping) and receives a social term
from every human inside the social integration radius: a speed-mismatch
penalty, plus a fixed penalty while it intrudes into that human's proxemic
radius. Reward components are returned alongside their exact total.

Observations follow a robot block (goal distance and offset, heading,
preferred speed, radius) plus one block per human (radii constants and the
last k+1 relative-position/velocity snapshots, newest first), sorted
closest human first.

Scenario generation covers three stock layouts (circle interaction, circle
crossing, random box) with seeded domain randomization of preferred speeds
and proxemic radii. Everything downstream is deterministic given the seed
and the action sequence.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

GOAL = "goal"
COLLISION = "collision"
TIMEOUT = "timeout"
RUNNING = "running"

DEFAULT_DT = 0.25  # s
DEFAULT_MAX_STEPS = 200  # 50 s episodes
DEFAULT_HISTORY = 2  # k past snapshots kept per human
DEFAULT_HEADING_LIMIT = math.pi / 6.0  # rad per step
AGENT_RADIUS = 0.3  # m, body radius for robot and humans
MIN_SEPARATION_SLACK = 0.2  # m added to radii sums at spawn

ROBOT_OBS_DIM = 6
HUMAN_BLOCK_DIM = 5
HUMAN_CONST_DIM = 2


class ScenarioError(RuntimeError):
    """Scenario generation could not place agents feasibly."""


class EpisodeError(RuntimeError):
    """The episode is not in a state that allows the requested call."""


@dataclass(slots=True)
class AgentState:
    position: np.ndarray
    velocity: np.ndarray
    radius: float
    goal: np.ndarray
    v_pref: float
    heading: float
    psi_pref: float = 0.0  # preferred orientation; carried, not consumed
    r_prox: float = 0.0  # personal-space radius; 0 for the robot

    def copy(self) -> "AgentState":
        return AgentState(
            self.position.copy(), self.velocity.copy(), self.radius,
            self.goal.copy(), self.v_pref, self.heading, self.psi_pref, self.r_prox,
        )

    @property
    def speed(self) -> float:
        return float(np.hypot(self.velocity[0], self.velocity[1]))

    def goal_distance(self) -> float:
        d = self.goal - self.position
        return float(np.hypot(d[0], d[1]))


@dataclass(slots=True)
class WorldState:
    robot: AgentState
    humans: list[AgentState]
    tick: int
    dt: float

    def copy(self) -> "WorldState":
        return WorldState(self.robot.copy(), [h.copy() for h in self.humans], self.tick, self.dt)

    def agents(self):
        return [self.robot, *self.humans]


@dataclass(frozen=True)
class RewardConfig:
    r_g: float = 4.0
    r_c: float = 4.0
    r_time: float = 4.0
    r_gd1: float = 0.1
    r_gd2: float = 0.2
    r_v: float = 0.058
    r_prox_pen: float = 1.1
    r_si: float = 2.0  # social integration radius, m (default; tune per deployment)
    lambda_default: float = 1.0  # per-human scaling

    def __post_init__(self):
        if self.r_si <= 0:
            raise ValueError("r_si must be positive")
        for name in ("r_g", "r_c", "r_time", "r_gd1", "r_gd2", "r_v", "r_prox_pen", "lambda_default"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")


@dataclass(frozen=True)
class Action:
    speed: float
    d_heading: float


@dataclass(slots=True)
class RobotObservation:
    d_g: float
    dp_g: np.ndarray
    heading: float
    v_pref: float
    radius: float

    def vector(self) -> np.ndarray:
        return np.array([self.d_g, self.dp_g[0], self.dp_g[1], self.heading, self.v_pref, self.radius])


@dataclass(slots=True)
class HumanObservation:
    agent_index: int
    constant: np.ndarray  # [r_i, r_i + r_0]
    blocks: list[np.ndarray]  # k+1 entries of [d, dp_x, dp_y, dv_x, dv_y], newest first

    @property
    def distance(self) -> float:
        return float(self.blocks[0][0])

    def vector(self) -> np.ndarray:
        return np.concatenate([self.constant, *self.blocks])


@dataclass(frozen=True)
class ScenarioConfig:
    kind: str  # circle_interaction | circle_crossing | random
    n_agents: int
    speed_range: tuple[float, float] = (0.5, 1.0)
    prox_range: tuple[float, float] = (0.3, 0.7)
    circle_radius: float = 4.0
    arena_half: float = 5.0
    agent_radius: float = AGENT_RADIUS
    jitter: float = 0.5  # circle-interaction start/goal scatter, m
    seed: int | None = None

    def __post_init__(self):
        if self.kind not in ("circle_interaction", "circle_crossing", "random"):
            raise ValueError(f"unknown scenario kind {self.kind!r}")
        if self.n_agents < 2:
            raise ValueError("need at least a robot and one human")


STOCK_AGENT_COUNTS = {"circle_interaction": 8, "circle_crossing": 8, "random": 10}


def stock_scenario(kind: str, n_agents: int | None = None, **overrides) -> ScenarioConfig:
    """One of the three standard layouts with its canonical crowd size."""
    return ScenarioConfig(kind=kind, n_agents=n_agents or STOCK_AGENT_COUNTS[kind], **overrides)


def load_scenario_config(path) -> ScenarioConfig:
    """Read a scenario description from a JSON file.

    Keys mirror ScenarioConfig: kind (required), n_agents, speed_range,
    prox_range, circle_radius, arena_half, agent_radius, seed.
    """
    with open(path) as fh:
        raw = json.load(fh)
    kind = raw.pop("kind")
    n_agents = raw.pop("n_agents", STOCK_AGENT_COUNTS.get(kind))
    for key in ("speed_range", "prox_range"):
        if key in raw:
            raw[key] = tuple(raw[key])
    return ScenarioConfig(kind=kind, n_agents=n_agents, **raw)


# -- scenario generation -----------------------------------------------------


def _min_separation(a_radius: float, b_radius: float) -> float:
    return a_radius + b_radius + MIN_SEPARATION_SLACK


def _positions_ok(points: list[np.ndarray], radii: list[float], candidate, radius) -> bool:
    for p, r in zip(points, radii):
        if np.hypot(*(candidate - p)) < _min_separation(r, radius):
            return False
    return True


def _goal_ok(goals: list[np.ndarray], radii: list[float], candidate, radius) -> bool:
    # parked agents sit anywhere within their own radius of the goal, so
    # goals need twice the radii sum between them to keep settled crowds apart
    for g, r in zip(goals, radii):
        if np.hypot(*(candidate - g)) < 2.0 * (r + radius) + MIN_SEPARATION_SLACK:
            return False
    return True


def generate_world(cfg: ScenarioConfig, seed: int, dt: float = DEFAULT_DT) -> WorldState:
    """Place all agents for one episode; deterministic in (cfg, seed)."""
    rng = np.random.default_rng(seed)
    n = cfg.n_agents
    r_body = cfg.agent_radius

    starts: list[np.ndarray] = []
    goals: list[np.ndarray] = []
    if cfg.kind == "circle_interaction":
        phase = rng.uniform(0.0, 2.0 * math.pi)
        for i in range(n):
            for attempt in range(101):
                if attempt == 100:
                    raise ScenarioError("could not place circle_interaction agents")
                ang = phase + 2.0 * math.pi * i / n
                base = cfg.circle_radius * np.array([math.cos(ang), math.sin(ang)])
                start = base + rng.uniform(-cfg.jitter, cfg.jitter, size=2)
                goal = -base + rng.uniform(-cfg.jitter, cfg.jitter, size=2)
                if _positions_ok(starts, [r_body] * i, start, r_body) and _goal_ok(
                    goals, [r_body] * i, goal, r_body
                ):
                    break
            starts.append(start)
            goals.append(goal)
    elif cfg.kind == "circle_crossing":
        for i in range(n):
            for attempt in range(101):
                if attempt == 100:
                    raise ScenarioError("could not place circle_crossing agents")
                ang = rng.uniform(0.0, 2.0 * math.pi)
                rad = cfg.circle_radius + rng.uniform(-0.5, 0.5)
                start = rad * np.array([math.cos(ang), math.sin(ang)])
                goal = -start + rng.uniform(-0.5, 0.5, size=2)
                if _positions_ok(starts, [r_body] * i, start, r_body) and _goal_ok(
                    goals, [r_body] * i, goal, r_body
                ):
                    break
            starts.append(start)
            goals.append(goal)
    else:  # random box
        half = cfg.arena_half
        for i in range(n):
            for attempt in range(101):
                if attempt == 100:
                    raise ScenarioError("could not place random-scenario agents")
                start = rng.uniform(-half, half, size=2)
                goal = rng.uniform(-half, half, size=2)
                if _positions_ok(starts, [r_body] * i, start, r_body) and _goal_ok(
                    goals, [r_body] * i, goal, r_body
                ):
                    break
            starts.append(start)
            goals.append(goal)

    agents: list[AgentState] = []
    for i in range(n):
        v_pref = rng.uniform(*cfg.speed_range)
        r_prox = rng.uniform(*cfg.prox_range) if i > 0 else 0.0
        to_goal = goals[i] - starts[i]
        heading = math.atan2(to_goal[1], to_goal[0])
        agents.append(
            AgentState(
                position=starts[i].copy(),
                velocity=np.zeros(2),
                radius=r_body,
                goal=goals[i].copy(),
                v_pref=v_pref,
                heading=heading,
                psi_pref=heading,
                r_prox=r_prox,
            )
        )
    return WorldState(robot=agents[0], humans=agents[1:], tick=0, dt=dt)


# -- human policy -------------------------------------------------------------


def _rotate_left(v: np.ndarray) -> np.ndarray:
    return np.array([-v[1], v[0]])


REPULSION_GAIN = 2.0  # repulsion tops attraction well before contact
HUMAN_STEP_FRACTION = 0.45  # of the nearest human gap; < 0.5 keeps gaps positive


def human_policy_step(human: AgentState, world: WorldState) -> np.ndarray:
    """Velocity command for one human under the social-force rule.

    Attraction pulls at preferred speed straight toward the goal. Every
    agent whose surface distance is inside this human's proxemic radius
    pushes away with strength rising linearly as the gap closes. Exactly
    head-on pushes break symmetry to the left. The result is speed-clamped
    to v_pref, then the step length is capped below half of the nearest
    gap to another human, so two humans can never close a gap completely
    within one tick even when both move. A human at its goal stays put.
    """
    to_goal = human.goal - human.position
    dist_goal = float(np.hypot(to_goal[0], to_goal[1]))
    if dist_goal <= human.radius:
        return np.zeros(2)
    attraction_dir = to_goal / dist_goal
    velocity = attraction_dir * human.v_pref

    nearest_human_gap = math.inf
    for other in world.agents():
        if other is human:
            continue
        offset = human.position - other.position
        d_center = float(np.hypot(offset[0], offset[1]))
        d_surface = d_center - human.radius - other.radius
        if other is not world.robot:
            nearest_human_gap = min(nearest_human_gap, d_surface)
        if d_surface >= human.r_prox:
            continue
        if d_center > 0.0:
            away = offset / d_center
        else:
            away = _rotate_left(attraction_dir)
        cross = attraction_dir[0] * away[1] - attraction_dir[1] * away[0]
        dot = attraction_dir[0] * away[0] + attraction_dir[1] * away[1]
        if cross == 0.0 and dot < 0.0:
            away = _rotate_left(attraction_dir)
        strength = REPULSION_GAIN * human.v_pref * (1.0 - d_surface / human.r_prox)
        velocity = velocity + strength * away

    speed = float(np.hypot(velocity[0], velocity[1]))
    if speed > human.v_pref:
        velocity = velocity * (human.v_pref / speed)
        speed = human.v_pref
    max_speed = HUMAN_STEP_FRACTION * max(nearest_human_gap, 0.0) / world.dt
    if speed > max_speed:
        velocity = velocity * (max_speed / speed) if speed > 0.0 else velocity
    return velocity


def step_humans(world: WorldState) -> None:
    """Assign every human its social-force velocity, simultaneously
    computed from the current world, then integrate their positions."""
    commands = [human_policy_step(h, world) for h in world.humans]
    for human, vel in zip(world.humans, commands):
        human.velocity = vel
        human.position = human.position + vel * world.dt
        if vel[0] != 0.0 or vel[1] != 0.0:
            human.heading = math.atan2(vel[1], vel[0])


# -- reward engine -------------------------------------------------------------


def surface_distance(a: AgentState, b: AgentState) -> float:
    d = a.position - b.position
    return float(np.hypot(d[0], d[1])) - a.radius - b.radius


def compute_reward(
    world_prev: WorldState, world: WorldState, outcome: str, cfg: RewardConfig
) -> tuple[float, dict[str, float]]:
    """Navigation + social reward with an exactly-decomposed component map.

    Progress is measured as the decrease of goal distance between the two
    states (approaching is rewarded); the map records which branch fired.
    """
    components: dict[str, float] = {}

    if outcome == GOAL:
        components["nav_goal"] = cfg.r_g
    elif outcome == COLLISION:
        components["nav_collision"] = -cfg.r_c
    elif outcome == TIMEOUT:
        components["nav_timeout"] = -cfg.r_time
    else:
        progress = world_prev.robot.goal_distance() - world.robot.goal_distance()
        if progress > 0.0:
            components["nav_progress"] = cfg.r_gd1 * progress
        elif progress < 0.0:
            components["nav_regress"] = -cfg.r_gd2 * (-progress)
        else:
            components["nav_progress"] = 0.0

    robot = world.robot
    robot_speed = robot.speed
    social_sum = 0.0
    m = 0
    for human in world.humans:
        d = human.position - robot.position
        center_dist = float(np.hypot(d[0], d[1]))
        if center_dist >= cfg.r_si:
            continue
        m += 1
        r_i = -cfg.r_v * abs(human.speed - robot_speed)
        if center_dist - human.radius - robot.radius < human.r_prox:
            r_i -= cfg.r_prox_pen
        social_sum += cfg.lambda_default * r_i
    components["social"] = social_sum / m if m > 0 else 0.0

    total = 0.0
    for value in components.values():
        total += value
    return total, components


# -- observations ---------------------------------------------------------------
#
# Relative vectors are expressed in the robot's body frame (rotated by the
# robot's heading at recording time, forward = +x, left = +y). Norms are
# rotation-invariant, so the d = |dp| consistency contract is unaffected,
# and steering geometry reads directly off the observation.


def _to_body(vec: np.ndarray, heading: float) -> np.ndarray:
    c, s = math.cos(heading), math.sin(heading)
    return np.array([c * vec[0] + s * vec[1], -s * vec[0] + c * vec[1]])


def _human_block(robot: AgentState, human: AgentState) -> np.ndarray:
    dp = _to_body(robot.position - human.position, robot.heading)
    dv = _to_body(robot.velocity - human.velocity, robot.heading)
    d = float(np.hypot(dp[0], dp[1]))
    return np.array([d, dp[0], dp[1], dv[0], dv[1]])


def build_observation(
    world: WorldState, history: dict[int, list[np.ndarray]], k: int
) -> tuple[RobotObservation, list[HumanObservation]]:
    """Assemble the robot block and the closest-first human list.

    ``history[i]`` holds the per-step snapshots for human i in arrival
    order; the newest k+1 are used, repeating the oldest one while the
    episode is younger than k steps. Ties in current distance break on the
    human's index.
    """
    robot = world.robot
    dp_g = _to_body(robot.goal - robot.position, robot.heading)
    robot_obs = RobotObservation(
        d_g=float(np.hypot(dp_g[0], dp_g[1])),
        dp_g=dp_g,
        heading=robot.heading,
        v_pref=robot.v_pref,
        radius=robot.radius,
    )

    humans: list[HumanObservation] = []
    for idx, human in enumerate(world.humans):
        past = history[idx]
        blocks = [past[-1 - j] if j < len(past) else past[0] for j in range(k + 1)]
        humans.append(
            HumanObservation(
                agent_index=idx,
                constant=np.array([human.radius, human.radius + robot.radius]),
                blocks=blocks,
            )
        )
    humans.sort(key=lambda h: (h.distance, h.agent_index))
    return robot_obs, humans


def observation_dim(k: int = DEFAULT_HISTORY) -> int:
    return ROBOT_OBS_DIM + HUMAN_CONST_DIM + HUMAN_BLOCK_DIM * (k + 1)


# -- environment -----------------------------------------------------------------


@dataclass(slots=True)
class StepResult:
    world: WorldState
    observation: tuple[RobotObservation, list[HumanObservation]]
    reward: float
    outcome: str
    components: dict[str, float]
    info: dict


class CrowdEnv:
    """Seeded, deterministic episode runner around the world model.

    reset() places agents per the scenario; step() applies a robot action,
    advances humans, integrates, scores, and reports observations. Exactly
    one of goal/collision/timeout ends every episode within max_steps.
    """

    def __init__(
        self,
        scenario: ScenarioConfig,
        reward: RewardConfig | None = None,
        dt: float = DEFAULT_DT,
        max_steps: int = DEFAULT_MAX_STEPS,
        k: int = DEFAULT_HISTORY,
        d_heading_max: float = DEFAULT_HEADING_LIMIT,
    ):
        self.scenario = scenario
        self.reward_cfg = reward or RewardConfig()
        self.dt = dt
        self.max_steps = max_steps
        self.k = k
        self.d_heading_max = d_heading_max
        self.world: WorldState | None = None
        self.outcome = RUNNING
        self._history: dict[int, list[np.ndarray]] = {}

    @property
    def obs_dim(self) -> int:
        return observation_dim(self.k)

    @property
    def n_humans(self) -> int:
        return self.scenario.n_agents - 1

    def action_bounds(self) -> tuple[float, float]:
        """(max speed, max |heading change|) for the current episode."""
        if self.world is None:
            raise EpisodeError("reset() the environment first")
        return self.world.robot.v_pref, self.d_heading_max

    def reset(self, seed: int | None = None):
        if seed is None:
            seed = self.scenario.seed
        if seed is None:
            raise EpisodeError("a seed is required (argument or scenario config)")
        self.world = generate_world(self.scenario, seed, dt=self.dt)
        self.outcome = RUNNING
        self._history = {
            idx: [_human_block(self.world.robot, h)] for idx, h in enumerate(self.world.humans)
        }
        observation = build_observation(self.world, self._history, self.k)
        return self.world, observation

    def step(self, action: Action) -> StepResult:
        if self.world is None:
            raise EpisodeError("reset() the environment first")
        if self.outcome != RUNNING:
            raise EpisodeError("episode finished; reset() to start another")

        world = self.world
        prev = world.copy()

        v_max, d_max = world.robot.v_pref, self.d_heading_max
        speed = min(max(action.speed, 0.0), v_max)
        d_heading = min(max(action.d_heading, -d_max), d_max)
        clipped = speed != action.speed or d_heading != action.d_heading

        robot = world.robot
        robot.heading = math.atan2(
            math.sin(robot.heading + d_heading), math.cos(robot.heading + d_heading)
        )
        robot.velocity = speed * np.array([math.cos(robot.heading), math.sin(robot.heading)])
        step_humans(world)
        robot.position = robot.position + robot.velocity * world.dt
        world.tick += 1

        violations = 0
        min_surface = math.inf
        for human in world.humans:
            ds = surface_distance(robot, human)
            min_surface = min(min_surface, ds)
            if ds < human.r_prox:
                violations += 1

        if min_surface <= 0.0:
            outcome = COLLISION
        elif robot.goal_distance() <= robot.radius:
            outcome = GOAL
        elif world.tick >= self.max_steps:
            outcome = TIMEOUT
        else:
            outcome = RUNNING
        self.outcome = outcome

        total, components = compute_reward(prev, world, outcome, self.reward_cfg)

        for idx, human in enumerate(world.humans):
            self._history[idx].append(_human_block(robot, human))
        observation = build_observation(world, self._history, self.k)

        info = {
            "action_clipped": clipped,
            "applied_action": Action(speed, d_heading),
            "proxemic_violations": violations,
            "min_surface_distance": min_surface,
            "progress_sign_convention": "positive = goal distance decreased",
        }
        return StepResult(world, observation, total, outcome, components, info)


def world_records(world: WorldState, components: dict | None = None, outcome: str = RUNNING):
    """Flatten one tick into line-delimited trajectory records (dicts)."""
    records = []
    for agent_id, agent in enumerate(world.agents()):
        rec = {
            "tick": world.tick,
            "agent": agent_id,
            "position": [float(agent.position[0]), float(agent.position[1])],
            "velocity": [float(agent.velocity[0]), float(agent.velocity[1])],
        }
        if agent_id == 0:
            rec["reward_components"] = components or {}
            rec["done"] = outcome
        records.append(rec)
    return records
