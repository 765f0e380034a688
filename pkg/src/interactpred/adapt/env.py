"""Toy 2-D pusher: a disc agent pushes a disc object onto a goal ring."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from ..render import AGENT_COLOR, COLORS, Shape, render

OBJECT_COLOR = COLORS["red"]
GOAL_COLOR = COLORS["green"]


@dataclass(frozen=True)
class PusherEnvState:
    agent: tuple[float, float]
    obj: tuple[float, float]
    goal: tuple[float, float]
    steps: int = 0
    done: bool = False
    success: bool = False


@dataclass(frozen=True)
class ProprioState:
    x: float
    y: float
    contact: bool

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, float(self.contact)], dtype=np.float32)


class PusherEnv:
    """Deterministic kinematic pushing on the unit canvas.

    The agent moves by ``action * step_size``; overlap with the object is
    resolved by sliding the object along the contact normal.
    """

    def __init__(self, canvas_size: int = 64, agent_radius: float = 0.06,
                 object_radius: float = 0.08, step_size: float = 0.03,
                 goal_tolerance: float = 0.05, max_steps: int = 200):
        self.canvas_size = canvas_size
        self.agent_radius = agent_radius
        self.object_radius = object_radius
        self.step_size = step_size
        self.goal_tolerance = goal_tolerance
        self.max_steps = max_steps

    @property
    def contact_distance(self) -> float:
        return self.agent_radius + self.object_radius

    def sample_layout(self, rng: np.random.Generator) -> PusherEnvState:
        """Object in the central region, goal 0.2-0.3 away, agent starting on the far side.

        The agent spawns within 60 degrees of the direction pointing away from
        the goal, so the approach never has to detour around the object.
        """
        while True:
            obj = rng.uniform(0.25, 0.75, size=2)
            theta = rng.uniform(0, 2 * np.pi)
            goal = obj + rng.uniform(0.2, 0.3) * np.array([np.cos(theta), np.sin(theta)])
            phi = theta + np.pi + rng.uniform(-np.pi / 3, np.pi / 3)
            agent = obj + rng.uniform(0.2, 0.3) * np.array([np.cos(phi), np.sin(phi)])
            if (np.all((goal >= 0.15) & (goal <= 0.85))
                    and np.all((agent >= 0.1) & (agent <= 0.9))):
                return PusherEnvState(tuple(agent), tuple(obj), tuple(goal))

    def layouts(self, count: int, seed: int) -> list[PusherEnvState]:
        rng = np.random.default_rng(seed)
        return [self.sample_layout(rng) for _ in range(count)]

    def render(self, state: PusherEnvState) -> np.ndarray:
        shapes = [
            Shape("ring", GOAL_COLOR, *state.goal, 0.07),
            Shape("circle", OBJECT_COLOR, *state.obj, self.object_radius),
            Shape("disc", AGENT_COLOR, *state.agent, self.agent_radius),
        ]
        return render(shapes, self.canvas_size)

    def proprio(self, state: PusherEnvState) -> ProprioState:
        gap = np.linalg.norm(np.subtract(state.obj, state.agent))
        return ProprioState(state.agent[0], state.agent[1], bool(gap <= self.contact_distance + 1e-6))

    def is_success(self, state: PusherEnvState) -> bool:
        return bool(np.linalg.norm(np.subtract(state.obj, state.goal)) < self.goal_tolerance)

    def step(self, state: PusherEnvState, action):
        """Returns (next_state, frame, proprio, success, info)."""
        if state.done:
            raise RuntimeError("step called on a finished episode")
        action = np.asarray(action, dtype=np.float64)
        clipped = np.clip(action, -1.0, 1.0)
        info = {"action_clipped": bool(np.any(clipped != action))}
        ra, ro = self.agent_radius, self.object_radius
        agent = np.clip(np.asarray(state.agent) + clipped * self.step_size, ra, 1 - ra)
        obj = np.asarray(state.obj, dtype=np.float64)
        delta = obj - agent
        dist = np.linalg.norm(delta)
        if dist < ra + ro:
            normal = delta / dist if dist > 0 else clipped / max(np.linalg.norm(clipped), 1e-12)
            obj = np.clip(agent + normal * (ra + ro), ro, 1 - ro)
            delta = obj - agent
            dist = np.linalg.norm(delta)
            if dist < ra + ro:  # object pinned at a wall: agent yields
                agent = obj - normal * (ra + ro)
        nxt = replace(state, agent=tuple(agent), obj=tuple(obj), steps=state.steps + 1)
        success = self.is_success(nxt)
        nxt = replace(nxt, success=success, done=success or nxt.steps >= self.max_steps)
        return nxt, self.render(nxt), self.proprio(nxt), success, info


def scripted_expert(env: PusherEnv, state: PusherEnvState) -> np.ndarray:
    """Two-phase proportional controller: get behind the object, then push it home."""
    agent, obj, goal = (np.asarray(x, dtype=np.float64) for x in (state.agent, state.obj, state.goal))
    to_goal = goal - obj
    dist = np.linalg.norm(to_goal)
    if dist < 0.5 * env.goal_tolerance:
        return np.zeros(2)
    u = to_goal / dist
    reach = env.contact_distance
    rel = agent - obj
    along = rel @ u
    lateral = rel - along * u
    lat = np.linalg.norm(lateral)
    if along < -0.8 * reach and lat < 0.02:
        # pushing: aim slightly inside the object along the push direction
        target = obj - u * (reach - env.step_size)
    else:
        behind = obj - u * (reach + 0.02)
        seg = behind - agent
        t = np.clip(-(rel @ seg) / max(seg @ seg, 1e-12), 0.0, 1.0)
        blocked = np.linalg.norm(agent + t * seg - obj) < reach + 0.01
        if not blocked:
            target = behind
        else:
            # detour: step out sideways, then slide back parallel to the push axis
            side = lateral / lat if lat > 1e-9 else np.array([-u[1], u[0]])
            if lat < reach + 0.03:
                target = obj + side * (reach + 0.05) + u * along
            else:
                target = obj + side * (reach + 0.05) - u * (reach + 0.02)
    action = (target - agent) / env.step_size
    norm = np.linalg.norm(action)
    return action / norm if norm > 1.0 else action


def rollout(env: PusherEnv, state: PusherEnvState, policy, record: bool = False):
    """Run ``policy(state, frame, proprio) -> action`` until done."""
    frame, proprio = env.render(state), env.proprio(state)
    frames, proprios, actions = [], [], []
    while not state.done:
        action = np.asarray(policy(state, frame, proprio), dtype=np.float64)
        if record:
            frames.append(frame)
            proprios.append(proprio.as_array())
            actions.append(action.astype(np.float32))
        state, frame, proprio, _, _ = env.step(state, action)
    return state, (frames, proprios, actions)
