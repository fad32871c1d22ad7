"""Synthetic multi-task point-mass control families and offline dataset generation.

Two parameterized families:
  point_dir: 2-D point mass rewarded for velocity along a goal direction.
  point_vel: 1-D point mass penalized by squared error to a goal speed.

Scripted noisy controllers play the role of the behavior policy; a noise
ladder produces mixed-quality offline data.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, ContractError
from .ntio import save_tensors

DT = 0.1
HORIZON = 64
V_MAX = 2.0
DEFAULT_SIGMAS = (0.1, 0.3, 0.5)
VEL_GAIN = 5.0  # proportional gain of the point_vel controller

FAMILIES = ("point_dir", "point_vel")


@dataclass(frozen=True)
class TaskSpec:
    family: str
    param: float  # goal angle (rad) for point_dir, goal speed for point_vel
    task_index: int

    @property
    def state_dim(self) -> int:
        return 4 if self.family == "point_dir" else 2

    @property
    def action_dim(self) -> int:
        return 2 if self.family == "point_dir" else 1


@dataclass
class EnvState:
    pos: np.ndarray
    vel: np.ndarray
    step_count: int = 0

    @property
    def obs(self) -> np.ndarray:
        return np.concatenate([self.pos, self.vel]).astype(np.float64)


def make_tasks(family: str) -> list[TaskSpec]:
    if family == "point_dir":
        return [TaskSpec("point_dir", 2.0 * np.pi * k / 8.0, k) for k in range(8)]
    if family == "point_vel":
        speeds = np.linspace(0.5, 2.0, 10)
        return [TaskSpec("point_vel", float(v), k) for k, v in enumerate(speeds)]
    raise ConfigError(f"unknown task family {family!r}")


def task_split(family: str) -> tuple[list[int], list[int]]:
    """Deterministic train/test index partition per family."""
    if family == "point_dir":
        return list(range(6)), [6, 7]
    if family == "point_vel":
        return [0, 1, 3, 4, 5, 6, 8, 9], [2, 7]
    raise ConfigError(f"unknown task family {family!r}")


def reset(task: TaskSpec, seed: int | np.random.Generator) -> EnvState:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    ndim = 2 if task.family == "point_dir" else 1
    vel = rng.uniform(-0.1, 0.1, size=ndim)
    return EnvState(pos=np.zeros(ndim), vel=vel, step_count=0)


def _clamp_speed(vel: np.ndarray) -> np.ndarray:
    if vel.size == 1:
        return np.clip(vel, -V_MAX, V_MAX)
    speed = float(np.linalg.norm(vel))
    if speed > V_MAX:
        return vel * (V_MAX / speed)
    return vel


def step(state: EnvState, action: np.ndarray, task: TaskSpec) -> tuple[EnvState, float, bool]:
    """Integrate one control step; out-of-bounds actions are clamped."""
    if state.step_count >= HORIZON:
        raise ContractError("step() called on a finished episode")
    a = np.clip(np.asarray(action, dtype=np.float64).reshape(-1), -1.0, 1.0)
    if a.size != task.action_dim:
        raise ContractError(f"action dim {a.size} != {task.action_dim} for {task.family}")
    vel = _clamp_speed(state.vel + a * DT)
    pos = state.pos + vel * DT
    if task.family == "point_dir":
        goal = np.array([np.cos(task.param), np.sin(task.param)])
        reward = float(vel @ goal)
    else:
        reward = -float((vel[0] - task.param) ** 2)
    new = EnvState(pos=pos, vel=vel, step_count=state.step_count + 1)
    return new, reward, new.step_count >= HORIZON


def scripted_policy(task: TaskSpec, noise_sigma: float = 0.0):
    """Noisy scripted controller for one task; the dataset behavior policy."""
    if noise_sigma < 0:
        raise ConfigError("noise_sigma must be >= 0")

    if task.family == "point_dir":
        base = np.array([np.cos(task.param), np.sin(task.param)])

        def policy(state: EnvState, rng: np.random.Generator) -> np.ndarray:
            a = base if noise_sigma == 0 else base + rng.normal(0.0, noise_sigma, size=2)
            return np.clip(a, -1.0, 1.0)

    else:

        def policy(state: EnvState, rng: np.random.Generator) -> np.ndarray:
            a = VEL_GAIN * (task.param - state.vel[0])
            if noise_sigma > 0:
                a = a + rng.normal(0.0, noise_sigma)
            return np.clip(np.array([a]), -1.0, 1.0)

    return policy


def rollout(task: TaskSpec, policy, rng: np.random.Generator):
    """One full episode; returns (states [T, ds], actions [T, da], rewards [T])."""
    state = reset(task, rng)
    states, actions, rewards = [], [], []
    done = False
    while not done:
        obs = state.obs
        a = policy(state, rng)
        state, r, done = step(state, a, task)
        states.append(obs)
        actions.append(a)
        rewards.append(r)
    return np.array(states), np.array(actions), np.array(rewards)


def expert_mean_return(task: TaskSpec, episodes: int = 100, seed: int = 0) -> float:
    """Monte-Carlo reference return of the noise-free scripted controller."""
    policy = scripted_policy(task, 0.0)
    total = 0.0
    for ep in range(episodes):
        rng = np.random.default_rng([seed, task.task_index, ep])
        _, _, rewards = rollout(task, policy, rng)
        total += float(rewards.sum())
    return total / episodes


def generate_dataset(
    family: str,
    out_dir,
    n_traj_per_noise: int = 10,
    sigmas: tuple[float, ...] = DEFAULT_SIGMAS,
    seed: int = 0,
    tasks: list[TaskSpec] | None = None,
):
    """Roll out the noise ladder for every task and write the on-disk dataset.

    Layout: out_dir/meta.json plus one task_{id}.nt per task holding
    states [N, T, ds], actions [N, T, da], rewards [N, T].
    """
    if tasks is None:
        tasks = make_tasks(family)
    if not tasks:
        raise ConfigError("no tasks to generate")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train_idx, test_idx = task_split(family)
    for task in tasks:
        all_s, all_a, all_r = [], [], []
        traj_idx = 0
        for sigma in sigmas:
            policy = scripted_policy(task, sigma)
            for _ in range(n_traj_per_noise):
                rng = np.random.default_rng([seed, task.task_index, traj_idx])
                s, a, r = rollout(task, policy, rng)
                all_s.append(s)
                all_a.append(a)
                all_r.append(r)
                traj_idx += 1
        save_tensors(
            out / f"task_{task.task_index}.nt",
            {
                "states": np.stack(all_s).astype(np.float32),
                "actions": np.stack(all_a).astype(np.float32),
                "rewards": np.stack(all_r).astype(np.float32),
            },
        )
    meta = {
        "family": family,
        "ds": tasks[0].state_dim,
        "da": tasks[0].action_dim,
        "horizon": HORIZON,
        "dt": DT,
        "v_max": V_MAX,
        "sigmas": list(sigmas),
        "n_traj_per_noise": n_traj_per_noise,
        "seed": seed,
        "tasks": [{"index": t.task_index, "family": t.family, "param": t.param} for t in tasks],
        "train_tasks": train_idx,
        "test_tasks": test_idx,
        "norm": None,
    }
    (out / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    return out
