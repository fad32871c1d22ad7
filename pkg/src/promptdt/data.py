"""Offline trajectory storage, return-to-go, prompt sampling, and batching.

Token streams follow the (return-to-go, state, action) per-step convention:
a short prompt window from the target task is prepended to a context window
of the training trajectory, and short contexts are left-padded so action
prediction positions stay aligned at the right edge.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, ContractError, DataError
from .ntio import load_tensors

STD_FLOOR = 1e-6


@dataclass
class Trajectory:
    states: np.ndarray  # [T, ds]
    actions: np.ndarray  # [T, da]
    rewards: np.ndarray  # [T]
    task_id: int

    def __post_init__(self):
        t = len(self.rewards)
        if t < 1 or len(self.states) != t or len(self.actions) != t:
            raise ContractError("trajectory arrays must share a leading length >= 1")

    @property
    def length(self) -> int:
        return len(self.rewards)


@dataclass
class Prompt:
    rtg: np.ndarray  # [K*]
    states: np.ndarray  # [K*, ds]
    actions: np.ndarray  # [K*, da]
    timesteps: np.ndarray  # [K*] absolute indices in the source episode
    task_id: int

    @property
    def length(self) -> int:
        return len(self.rtg)


@dataclass
class InputSequence:
    prompt: Prompt
    rtg: np.ndarray  # [K]
    states: np.ndarray  # [K, ds]
    actions: np.ndarray  # [K, da]
    timesteps: np.ndarray  # [K]
    pad_mask: np.ndarray  # [K* + K]; 1 = real step, 0 = pad
    task_id: int


@dataclass
class NormStats:
    state_mean: np.ndarray
    state_std: np.ndarray
    return_scale: float

    def to_dict(self) -> dict:
        return {
            "state_mean": self.state_mean.tolist(),
            "state_std": self.state_std.tolist(),
            "return_scale": self.return_scale,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(
            state_mean=np.asarray(d["state_mean"], dtype=np.float64),
            state_std=np.asarray(d["state_std"], dtype=np.float64),
            return_scale=float(d["return_scale"]),
        )


@dataclass
class TaskDataset:
    """All tasks of one family, loaded into memory."""

    meta: dict
    trajectories: dict[int, list[Trajectory]] = field(default_factory=dict)
    stats: NormStats | None = None

    @property
    def family(self) -> str:
        return self.meta["family"]

    @property
    def ds(self) -> int:
        return int(self.meta["ds"])

    @property
    def da(self) -> int:
        return int(self.meta["da"])

    @property
    def train_task_ids(self) -> list[int]:
        return list(self.meta["train_tasks"])

    @property
    def test_task_ids(self) -> list[int]:
        return list(self.meta["test_tasks"])


def load_dataset(path) -> TaskDataset:
    path = Path(path)
    meta_path = path / "meta.json"
    if not meta_path.exists():
        raise DataError(f"no dataset at {path}: missing {meta_path}")
    meta = json.loads(meta_path.read_text())
    ds = TaskDataset(meta=meta)
    for t in meta["tasks"]:
        tid = int(t["index"])
        arrays = load_tensors(path / f"task_{tid}.nt")
        states, actions, rewards = arrays["states"], arrays["actions"], arrays["rewards"]
        ds.trajectories[tid] = [
            Trajectory(states[i], actions[i], rewards[i], tid) for i in range(states.shape[0])
        ]
    if meta.get("norm"):
        ds.stats = NormStats.from_dict(meta["norm"])
    return ds


def compute_returns_to_go(rewards: np.ndarray) -> np.ndarray:
    """Undiscounted suffix sums: out[i] = sum of rewards[i:]."""
    r = np.asarray(rewards)
    if r.size == 0:
        raise ContractError("returns-to-go of an empty reward sequence")
    if not np.all(np.isfinite(r)):
        raise ContractError("rewards must be finite")
    return np.cumsum(r[::-1])[::-1].copy()


def normalize(dataset: TaskDataset) -> tuple[TaskDataset, NormStats]:
    """Z-score states over the training split; fix the return scale.

    The return scale is the maximum absolute episode return across training
    trajectories; returns-to-go are divided by it at batch-assembly time.
    """
    train_states = np.concatenate(
        [tr.states for tid in dataset.train_task_ids for tr in dataset.trajectories[tid]]
    )
    mean = train_states.mean(axis=0, dtype=np.float64)
    std = np.maximum(train_states.std(axis=0, dtype=np.float64), STD_FLOOR)
    scale = max(
        (abs(float(tr.rewards.sum())) for tid in dataset.train_task_ids for tr in dataset.trajectories[tid]),
        default=1.0,
    )
    scale = max(scale, STD_FLOOR)
    stats = NormStats(state_mean=mean, state_std=std, return_scale=scale)
    out = TaskDataset(meta=dict(dataset.meta), stats=stats)
    for tid, trajs in dataset.trajectories.items():
        out.trajectories[tid] = [
            Trajectory(
                ((tr.states - mean) / std).astype(tr.states.dtype),
                tr.actions,
                tr.rewards,
                tid,
            )
            for tr in trajs
        ]
    out.meta["norm"] = stats.to_dict()
    return out, stats


def normalize_state(state: np.ndarray, stats: NormStats) -> np.ndarray:
    return (state - stats.state_mean) / stats.state_std


def denormalize_state(state: np.ndarray, stats: NormStats) -> np.ndarray:
    return state * stats.state_std + stats.state_mean


def subsample_dataset(dataset: TaskDataset, ratio: float, rng: np.random.Generator) -> TaskDataset:
    """Uniformly keep ceil(ratio * n) trajectories per task."""
    if not (0.0 < ratio <= 1.0):
        raise ConfigError(f"subsample ratio must be in (0, 1], got {ratio}")
    if ratio == 1.0:
        return dataset
    out = TaskDataset(meta=dict(dataset.meta), stats=dataset.stats)
    for tid, trajs in dataset.trajectories.items():
        keep = math.ceil(ratio * len(trajs))
        idx = rng.choice(len(trajs), size=keep, replace=False)
        out.trajectories[tid] = [trajs[i] for i in sorted(idx)]
    return out


def _rtg_scaled(traj: Trajectory, stats: NormStats | None) -> np.ndarray:
    rtg = compute_returns_to_go(traj.rewards)
    if stats is not None:
        rtg = rtg / stats.return_scale
    return rtg


def sample_prompt(dataset: TaskDataset, task_id: int, k_star: int, rng: np.random.Generator) -> Prompt:
    """A contiguous k_star-step window from a uniformly chosen trajectory.

    Returns-to-go are computed over the full source trajectory, then sliced.
    """
    trajs = dataset.trajectories.get(task_id)
    if not trajs:
        raise DataError(f"task {task_id} has no trajectories")
    eligible = [t for t in trajs if t.length >= k_star]
    if not eligible:
        raise DataError(f"task {task_id} has no trajectory of length >= {k_star}")
    traj = eligible[int(rng.integers(len(eligible)))]
    start = int(rng.integers(traj.length - k_star + 1))
    rtg = _rtg_scaled(traj, dataset.stats)
    sl = slice(start, start + k_star)
    return Prompt(
        rtg=rtg[sl].astype(np.float32),
        states=traj.states[sl].astype(np.float32),
        actions=traj.actions[sl].astype(np.float32),
        timesteps=np.arange(start, start + k_star),
        task_id=task_id,
    )


def build_input(prompt: Prompt, trajectory: Trajectory, start: int, k: int, stats: NormStats | None = None) -> InputSequence:
    """Window [start, start + k) of the trajectory behind the prompt.

    Windows reaching past the trajectory end (or shorter trajectories) are
    left-padded with zero steps; the pad mask marks padded steps.
    """
    if k <= 0:
        raise ConfigError(f"context length must be positive, got {k}")
    t = trajectory.length
    start = max(0, min(start, t - 1))
    end = min(start + k, t)
    n_real = end - start
    n_pad = k - n_real
    ds = trajectory.states.shape[1]
    da = trajectory.actions.shape[1]
    rtg_full = _rtg_scaled(trajectory, stats)

    def pad_left(arr, width):
        if n_pad == 0:
            return arr
        return np.concatenate([np.zeros((n_pad,) + arr.shape[1:], dtype=arr.dtype), arr])

    states = pad_left(trajectory.states[start:end].astype(np.float32), ds)
    actions = pad_left(trajectory.actions[start:end].astype(np.float32), da)
    rtg = pad_left(rtg_full[start:end].astype(np.float32), 1)
    timesteps = np.concatenate([np.zeros(n_pad, dtype=np.int64), np.arange(start, end)])
    pad_mask = np.concatenate(
        [np.ones(prompt.length, dtype=np.float32), np.zeros(n_pad, dtype=np.float32), np.ones(n_real, dtype=np.float32)]
    )
    return InputSequence(
        prompt=prompt,
        rtg=rtg,
        states=states,
        actions=actions,
        timesteps=timesteps,
        pad_mask=pad_mask,
        task_id=trajectory.task_id,
    )


def sample_batch(
    dataset: TaskDataset,
    batch_per_task: int,
    k: int,
    k_star: int,
    rng: np.random.Generator,
    task_ids: list[int] | None = None,
) -> list[InputSequence]:
    """A batch with batch_per_task sequences from every training task.

    The prompt and the trajectory segment of each sequence come from the same
    task (possibly different episodes).
    """
    if task_ids is None:
        task_ids = dataset.train_task_ids
    if not task_ids:
        raise DataError("no tasks to sample from")
    batch = []
    for tid in task_ids:
        trajs = dataset.trajectories.get(tid)
        if not trajs:
            raise DataError(f"task {tid} has no trajectories")
        for _ in range(batch_per_task):
            prompt = sample_prompt(dataset, tid, k_star, rng)
            traj = trajs[int(rng.integers(len(trajs)))]
            start = int(rng.integers(traj.length))
            batch.append(build_input(prompt, traj, start, k, dataset.stats))
    return batch
