"""Accuracy, success rate, continual-learning metrics and predictor diagnostics."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import taskforge
from .corpus import DemoSet, episode_seeds
from .errors import InvalidArgument, UndefinedMetricError
from .nets import choose_action, predict_batch
from .taskforge import TaskSpec


class ExpertPolicy:
    """The scripted expert behind the policy interface; reads the state back out of the frame."""

    def __init__(self, task: TaskSpec):
        self.task = task
        self.cfg = type("cfg", (), {"n_actions": task.n_actions})

    def action_probs(self, frames) -> np.ndarray:
        frames = np.asarray(frames)
        out = np.zeros((len(frames), self.task.n_actions))
        for i, f in enumerate(frames):
            out[i, taskforge.expert_action(self.task, taskforge.decode_frame(self.task, f))] = 1.0
        return out


class FixedPolicy:
    """Returns the same probability vector for every frame."""

    def __init__(self, probs):
        self.probs = np.asarray(probs, dtype=np.float64)
        self.cfg = type("cfg", (), {"n_actions": len(self.probs)})

    def action_probs(self, frames) -> np.ndarray:
        return np.tile(self.probs, (len(frames), 1))


def eval_accuracy(policy, heldout: DemoSet, batch_size: int = 256) -> float:
    """Fraction of held-out state-action pairs where the greedy action matches the expert's."""
    if heldout is None or not heldout.trajectories:
        raise InvalidArgument("eval_accuracy needs a non-empty held-out set")
    frames = np.concatenate([tr.frames[:-1] for tr in heldout.trajectories])
    actions = np.concatenate([tr.actions for tr in heldout.trajectories])
    hits = 0
    for i in range(0, len(frames), batch_size):
        probs = policy.action_probs(frames[i:i + batch_size])
        hits += int((probs.argmax(axis=1) == actions[i:i + batch_size]).sum())
    return hits / len(actions)


def eval_success(policy, task: TaskSpec, n_episodes: int, seed, mode: str = "greedy") -> float:
    """Fraction of closed-loop rollouts that end in a solved state."""
    if n_episodes < 1:
        raise InvalidArgument("n_episodes must be >= 1")
    rng = np.random.default_rng(seed) if mode == "sample" else None
    wins = 0
    for ep in episode_seeds(seed, n_episodes):
        state = taskforge.reset(task, ep)
        while not state.done:
            probs = policy.action_probs(taskforge.render(task, state)[None])[0]
            state = taskforge.step(task, state, choose_action(probs, mode, rng))
        wins += bool(state.succeeded)
    return wins / n_episodes


@dataclass
class AccuracyMatrix:
    """``alpha[(i, j)]``: accuracy on task ``j`` after training task ``i`` (1-based, ``j <= i``)."""

    alpha: dict
    n_tasks: int
    alpha_ideal: float = 1.0

    def __post_init__(self):
        if self.alpha_ideal <= 0:
            raise InvalidArgument("alpha_ideal must be > 0")
        for v in self.alpha.values():
            if not 0.0 <= v <= 1.0:
                raise InvalidArgument(f"accuracy {v} outside [0, 1]")

    @classmethod
    def from_rows(cls, rows, alpha_ideal: float = 1.0) -> "AccuracyMatrix":
        """``rows[i-1][j-1]`` holds alpha for j <= i; extra entries are ignored."""
        alpha = {(i + 1, j + 1): float(rows[i][j]) for i in range(len(rows)) for j in range(i + 1)}
        return cls(alpha, len(rows), alpha_ideal)

    def missing(self) -> list:
        return [(i, j) for i in range(1, self.n_tasks + 1) for j in range(1, i + 1)
                if (i, j) not in self.alpha]

    def __getitem__(self, ij):
        return self.alpha[ij]


@dataclass(frozen=True)
class OmegaScores:
    omega_base: float
    omega_new: float
    omega_all: float


def omega_scores(matrix: AccuracyMatrix) -> OmegaScores:
    """Retention of task 1, new-task accuracy and all-task accuracy, averaged over i = 2..N."""
    n = matrix.n_tasks
    if n < 2:
        raise UndefinedMetricError("omega metrics need at least two tasks")
    missing = matrix.missing()
    if missing:
        raise UndefinedMetricError(f"accuracy matrix incomplete, missing {missing}")
    a, ideal = matrix.alpha, matrix.alpha_ideal
    rng = range(2, n + 1)
    base = sum(a[(i, 1)] / ideal for i in rng) / (n - 1)
    new = sum(a[(i, i)] for i in rng) / (n - 1)
    allt = sum(sum(a[(i, j)] for j in range(1, i + 1)) / i / ideal for i in rng) / (n - 1)
    return OmegaScores(base, new, allt)


def set_alpha_ideal(mode: str = "unit", joint_accuracy=None) -> float:
    if mode == "unit":
        return 1.0
    if mode == "joint_oracle":
        if joint_accuracy is None:
            raise InvalidArgument("joint_oracle mode needs the joint policy's accuracy")
        if not 0 < joint_accuracy <= 1:
            raise InvalidArgument("joint accuracy must lie in (0, 1]")
        return float(joint_accuracy)
    raise InvalidArgument(f"unknown alpha_ideal mode {mode!r}")


def rollout_fidelity(predictor, task: TaskSpec, n_episodes: int, seed) -> np.ndarray:
    """Mean per-pixel MSE between the open-loop predictor rollout and the true frames.

    Episodes are expert rollouts; the predictor starts from the true first
    frame and replays the same actions.  Entry ``k`` averages step ``k + 1``
    over the episodes that last that long.
    """
    if n_episodes < 1:
        raise InvalidArgument("n_episodes must be >= 1")
    sums: list = []
    counts: list = []
    for ep in episode_seeds(seed, n_episodes):
        states, actions = taskforge.expert_rollout(task, ep)
        true = np.stack([taskforge.render(task, s) for s in states])
        frame = true[:1]
        for k, a in enumerate(actions):
            frame = _predict(predictor, frame, a)
            err = float(np.mean((frame[0] - true[k + 1]) ** 2))
            if k == len(sums):
                sums.append(0.0)
                counts.append(0)
            sums[k] += err
            counts[k] += 1
    return np.array(sums) / np.array(counts)


def _predict(predictor, frames, action):
    if hasattr(predictor, "predict"):
        return predictor.predict(frames, [action])
    return predict_batch(predictor, frames, [action])


class EnvPredictor:
    """The true dynamics behind the predictor interface (decode, step, render)."""

    def __init__(self, task: TaskSpec):
        self.task = task

    def predict(self, frames, actions) -> np.ndarray:
        out = []
        for f, a in zip(frames, actions):
            s = taskforge.decode_frame(self.task, f)
            out.append(taskforge.render(self.task, taskforge.step(self.task, s, int(a))))
        return np.stack(out)


def one_step_mse(predictor, heldout: DemoSet) -> float:
    """Per-pixel MSE of one-step predictions on held-out transitions."""
    errs = []
    for tr in heldout.trajectories:
        pred = predict_batch(predictor, tr.frames[:-1], tr.actions)
        errs.append(((pred - tr.frames[1:]) ** 2).reshape(len(pred), -1).mean(axis=1))
    return float(np.concatenate(errs).mean())


def matrix_from_records(records: Mapping, n_tasks: int, alpha_ideal: float = 1.0) -> AccuracyMatrix:
    return AccuracyMatrix(dict(records), n_tasks, alpha_ideal)
