"""Trajectories, demonstration sets, the per-task replay buffer and dataset I/O."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from PIL import Image

from . import taskforge
from .errors import (
    ActionRangeError,
    CollectionError,
    ContractViolation,
    InvalidArgument,
    LayoutError,
    MissingMetadataError,
    ShapeMismatchError,
)
from .taskforge import TaskSpec

DATASET_FORMAT_VERSION = 1
REAL, PSEUDO = "real", "pseudo"

# stride between the episode seeds of two collection seeds
EPISODE_SEED_STRIDE = 1_000_003


def _frozen(arr, dtype):
    out = np.array(arr, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Frames ``f_0..f_L`` and actions ``a_0..a_{L-1}``; ``a_k`` leads from ``f_k`` to ``f_{k+1}``."""

    frames: np.ndarray
    actions: np.ndarray
    task_tag: Optional[int] = None
    provenance: str = REAL
    truncated: bool = False

    def __post_init__(self):
        frames = self.frames
        if not (isinstance(frames, np.ndarray) and frames.dtype == np.float32 and not frames.flags.writeable):
            frames = _frozen(frames, np.float32)
        object.__setattr__(self, "frames", frames)
        object.__setattr__(self, "actions", _frozen(self.actions, np.int64))
        if self.provenance not in (REAL, PSEUDO):
            raise InvalidArgument(f"provenance must be {REAL!r} or {PSEUDO!r}")
        if self.frames.ndim != 4 or self.frames.shape[-1] != 3:
            raise InvalidArgument(f"frames must be (L+1, H, W, 3), got {self.frames.shape}")
        if len(self.actions) < 1 or len(self.frames) != len(self.actions) + 1:
            raise InvalidArgument("need len(frames) == len(actions) + 1 >= 2")
        if self.provenance == REAL and self.task_tag is None:
            raise InvalidArgument("real trajectories must carry a task_tag")

    def __len__(self):
        return len(self.actions)

    def __eq__(self, other):
        if not isinstance(other, Trajectory):
            return NotImplemented
        return (
            self.task_tag == other.task_tag
            and self.provenance == other.provenance
            and self.truncated == other.truncated
            and np.array_equal(self.actions, other.actions)
            and self.frames.shape == other.frames.shape
            and np.array_equal(self.frames, other.frames)
        )

    __hash__ = None


@dataclass(frozen=True)
class DemoSet:
    trajectories: tuple
    task: TaskSpec
    collection_seed: int

    def __post_init__(self):
        object.__setattr__(self, "trajectories", tuple(self.trajectories))
        if not self.trajectories:
            raise InvalidArgument("a DemoSet needs at least one trajectory")
        for tr in self.trajectories:
            if tr.provenance != REAL or tr.task_tag != self.task.task_id:
                raise InvalidArgument("DemoSet trajectories must be real and share the task's id")

    def __len__(self):
        return len(self.trajectories)

    @property
    def mean_length(self) -> float:
        return float(np.mean([len(t) for t in self.trajectories]))


def episode_seeds(seed: int, m: int) -> list[int]:
    return [seed * EPISODE_SEED_STRIDE + k for k in range(m)]


def collect_demos(task: TaskSpec, m: int, seed: int) -> DemoSet:
    """Roll out the scripted expert from ``m`` distinct resets derived from ``seed``."""
    if m < 1:
        raise InvalidArgument("m must be >= 1")
    trajs = []
    for ep in episode_seeds(seed, m):
        states, actions = taskforge.expert_rollout(task, ep)
        if not states[-1].succeeded:
            raise CollectionError(f"expert failed task {task.task_id} from episode seed {ep}")
        frames = np.stack([taskforge.render(task, s) for s in states])
        trajs.append(Trajectory(frames, actions, task_tag=task.task_id, provenance=REAL))
    return DemoSet(tuple(trajs), task, seed)


# -- frame hashing --------------------------------------------------------

def frame_hash(frame: np.ndarray) -> str:
    return hashlib.sha1(np.ascontiguousarray(frame, dtype=np.float32).tobytes()).hexdigest()


def frame_hashes(trajectories: Iterable[Trajectory]) -> set[str]:
    return {frame_hash(f) for tr in trajectories for f in tr.frames}


# -- replay buffer --------------------------------------------------------

class ReplayBuffer:
    """The mixture of new-task demonstrations and replayed data for task ``t``.

    Becomes unusable after :meth:`delete`.
    """

    def __init__(self, entries: Sequence[Trajectory], task_index_t: int, current_task_tag=None):
        self._entries = list(entries)
        self.task_index_t = int(task_index_t)
        self.current_task_tag = current_task_tag
        self._pool = None
        self.deleted = False

    @property
    def entries(self) -> list[Trajectory]:
        if self.deleted:
            raise ContractViolation("replay buffer was deleted")
        return self._entries

    def __len__(self):
        return len(self.entries)

    def delete(self) -> None:
        self._entries = []
        self._pool = None
        self.deleted = True

    def pair_pool(self) -> "PairPool":
        if self._pool is None:
            self._pool = PairPool(self.entries)
        return self._pool

    def composition_report(self) -> dict:
        """Exact entry and pair counts by provenance, plus effective pair weights.

        ``rehearsed`` counts real trajectories from earlier tasks.
        """
        counts = {"real": 0, "pseudo": 0, "rehearsed": 0}
        pairs = {"real": 0, "pseudo": 0, "rehearsed": 0}
        by_tag: dict = {}
        for tr in self.entries:
            if tr.provenance == PSEUDO:
                key = "pseudo"
            elif tr.task_tag == self.current_task_tag or self.current_task_tag is None:
                key = "real"
            else:
                key = "rehearsed"
            counts[key] += 1
            pairs[key] += len(tr)
            # string keys keep the report JSON-serialisable with sorted keys
            tag = "untagged" if tr.task_tag is None else str(tr.task_tag)
            by_tag[tag] = by_tag.get(tag, 0) + len(tr)
        total = sum(pairs.values())
        return {
            "t": self.task_index_t,
            "entries": counts,
            "pairs": pairs,
            "total_pairs": total,
            "pair_fraction": {k: (v / total if total else 0.0) for k, v in pairs.items()},
            "tag_pair_fraction": {k: v / total for k, v in by_tag.items()} if total else {},
        }


def buffer_prepare(demos: DemoSet, pseudo: Sequence[Trajectory] = (), *,
                   rehearsed: Sequence[Trajectory] = (), t: Optional[int] = None) -> ReplayBuffer:
    """Put the new task's demos and the replayed trajectories into a fresh buffer.

    ``pseudo`` must be generated data; real data of earlier tasks (rehearsal
    only) goes in ``rehearsed``.  ``t`` defaults to the demos' task id.
    """
    if demos is None or len(demos.trajectories) == 0:
        raise InvalidArgument("buffer_prepare needs demonstrations")
    for tr in pseudo:
        if tr.provenance != PSEUDO:
            raise InvalidArgument("pseudo trajectories must have provenance 'pseudo'")
    for tr in rehearsed:
        if tr.provenance != REAL:
            raise InvalidArgument("rehearsed trajectories must be real")
    t = demos.task.task_id if t is None else t
    entries = list(demos.trajectories) + list(rehearsed) + list(pseudo)
    return ReplayBuffer(entries, t, current_task_tag=demos.task.task_id)


class PairPool:
    """All (frame, action) pairs and (frame, action, next frame) transitions of a buffer."""

    def __init__(self, entries: Sequence[Trajectory]):
        if not entries:
            raise InvalidArgument("cannot pool an empty buffer")
        self.entries = list(entries)
        traj_idx, step_idx = [], []
        for i, tr in enumerate(self.entries):
            traj_idx.append(np.full(len(tr), i))
            step_idx.append(np.arange(len(tr)))
        self.traj_idx = np.concatenate(traj_idx)
        self.step_idx = np.concatenate(step_idx)
        self.lengths = np.array([len(tr) for tr in self.entries])

    def __len__(self):
        return len(self.traj_idx)

    def draw(self, rng: np.random.Generator, batch_size: int, length_corrected: bool = False) -> np.ndarray:
        if batch_size < 1:
            raise InvalidArgument("batch_size must be >= 1")
        if length_corrected:
            w = 1.0 / self.lengths[self.traj_idx]
            return rng.choice(len(self), size=batch_size, p=w / w.sum())
        return rng.integers(0, len(self), size=batch_size)

    def frames(self, idx, offset=0) -> np.ndarray:
        return np.stack([self.entries[self.traj_idx[i]].frames[self.step_idx[i] + offset] for i in idx])

    def actions(self, idx) -> np.ndarray:
        return np.array([self.entries[self.traj_idx[i]].actions[self.step_idx[i]] for i in idx], dtype=np.int64)

    def first_frames(self) -> np.ndarray:
        return np.stack([tr.frames[0] for tr in self.entries])

    def all_frames(self) -> np.ndarray:
        """Every state frame (the frames that carry an action label)."""
        return np.concatenate([tr.frames[:-1] for tr in self.entries])


def _as_rng(rng_seed) -> np.random.Generator:
    if isinstance(rng_seed, np.random.Generator):
        return rng_seed
    return np.random.default_rng(rng_seed)


def sample_pairs(buffer: ReplayBuffer, batch_size: int, rng_seed, *, length_corrected: bool = False):
    """Uniform draw of ``batch_size`` state-action pairs pooled over the whole buffer.

    Returns ``(frames, actions)`` with shapes ``(B, H, W, 3)`` and ``(B,)``.
    With ``length_corrected`` every trajectory gets equal total weight
    instead of weight proportional to its length.
    """
    if batch_size < 1:
        raise InvalidArgument("batch_size must be >= 1")
    if not buffer.entries:
        raise InvalidArgument("cannot sample from an empty buffer")
    pool = buffer.pair_pool()
    idx = pool.draw(_as_rng(rng_seed), batch_size, length_corrected)
    return pool.frames(idx), pool.actions(idx)


def sample_transitions(buffer: ReplayBuffer, batch_size: int, rng_seed):
    """Uniform draw of ``(frame, action, next_frame)`` transitions."""
    pool = buffer.pair_pool()
    idx = pool.draw(_as_rng(rng_seed), batch_size)
    return pool.frames(idx), pool.actions(idx), pool.frames(idx, offset=1)


# -- dataset persistence --------------------------------------------------

_TRAJ_RE = re.compile(r"^traj_(\d+)$")
_FRAME_RE = re.compile(r"^frame_(\d+)\.png$")


def _png_bytes(frame: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(taskforge.denormalize(frame), mode="RGB").save(buf, format="PNG", optimize=False)
    return buf.getvalue()


def save_trajectories(trajectories: Sequence[Trajectory], directory, meta: dict) -> Path:
    """Write trajectories under ``directory`` in the dataset layout.

    ``meta`` is merged into ``meta.json``; per-trajectory provenance, tags
    and truncation flags are always recorded.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for k, tr in enumerate(trajectories):
        tdir = directory / f"traj_{k}"
        tdir.mkdir(exist_ok=True)
        for j, frame in enumerate(tr.frames):
            (tdir / f"frame_{j}.png").write_bytes(_png_bytes(frame))
        (tdir / "actions.csv").write_text("".join(f"{int(a)}\n" for a in tr.actions))
    full = dict(meta)
    full.update(
        format_version=DATASET_FORMAT_VERSION,
        n_trajectories=len(trajectories),
        lengths=[len(tr) for tr in trajectories],
        provenance=[tr.provenance for tr in trajectories],
        task_tags=[tr.task_tag for tr in trajectories],
        truncated=[bool(tr.truncated) for tr in trajectories],
    )
    (directory / "meta.json").write_text(json.dumps(full, sort_keys=True, indent=2) + "\n")
    return directory


def task_dir(root, task_id: int) -> Path:
    return Path(root) / f"task_{task_id}"


def save_dataset(demos: DemoSet, root) -> Path:
    """Save under ``<root>/task_<id>/``; returns that task directory."""
    task = demos.task
    meta = {
        "kind": "demos",
        "task": taskforge.task_to_dict(task),
        "task_id": task.task_id,
        "grid_size": task.grid_size,
        "image_size": task.image_size,
        "collection_seed": demos.collection_seed,
    }
    return save_trajectories(demos.trajectories, task_dir(root, task.task_id), meta)


def load_trajectories(directory, n_actions: Optional[int] = None):
    """Read a dataset directory; returns ``(trajectories, meta)``."""
    directory = Path(directory)
    meta_path = directory / "meta.json"
    if not meta_path.is_file():
        raise MissingMetadataError(f"{meta_path} not found")
    meta = json.loads(meta_path.read_text())
    if meta.get("format_version") != DATASET_FORMAT_VERSION:
        raise LayoutError(f"unsupported dataset format_version {meta.get('format_version')!r}")
    n = meta["n_trajectories"]
    found = sorted(int(m.group(1)) for p in directory.iterdir() if (m := _TRAJ_RE.match(p.name)))
    if found != list(range(n)):
        raise LayoutError(f"{directory}: expected traj_0..traj_{n - 1}, found {found}")
    size = meta.get("image_size")
    if n_actions is None and "task" in meta:
        n_actions = taskforge.task_from_dict(meta["task"]).n_actions
    trajs = []
    for k in range(n):
        tdir = directory / f"traj_{k}"
        apath = tdir / "actions.csv"
        if not apath.is_file():
            raise LayoutError(f"{tdir.name}: actions.csv missing")
        with apath.open() as fh:
            actions = [int(row[0]) for row in csv.reader(fh) if row]
        if n_actions is not None and any(not 0 <= a < n_actions for a in actions):
            raise ActionRangeError(f"{tdir.name}: action outside 0..{n_actions - 1}")
        frame_ids = sorted(int(m.group(1)) for p in tdir.iterdir() if (m := _FRAME_RE.match(p.name)))
        if frame_ids != list(range(len(actions) + 1)):
            raise LayoutError(f"{tdir.name}: expected {len(actions) + 1} frames, found {len(frame_ids)}")
        frames = []
        for j in frame_ids:
            with Image.open(tdir / f"frame_{j}.png") as im:
                img = np.asarray(im.convert("RGB"))
            if size is not None and img.shape != (size, size, 3):
                raise ShapeMismatchError(
                    f"{tdir.name}/frame_{j}.png has shape {img.shape}, expected {(size, size, 3)}"
                )
            frames.append(taskforge.normalize(img))
        trajs.append(
            Trajectory(
                np.stack(frames),
                actions,
                task_tag=meta["task_tags"][k],
                provenance=meta["provenance"][k],
                truncated=meta["truncated"][k],
            )
        )
    return trajs, meta


def load_dataset(path) -> DemoSet:
    """Load a task directory written by :func:`save_dataset`."""
    trajs, meta = load_trajectories(path)
    if "task" not in meta:
        raise MissingMetadataError(f"{path}: meta.json carries no task description")
    task = taskforge.task_from_dict(meta["task"])
    return DemoSet(tuple(trajs), task, meta["collection_seed"])
