"""Strategies that provide earlier-task data when a new task arrives.

``finetune``        nothing
``rehearsal``       the stored real demonstrations
``original_dgr``    independent generated frames labelled by the policy
``trajectory_dgr``  whole generated videos labelled by the policy
``cril``            generated first frames unrolled by policy + predictor
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch
from torch import nn

from .corpus import PSEUDO, REAL, DemoSet, Trajectory
from .errors import InconsistencyError, InvalidArgument
from .nets import (
    CriticNet,
    GeneratorNet,
    ModelBundle,
    NetConfig,
    choose_action,
    predict_next,
    sample_first_frames,
    to_frames,
)


class StrategyKind(str, enum.Enum):
    FINETUNE = "finetune"
    REHEARSAL = "rehearsal"
    ORIGINAL_DGR = "original_dgr"
    TRAJECTORY_DGR = "trajectory_dgr"
    CRIL = "cril"

    @classmethod
    def parse(cls, name) -> "StrategyKind":
        try:
            return cls(name)
        except ValueError:
            valid = ", ".join(k.value for k in cls)
            raise InvalidArgument(f"unknown strategy {name!r}; valid strategies: {valid}") from None


def _task_seed(rng_seed, i: int) -> int:
    return int(np.random.SeedSequence([int(rng_seed), i]).generate_state(1)[0])


# -- CRIL -----------------------------------------------------------------

def rollout_from(bundle: ModelBundle, first_frame, t_max: int, stop: int,
                 mode: str = "greedy", rng=None) -> Trajectory:
    """Unroll policy and predictor from one frame until STOP or ``t_max`` actions."""
    frames = [np.asarray(first_frame, dtype=np.float32)]
    actions = []
    while len(actions) < t_max:
        a = choose_action(bundle.policy.action_probs(frames[-1][None])[0], mode, rng)
        frames.append(predict_next(bundle.predictor, frames[-1], a))
        actions.append(a)
        if a == stop:
            break
    return Trajectory(np.stack(frames), actions, task_tag=None, provenance=PSEUDO,
                      truncated=actions[-1] != stop)


def cril_generate(bundle: ModelBundle, m_per_task: int, t: int, rng_seed, *,
                  t_max: int, mode: str = "greedy") -> list[Trajectory]:
    """``(t-1) * m_per_task`` pseudo trajectories; each step is ``predict_next`` of the previous one."""
    if t < 2:
        raise InvalidArgument("CRIL generation needs at least one learned task (t >= 2)")
    stop = bundle.cfg.n_actions - 1
    rng = np.random.default_rng(rng_seed) if mode == "sample" else None
    out = []
    for i in range(1, t):
        firsts = sample_first_frames(bundle.generator, m_per_task, _task_seed(rng_seed, i))
        out.extend(rollout_from(bundle, f, t_max, stop, mode, rng) for f in firsts)
    return out


# -- Original DGR ---------------------------------------------------------

def original_dgr_count(m_per_task: int, t: int, oversample: int, mean_demo_length: float) -> int:
    return int(round(oversample * (t - 1) * m_per_task * mean_demo_length))


@torch.no_grad()
def original_dgr_generate(bundle: ModelBundle, m_per_task: int, t: int, oversample: int = 10,
                          rng_seed=0, *, mean_demo_length: float, chunk: int = 256) -> list[Trajectory]:
    """Independent generated frames, each labelled with the greedy policy action.

    Each pair is wrapped as a one-action trajectory whose next frame repeats
    the state frame (the next state is unknown); it is flagged truncated.
    """
    if t < 2:
        raise InvalidArgument("Original DGR generation needs t >= 2")
    if oversample < 1:
        raise InvalidArgument("oversample must be >= 1")
    n = original_dgr_count(m_per_task, t, oversample, mean_demo_length)
    out = []
    done = 0
    while done < n:
        k = min(chunk, n - done)
        frames = np.stack(sample_first_frames(bundle.generator, k, _task_seed(rng_seed, done)))
        labels = bundle.policy.action_probs(frames).argmax(axis=1)
        for f, a in zip(frames, labels):
            f.setflags(write=False)
            out.append(Trajectory(np.broadcast_to(f, (2,) + f.shape), [int(a)],
                                  task_tag=None, provenance=PSEUDO, truncated=True))
        done += k
    return out


# -- Trajectory DGR -------------------------------------------------------

@dataclass
class VideoConfig:
    length: int = 16
    content_dim: int = 16
    motion_dim: int = 16
    noise_dim: int = 8
    window: int = 4


class VideoGeneratorNet(nn.Module):
    """Content latent plus recurrent motion latents, decoded frame by frame."""

    def __init__(self, cfg: NetConfig, vcfg: VideoConfig):
        super().__init__()
        self.cfg, self.vcfg = cfg, vcfg
        self.h0 = nn.Linear(vcfg.noise_dim, vcfg.motion_dim)
        self.rnn = nn.GRUCell(vcfg.noise_dim, vcfg.motion_dim)
        dec_cfg = NetConfig(image_size=cfg.image_size, n_actions=cfg.n_actions,
                            z_dim=vcfg.content_dim + vcfg.motion_dim, width=cfg.width)
        self.decoder = GeneratorNet(dec_cfg)

    def latents(self, n: int, generator: Optional[torch.Generator] = None):
        v = self.vcfg
        zc = torch.randn(n, v.content_dim, generator=generator)
        eps = torch.randn(n, v.length, v.noise_dim, generator=generator)
        return zc, eps

    def forward(self, zc, eps):
        """Videos ``(B, T, 3, H, W)``."""
        b, steps = eps.shape[:2]
        h = torch.tanh(self.h0(eps[:, 0]))
        motion = []
        for i in range(steps):
            h = self.rnn(eps[:, i], h)
            motion.append(h)
        motion = torch.stack(motion, 1)
        z = torch.cat([zc[:, None].expand(-1, steps, -1), motion], dim=2)
        frames = self.decoder(z.reshape(b * steps, -1))
        return frames.view(b, steps, *frames.shape[1:])

    @torch.no_grad()
    def sample(self, n: int, rng_seed) -> np.ndarray:
        g = torch.Generator().manual_seed(int(rng_seed))
        video = self(*self.latents(n, g))
        return np.stack([to_frames(v) for v in video])


VIDEO_NETWORKS = ("video_generator", "video_image_critic", "video_sequence_critic")


def attach_video_networks(bundle: ModelBundle, vcfg: VideoConfig = None) -> ModelBundle:
    if "video_generator" in bundle.networks:
        return bundle
    vcfg = vcfg or VideoConfig()
    oc = bundle.optim_cfg
    bundle.add_network("video_generator", VideoGeneratorNet(bundle.cfg, vcfg), oc.lr_generator, oc.gan_betas)
    bundle.add_network("video_image_critic", CriticNet(bundle.cfg), oc.lr_critic, oc.gan_betas)
    bundle.add_network("video_sequence_critic", CriticNet(bundle.cfg, in_ch=3 * vcfg.window),
                       oc.lr_critic, oc.gan_betas)
    return bundle


def trajectory_dgr_generate(video_gen: VideoGeneratorNet, policy, m_per_task: int, t: int,
                            rng_seed) -> list[Trajectory]:
    """``(t-1) * m_per_task`` generated videos with greedy policy labels on all but the last frame."""
    if t < 2:
        raise InvalidArgument("Trajectory DGR generation needs t >= 2")
    stop = policy.cfg.n_actions - 1
    videos = video_gen.sample((t - 1) * m_per_task, rng_seed)
    out = []
    for v in videos:
        actions = policy.action_probs(v[:-1]).argmax(axis=1)
        out.append(Trajectory(v, actions, task_tag=None, provenance=PSEUDO,
                              truncated=int(actions[-1]) != stop))
    return out


# -- real-data baselines --------------------------------------------------

def rehearsal_provide(archive: dict, t: int) -> list[Trajectory]:
    """All stored demonstrations of tasks ``1..t-1`` in task order."""
    out = []
    for tid in range(1, t):
        if tid not in archive:
            raise InconsistencyError(f"rehearsal archive has no demonstrations for task {tid}")
        out.extend(archive[tid].trajectories)
    return out


def finetune_provide(t: int) -> list[Trajectory]:
    return []


# -- strategy objects -----------------------------------------------------

class Strategy:
    """Produces the replayed part of the buffer for task ``t``.

    ``trains`` names the network groups ``train_task`` must update, and
    ``generator_data`` says which buffer frames the image generator treats
    as real (``"first"`` or ``"all"``; ``None`` when no generator is used).
    """

    kind: StrategyKind
    trains: tuple = ("policy",)
    generator_data: Optional[str] = None

    def __init__(self, cfg=None):
        self.cfg = cfg

    def provide(self, bundle: ModelBundle, t: int, demos: DemoSet, rng_seed) -> tuple[list, list]:
        """Returns ``(pseudo, rehearsed)`` trajectory lists."""
        return [], []

    def after_task(self, demos: DemoSet) -> None:
        pass


class Finetune(Strategy):
    kind = StrategyKind.FINETUNE

    def provide(self, bundle, t, demos, rng_seed):
        return finetune_provide(t), []


class Rehearsal(Strategy):
    kind = StrategyKind.REHEARSAL

    def __init__(self, cfg=None):
        super().__init__(cfg)
        self.archive: dict[int, DemoSet] = {}

    def provide(self, bundle, t, demos, rng_seed):
        return [], rehearsal_provide(self.archive, t)

    def after_task(self, demos):
        self.archive[demos.task.task_id] = demos


def _opt(cfg, name, default):
    return getattr(cfg, name, default) if cfg is not None else default


class OriginalDGR(Strategy):
    kind = StrategyKind.ORIGINAL_DGR
    trains = ("policy", "gan")

    def __init__(self, cfg=None):
        super().__init__(cfg)
        self.generator_data = _opt(cfg, "generator_data", None) or "all"

    def provide(self, bundle, t, demos, rng_seed):
        if t < 2:
            return [], []
        pseudo = original_dgr_generate(
            bundle, len(demos), t, _opt(self.cfg, "oversample", 10), rng_seed,
            mean_demo_length=demos.mean_length,
        )
        return pseudo, []


class TrajectoryDGR(Strategy):
    kind = StrategyKind.TRAJECTORY_DGR
    trains = ("policy", "video")

    def provide(self, bundle, t, demos, rng_seed):
        if t < 2:
            return [], []
        return trajectory_dgr_generate(bundle.networks["video_generator"], bundle.policy,
                                       len(demos), t, rng_seed), []


class Cril(Strategy):
    kind = StrategyKind.CRIL
    trains = ("policy", "gan", "predictor")

    def __init__(self, cfg=None):
        super().__init__(cfg)
        self.generator_data = _opt(cfg, "generator_data", None) or "first"

    def provide(self, bundle, t, demos, rng_seed):
        if t < 2:
            return [], []
        t_max = _opt(self.cfg, "t_max", demos.task.max_steps)
        return cril_generate(bundle, len(demos), t, rng_seed, t_max=t_max,
                             mode=_opt(self.cfg, "act_mode", "greedy")), []


_STRATEGIES = {
    StrategyKind.FINETUNE: Finetune,
    StrategyKind.REHEARSAL: Rehearsal,
    StrategyKind.ORIGINAL_DGR: OriginalDGR,
    StrategyKind.TRAJECTORY_DGR: TrajectoryDGR,
    StrategyKind.CRIL: Cril,
}


def make_strategy(kind, cfg=None) -> Strategy:
    return _STRATEGIES[StrategyKind.parse(kind)](cfg)
