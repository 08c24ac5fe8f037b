"""The continual training driver: one buffer per task, interleaved network updates, evaluation."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch

from . import corpus, evalkit, nets
from .corpus import DemoSet, ReplayBuffer
from .errors import InvalidArgument, NonFiniteLossError
from .replay import (
    VIDEO_NETWORKS,
    StrategyKind,
    VideoConfig,
    attach_video_networks,
    make_strategy,
)
from .taskforge import TaskSpec

log = logging.getLogger(__name__)

UPDATE_GROUPS = ("gan", "video", "predictor", "policy")


@dataclass
class TrainConfig:
    strategy: str = "cril"
    seed: int = 0
    m: int = 10
    heldout_m: int = 10
    epochs: int = 40
    batch_size: int = 32
    min_steps_per_epoch: int = 16
    lr_policy: float = 1e-3
    lr_generator: float = 5e-4
    lr_critic: float = 5e-4
    lr_predictor: float = 2e-3
    critic_steps: int = 5
    gan_steps: int = 5
    gp_weight: float = 10.0
    gan_loss: str = "wgan-gp"
    z_dim: int = 32
    width: int = 16
    t_max: int = 40
    oversample: int = 10
    generator_data: Optional[str] = None
    act_mode: str = "greedy"
    length_corrected: bool = False
    update_order: tuple = ("gan", "video", "predictor", "policy")
    video_length: int = 16
    eval_episodes: int = 20
    eval_every: int = 0
    pseudo_dump: int = 4

    def __post_init__(self):
        self.strategy = StrategyKind.parse(self.strategy).value
        self.update_order = tuple(self.update_order)
        positive = ("m", "heldout_m", "batch_size", "critic_steps", "z_dim", "width", "t_max",
                    "oversample", "video_length", "eval_episodes", "lr_policy", "lr_generator",
                    "lr_critic", "lr_predictor")
        for name in positive:
            if getattr(self, name) <= 0:
                raise InvalidArgument(f"{name} must be positive")
        for name in ("epochs", "gan_steps", "gp_weight", "eval_every", "pseudo_dump", "min_steps_per_epoch"):
            if getattr(self, name) < 0:
                raise InvalidArgument(f"{name} must be non-negative")
        if self.gan_loss not in ("wgan-gp", "vanilla"):
            raise InvalidArgument("gan_loss must be 'wgan-gp' or 'vanilla'")
        if self.generator_data not in (None, "first", "all"):
            raise InvalidArgument("generator_data must be 'first', 'all' or null")
        if self.act_mode not in ("greedy", "sample"):
            raise InvalidArgument("act_mode must be 'greedy' or 'sample'")
        if sorted(self.update_order) != sorted(UPDATE_GROUPS):
            raise InvalidArgument(f"update_order must be a permutation of {UPDATE_GROUPS}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["update_order"] = list(self.update_order)
        return d

    @classmethod
    def field_names(cls) -> set:
        return {f.name for f in fields(cls)}


def make_bundle(task: TaskSpec, cfg: TrainConfig) -> nets.ModelBundle:
    net_cfg = nets.NetConfig(image_size=task.image_size, n_actions=task.n_actions,
                             z_dim=cfg.z_dim, width=cfg.width)
    optim = nets.OptimConfig(lr_policy=cfg.lr_policy, lr_generator=cfg.lr_generator,
                             lr_critic=cfg.lr_critic, lr_predictor=cfg.lr_predictor)
    bundle = nets.ModelBundle(net_cfg, optim, seed=cfg.seed)
    if cfg.strategy == StrategyKind.TRAJECTORY_DGR.value:
        attach_video_networks(bundle, VideoConfig(length=cfg.video_length))
    return bundle


@dataclass
class RunRecord:
    method: str
    seed: int
    n_tasks: int
    accuracy: dict = field(default_factory=dict)
    success: dict = field(default_factory=dict)
    losses: list = field(default_factory=list)
    intra_eval: list = field(default_factory=list)
    checkpoints: list = field(default_factory=list)
    wall_clock: list = field(default_factory=list)
    fingerprints: list = field(default_factory=list)
    audits: list = field(default_factory=list)
    compositions: list = field(default_factory=list)
    predictor_mse: dict = field(default_factory=dict)
    update_order: tuple = ()

    def record_eval(self, i: int, j: int, acc: float, succ: float) -> None:
        if (i, j) in self.accuracy:
            raise InvalidArgument(f"accuracy cell {(i, j)} written twice")
        if j > i:
            raise InvalidArgument(f"cannot evaluate task {j} after task {i}")
        self.accuracy[(i, j)] = acc
        self.success[(i, j)] = succ

    def matrix(self, alpha_ideal: float = 1.0) -> evalkit.AccuracyMatrix:
        return evalkit.AccuracyMatrix(dict(self.accuracy), max((i for i, _ in self.accuracy), default=0),
                                      alpha_ideal)

    def omega(self, alpha_ideal: float = 1.0) -> evalkit.OmegaScores:
        return evalkit.omega_scores(self.matrix(alpha_ideal))

    def final_success(self) -> float:
        n = max(i for i, _ in self.success)
        return float(np.mean([self.success[(n, j)] for j in range(1, n + 1)]))


# -- one task -------------------------------------------------------------

def _check(loss: torch.Tensor, network: str, iteration: int, bundle, values: dict) -> float:
    v = float(loss.detach())
    if not math.isfinite(v):
        params = [p.detach() for p in bundle.networks[network].parameters()]
        norm = float(torch.sqrt(sum((p.double() ** 2).sum() for p in params)))
        snapshot = {"network": network, "iteration": iteration, "losses": dict(values, **{network: v}),
                    "param_norm": norm}
        raise NonFiniteLossError(f"non-finite {network} loss at iteration {iteration}", snapshot)
    return v


def _step(bundle, name: str, loss: torch.Tensor) -> None:
    opt = bundle.optimizers[name]
    opt.zero_grad(set_to_none=True)
    loss.backward()
    opt.step()


def _pad_video(tr: corpus.Trajectory, length: int) -> np.ndarray:
    f = tr.frames[:length]
    if len(f) < length:
        f = np.concatenate([f, np.repeat(f[-1:], length - len(f), axis=0)])
    return f


class _Phase:
    """Shared state of one ``train_task`` call."""

    def __init__(self, bundle, buffer, cfg, strategy, rng, tgen):
        self.bundle, self.buffer, self.cfg, self.strategy = bundle, buffer, cfg, strategy
        self.rng, self.tgen = rng, tgen
        self.pool = buffer.pair_pool()
        self.iteration = 0
        self._gan_real = None
        self._videos = None

    def steps_for(self, n_items: int) -> int:
        return max(self.cfg.min_steps_per_epoch, math.ceil(n_items / self.cfg.batch_size))

    def gan_real(self) -> np.ndarray:
        if self._gan_real is None:
            mode = self.cfg.generator_data or self.strategy.generator_data or "all"
            self._gan_real = self.pool.first_frames() if mode == "first" else self.pool.all_frames()
        return self._gan_real

    def videos(self) -> np.ndarray:
        if self._videos is None:
            length = self.cfg.video_length
            self._videos = np.stack([_pad_video(tr, length) for tr in self.buffer.entries])
        return self._videos

    def real_batch(self, arr: np.ndarray) -> torch.Tensor:
        idx = self.rng.integers(0, len(arr), size=self.cfg.batch_size)
        return nets.to_tensor(arr[idx])

    # each method runs one epoch's worth of updates and returns mean losses
    def gan(self) -> dict:
        b, cfg = self.bundle, self.cfg
        real_all = self.gan_real()
        c_losses, g_losses = [], []
        for _ in range(cfg.gan_steps):
            for _ in range(cfg.critic_steps):
                real = self.real_batch(real_all)
                with torch.no_grad():
                    fake = b.generator(torch.randn(cfg.batch_size, cfg.z_dim, generator=self.tgen))
                if cfg.gan_loss == "wgan-gp":
                    loss = nets.critic_loss(b.critic, real, fake, cfg.gp_weight, generator=self.tgen)
                else:
                    loss = nets.vanilla_discriminator_loss(b.critic, real, fake)
                c_losses.append(_check(loss, "critic", self.iteration, b, {}))
                _step(b, "critic", loss)
            z = torch.randn(cfg.batch_size, cfg.z_dim, generator=self.tgen)
            if cfg.gan_loss == "wgan-gp":
                loss = nets.generator_loss(b.critic, b.generator, z)
            else:
                loss = nets.vanilla_generator_loss(b.critic, b.generator, z)
            g_losses.append(_check(loss, "generator", self.iteration, b, {"critic": c_losses[-1]}))
            _step(b, "generator", loss)
            b.optimizers["critic"].zero_grad(set_to_none=True)
            self.iteration += 1
        return {"critic": float(np.mean(c_losses)), "generator": float(np.mean(g_losses))} if g_losses else {}

    def video(self) -> dict:
        b, cfg = self.bundle, self.cfg
        vg = b.networks["video_generator"]
        icrit, scrit = b.networks["video_image_critic"], b.networks["video_sequence_critic"]
        win = vg.vcfg.window
        videos = self.videos()
        c_losses, g_losses = [], []

        def pick(video):  # (B, T, 3, H, W) -> one frame and one window per sample
            bsz, steps = video.shape[:2]
            fi = torch.randint(0, steps, (bsz,), generator=self.tgen)
            wi = torch.randint(0, steps - win + 1, (bsz,), generator=self.tgen)
            frames = video[torch.arange(bsz), fi]
            windows = torch.stack([video[k, wi[k]: wi[k] + win] for k in range(bsz)]).flatten(1, 2)
            return frames, windows

        for _ in range(cfg.gan_steps):
            for _ in range(cfg.critic_steps):
                idx = self.rng.integers(0, len(videos), size=cfg.batch_size)
                real = nets.to_tensor(videos[idx].reshape(-1, *videos.shape[2:]))
                real = real.view(cfg.batch_size, -1, *real.shape[1:])
                with torch.no_grad():
                    fake = vg(*vg.latents(cfg.batch_size, self.tgen))
                rf, rw = pick(real)
                ff, fw = pick(fake)
                loss_i = nets.critic_loss(icrit, rf, ff, cfg.gp_weight, generator=self.tgen)
                loss_s = nets.critic_loss(scrit, rw, fw, cfg.gp_weight, generator=self.tgen)
                c_losses.append(_check(loss_i + loss_s, "video_image_critic", self.iteration, b, {}))
                _step(b, "video_image_critic", loss_i)
                _step(b, "video_sequence_critic", loss_s)
            fake = vg(*vg.latents(cfg.batch_size, self.tgen))
            ff, fw = pick(fake)
            loss = -(icrit(ff).mean() + scrit(fw).mean())
            g_losses.append(_check(loss, "video_generator", self.iteration, b, {}))
            _step(b, "video_generator", loss)
            self.iteration += 1
        return {"video_critic": float(np.mean(c_losses)), "video_generator": float(np.mean(g_losses))} \
            if g_losses else {}

    def predictor(self) -> dict:
        b, cfg = self.bundle, self.cfg
        losses = []
        for _ in range(self.steps_for(len(self.pool))):
            idx = self.pool.draw(self.rng, cfg.batch_size)
            loss = nets.predictor_loss(
                b.predictor,
                nets.to_tensor(self.pool.frames(idx)),
                torch.as_tensor(self.pool.actions(idx)),
                nets.to_tensor(self.pool.frames(idx, offset=1)),
            )
            losses.append(_check(loss, "predictor", self.iteration, b, {}))
            _step(b, "predictor", loss)
            self.iteration += 1
        return {"predictor": float(np.mean(losses))}

    def policy(self) -> dict:
        b, cfg = self.bundle, self.cfg
        losses = []
        for _ in range(self.steps_for(len(self.pool))):
            idx = self.pool.draw(self.rng, cfg.batch_size, cfg.length_corrected)
            loss = nets.policy_loss(b.policy, nets.to_tensor(self.pool.frames(idx)),
                                    torch.as_tensor(self.pool.actions(idx)))
            losses.append(_check(loss, "policy", self.iteration, b, {}))
            _step(b, "policy", loss)
            self.iteration += 1
        return {"policy": float(np.mean(losses))}


def train_task(bundle: nets.ModelBundle, buffer: ReplayBuffer, cfg: TrainConfig, *,
               strategy=None, rng=None, on_epoch: Optional[Callable] = None) -> nets.ModelBundle:
    """Run ``cfg.epochs`` epochs of updates on ``buffer`` and bump ``task_counter``.

    Each epoch updates the groups the strategy needs, in ``cfg.update_order``:
    the image GAN (critic steps then one generator step, ``gan_steps`` times),
    the video GAN, the predictor on buffer transitions and the policy on
    buffer pairs.  ``on_epoch(epoch, losses)`` receives the epoch's mean
    losses.
    """
    strategy = strategy or make_strategy(cfg.strategy, cfg)
    t = buffer.task_index_t
    if rng is None:
        rng = np.random.default_rng([cfg.seed, t, 1])
    tgen = torch.Generator().manual_seed(int(rng.integers(2**62)))
    phase = _Phase(bundle, buffer, cfg, strategy, rng, tgen)
    groups = [g for g in cfg.update_order if g in strategy.trains]
    for net in bundle.networks.values():
        net.train()
    for epoch in range(cfg.epochs):
        losses = {}
        for g in groups:
            losses.update(getattr(phase, g)())
        log.debug("task %d epoch %d %s", t, epoch, losses)
        if on_epoch is not None:
            on_epoch(epoch, losses)
    for net in bundle.networks.values():
        net.eval()
    bundle.task_counter += 1
    return bundle


# -- whole run ------------------------------------------------------------

def _seeds(cfg: TrainConfig) -> dict:
    base = 10 * cfg.seed
    return {"train": base + 1, "heldout": base + 2, "success": base + 3}


def collect_task_data(task: TaskSpec, cfg: TrainConfig):
    s = _seeds(cfg)
    return corpus.collect_demos(task, cfg.m, s["train"]), corpus.collect_demos(task, cfg.heldout_m, s["heldout"])


def audit_isolation(buffer: ReplayBuffer, prior_real_hashes: set) -> int:
    """Number of buffer frames identical to a real training frame of an earlier task."""
    return len(corpus.frame_hashes(buffer.entries) & prior_real_hashes)


def run_continual(suite: list, cfg: TrainConfig, run_dir=None, *,
                  demo_source: Optional[Callable] = None) -> RunRecord:
    """Train on ``suite`` one task at a time and evaluate on all tasks seen so far.

    ``demo_source(task)`` may supply the training demonstrations (e.g. loaded
    from disk); held-out evaluation demos are always collected fresh with a
    disjoint seed.  With ``run_dir`` the run directory is written as the run
    progresses, and a partial record is persisted if a task fails.
    """
    if not suite:
        raise InvalidArgument("run_continual needs at least one task")
    torch.manual_seed(cfg.seed)
    strategy = make_strategy(cfg.strategy, cfg)
    bundle = make_bundle(suite[0], cfg)
    record = RunRecord(cfg.strategy, cfg.seed, len(suite), update_order=tuple(
        g for g in cfg.update_order if g in strategy.trains))
    run_dir = Path(run_dir) if run_dir is not None else None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "config.json").write_text(json.dumps(
            {"train": cfg.to_dict(), "suite": [_task_json(t) for t in suite]}, indent=2, sort_keys=True) + "\n")
    heldout: dict[int, DemoSet] = {}
    prior_hashes: set = set()
    last_fp = bundle.fingerprint()
    try:
        for t, task in enumerate(suite, start=1):
            tic = time.perf_counter()
            if demo_source is not None:
                demos = demo_source(task)
                heldout[t] = corpus.collect_demos(task, cfg.heldout_m, _seeds(cfg)["heldout"])
            else:
                demos, heldout[t] = collect_task_data(task, cfg)
            gen_fp = bundle.fingerprint()
            pseudo, rehearsed = strategy.provide(bundle, t, demos, rng_seed=int(
                np.random.SeedSequence([cfg.seed, t, 2]).generate_state(1)[0]))
            buffer = corpus.buffer_prepare(demos, pseudo, rehearsed=rehearsed, t=t)
            record.fingerprints.append({"task": t, "previous_end": last_fp, "generation": gen_fp})
            record.compositions.append(buffer.composition_report())
            leaked = audit_isolation(buffer, prior_hashes)
            record.audits.append({"task": t, "leaked_frames": leaked, "rehearsal": bool(rehearsed)})
            if run_dir is not None and pseudo and cfg.pseudo_dump:
                corpus.save_trajectories(pseudo[: cfg.pseudo_dump], run_dir / "pseudo_samples" / f"task_{t}",
                                         {"kind": "pseudo", "method": cfg.strategy, "after_task": t - 1,
                                          "image_size": task.image_size})

            def on_epoch(epoch, losses, t=t):
                for name, v in losses.items():
                    record.losses.append({"task": t, "epoch": epoch, "network": name, "loss": v})
                if cfg.eval_every and (epoch + 1) % cfg.eval_every == 0:
                    record.intra_eval.append({"task": t, "epoch": epoch,
                                              "accuracy": evalkit.eval_accuracy(bundle.policy, heldout[t])})

            train_task(bundle, buffer, cfg, strategy=strategy, on_epoch=on_epoch)
            for j in range(1, t + 1):
                acc = evalkit.eval_accuracy(bundle.policy, heldout[j])
                succ = evalkit.eval_success(bundle.policy, suite[j - 1], cfg.eval_episodes,
                                            _seeds(cfg)["success"])
                record.record_eval(t, j, acc, succ)
            if "predictor" in strategy.trains:
                for j in range(1, t + 1):
                    record.predictor_mse[(t, j)] = evalkit.one_step_mse(bundle.predictor, heldout[j])
            buffer.delete()
            del pseudo, rehearsed
            strategy.after_task(demos)
            prior_hashes |= corpus.frame_hashes(demos.trajectories)
            del demos
            last_fp = bundle.fingerprint()
            if run_dir is not None:
                record.checkpoints.append(str(nets.save_checkpoint(
                    bundle, run_dir / "checkpoints" / f"task_{t}.ckpt")))
            record.wall_clock.append(time.perf_counter() - tic)
            log.info("%s seed %d: task %d done in %.1fs, acc %s", cfg.strategy, cfg.seed, t,
                     record.wall_clock[-1], [round(record.accuracy[(t, j)], 3) for j in range(1, t + 1)])
            if run_dir is not None:
                write_record(record, run_dir)
    except Exception:
        if run_dir is not None:
            write_record(record, run_dir, partial=True)
        raise
    return record


def _task_json(task: TaskSpec) -> dict:
    from .taskforge import task_to_dict
    return task_to_dict(task)


# -- run directory --------------------------------------------------------

RECORD_COLUMNS = ("after_task", "eval_task", "accuracy", "success_rate")
LOSS_COLUMNS = ("task", "epoch", "network", "loss")


def write_record(record: RunRecord, run_dir, partial: bool = False) -> None:
    run_dir = Path(run_dir)
    with (run_dir / "record.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(RECORD_COLUMNS)
        for (i, j) in sorted(record.accuracy):
            w.writerow([i, j, repr(record.accuracy[(i, j)]), repr(record.success[(i, j)])])
    with (run_dir / "losses.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOSS_COLUMNS)
        for row in record.losses:
            w.writerow([row["task"], row["epoch"], row["network"], repr(row["loss"])])
    summary = {
        "method": record.method,
        "seed": record.seed,
        "n_tasks": record.n_tasks,
        "partial": partial,
        "update_order": list(record.update_order),
        "checkpoints": record.checkpoints,
        "wall_clock_s": record.wall_clock,
        "fingerprints": record.fingerprints,
        "audits": record.audits,
        "compositions": record.compositions,
        "predictor_mse": [{"after_task": i, "eval_task": j, "mse": v}
                          for (i, j), v in sorted(record.predictor_mse.items())],
        "intra_eval": record.intra_eval,
    }
    (run_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True, default=str) + "\n")


def read_record_csv(run_dir) -> tuple[dict, dict]:
    """``(accuracy, success)`` dicts keyed by ``(after_task, eval_task)``."""
    path = Path(run_dir) / "record.csv"
    if not path.is_file():
        raise FileNotFoundError(f"{path} not found")
    acc, succ = {}, {}
    with path.open() as fh:
        for row in csv.DictReader(fh):
            key = (int(row["after_task"]), int(row["eval_task"]))
            acc[key] = float(row["accuracy"])
            succ[key] = float(row["success_rate"])
    return acc, succ
