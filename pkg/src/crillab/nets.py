"""The four function approximators, their losses, and bundle checkpoints.

Frames travel through this module as numpy arrays ``(N, H, W, 3)`` in
``[-1, 1]`` and are converted to channel-first tensors at the boundary.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import CheckpointError, InvalidArgument

CHECKPOINT_FORMAT = "crillab-bundle"
CHECKPOINT_VERSION = 1


@dataclass
class NetConfig:
    image_size: int = 32
    n_actions: int = 5
    z_dim: int = 32
    width: int = 16
    hidden: int = 64
    action_embed: int = 16

    def __post_init__(self):
        if self.image_size % 8:
            raise InvalidArgument("networks need image_size divisible by 8")

    @property
    def bottom(self) -> int:
        return self.image_size // 8


def to_tensor(frames, dtype=torch.float32) -> torch.Tensor:
    arr = np.asarray(frames)
    if arr.ndim == 3:
        arr = arr[None]
    return torch.as_tensor(np.array(arr.transpose(0, 3, 1, 2)), dtype=dtype)


def to_frames(x: torch.Tensor) -> np.ndarray:
    return x.detach().to(torch.float32).permute(0, 2, 3, 1).contiguous().numpy()


def init_params(module: nn.Module, generator: torch.Generator) -> None:
    """He-style uniform init scaled by fan-in, zero biases; reproducible through ``generator``."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
            fan_in, _ = nn.init._calculate_fan_in_and_fan_out(m.weight)
            bound = math.sqrt(6.0 / fan_in)
            with torch.no_grad():
                m.weight.uniform_(-bound, bound, generator=generator)
                if m.bias is not None:
                    m.bias.zero_()


def _encoder(cfg: NetConfig, in_ch: int, act) -> nn.Sequential:
    w = cfg.width
    return nn.Sequential(
        nn.Conv2d(in_ch, w, 4, 2, 1), act(),
        nn.Conv2d(w, 2 * w, 4, 2, 1), act(),
        nn.Conv2d(2 * w, 4 * w, 4, 2, 1), act(),
        nn.Flatten(),
    )


def _leaky():
    return nn.LeakyReLU(0.2)


class GeneratorNet(nn.Module):
    """Latent vector to frame; transposed-convolution decoder with tanh output."""

    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.cfg = cfg
        w, b = cfg.width, cfg.bottom
        self.net = nn.Sequential(
            nn.Linear(cfg.z_dim, 4 * w * b * b), nn.ReLU(),
            nn.Unflatten(1, (4 * w, b, b)),
            nn.ConvTranspose2d(4 * w, 2 * w, 4, 2, 1), nn.ReLU(),
            nn.ConvTranspose2d(2 * w, w, 4, 2, 1), nn.ReLU(),
            nn.ConvTranspose2d(w, 3, 4, 2, 1), nn.Tanh(),
        )

    def forward(self, z):
        return self.net(z)


class CriticNet(nn.Module):
    """Frame to unbounded scalar score; no normalisation layers (the penalty needs per-sample gradients)."""

    def __init__(self, cfg: NetConfig, in_ch: int = 3):
        super().__init__()
        self.cfg = cfg
        w, b = cfg.width, cfg.bottom
        self.net = nn.Sequential(_encoder(cfg, in_ch, _leaky), nn.Linear(4 * w * b * b, 1))

    def forward(self, x):
        return self.net(x).squeeze(1)


class PolicyNet(nn.Module):
    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.cfg = cfg
        w, b = cfg.width, cfg.bottom
        self.net = nn.Sequential(
            _encoder(cfg, 3, nn.ReLU),
            nn.Linear(4 * w * b * b, cfg.hidden), nn.ReLU(),
            nn.Linear(cfg.hidden, cfg.n_actions),
        )

    def forward(self, x):
        """Action logits."""
        return self.net(x)

    @torch.no_grad()
    def action_probs(self, frames) -> np.ndarray:
        dtype = next(self.parameters()).dtype
        logits = self(to_tensor(frames, dtype))
        return torch.softmax(logits.double(), dim=1).numpy()


class PredictorNet(nn.Module):
    """(frame, action) to next frame.

    Encoder-decoder with skip connections; the action enters as a linear
    embedding of its one-hot vector concatenated to the flattened bottleneck.
    A final 1x1 convolution also sees the input frame.
    """

    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.cfg = cfg
        w, b = cfg.width, cfg.bottom
        flat = 4 * w * b * b
        self.enc1 = nn.Conv2d(3, w, 4, 2, 1)
        self.enc2 = nn.Conv2d(w, 2 * w, 4, 2, 1)
        self.enc3 = nn.Conv2d(2 * w, 4 * w, 4, 2, 1)
        self.embed = nn.Linear(cfg.n_actions, cfg.action_embed)
        self.bottleneck = nn.Linear(flat + cfg.action_embed, flat)
        self.dec3 = nn.ConvTranspose2d(8 * w, 2 * w, 4, 2, 1)
        self.dec2 = nn.ConvTranspose2d(4 * w, w, 4, 2, 1)
        self.dec1 = nn.ConvTranspose2d(2 * w, w, 4, 2, 1)
        self.out = nn.Conv2d(w + 3, 3, 1)

    def forward(self, x, actions):
        e1 = F.relu(self.enc1(x))
        e2 = F.relu(self.enc2(e1))
        e3 = F.relu(self.enc3(e2))
        onehot = F.one_hot(actions.long(), self.cfg.n_actions).to(x.dtype)
        h = torch.cat([e3.flatten(1), self.embed(onehot)], dim=1)
        h = F.relu(self.bottleneck(h)).view_as(e3)
        d3 = F.relu(self.dec3(torch.cat([h, e3], 1)))
        d2 = F.relu(self.dec2(torch.cat([d3, e2], 1)))
        d1 = F.relu(self.dec1(torch.cat([d2, e1], 1)))
        return torch.tanh(self.out(torch.cat([d1, x], 1)))


# -- losses ---------------------------------------------------------------

def policy_loss(policy: nn.Module, frames: torch.Tensor, actions: torch.Tensor) -> torch.Tensor:
    """Mean negative log-likelihood of ``actions`` under the policy."""
    return F.cross_entropy(policy(frames), actions.long())


def predictor_loss(predictor: nn.Module, frames, actions, next_frames) -> torch.Tensor:
    """Per-pixel mean squared error, averaged over the batch."""
    pred = predictor(frames, actions)
    return ((pred - next_frames) ** 2).flatten(1).mean(1).mean()


def interpolate(real, fake, eps=None, generator: Optional[torch.Generator] = None):
    if eps is None:
        eps = torch.rand(real.shape[0], generator=generator, dtype=real.dtype)
    eps = eps.view(-1, *([1] * (real.dim() - 1)))
    return eps * real + (1 - eps) * fake


def input_gradient_norms(critic: nn.Module, x: torch.Tensor, create_graph: bool = False) -> torch.Tensor:
    x = x.detach().requires_grad_(True)
    out = critic(x)
    (grad,) = torch.autograd.grad(out.sum(), x, create_graph=create_graph)
    return grad.flatten(1).norm(dim=1)


def gradient_penalty(critic: nn.Module, real, fake, eps=None, generator=None) -> torch.Tensor:
    """Mean of ``(||grad_x critic(x_hat)|| - 1)^2`` on random interpolates.

    The graph is kept so the penalty can be differentiated w.r.t. the
    critic's parameters.  Pass ``eps`` to fix the interpolation weights.
    """
    if real.shape != fake.shape:
        raise InvalidArgument("real and fake batches must have equal shapes")
    x_hat = interpolate(real.detach(), fake.detach(), eps, generator)
    norms = input_gradient_norms(critic, x_hat, create_graph=True)
    return ((norms - 1.0) ** 2).mean()


def critic_loss(critic, real, fake, gp_weight: float = 10.0, eps=None, generator=None) -> torch.Tensor:
    """Wasserstein critic objective with gradient penalty (to be minimised)."""
    if real.shape[0] != fake.shape[0]:
        raise InvalidArgument("real and fake batches must have equal sizes")
    fake = fake.detach()
    sep = critic(fake).mean() - critic(real).mean()
    if gp_weight == 0:
        return sep
    return sep + gp_weight * gradient_penalty(critic, real, fake, eps, generator)


def generator_loss(critic, generator, z) -> torch.Tensor:
    """``-mean critic(G(z))``; only the generator should be stepped with it."""
    return -critic(generator(z)).mean()


def vanilla_discriminator_loss(critic, real, fake) -> torch.Tensor:
    fake = fake.detach()
    r, f = critic(real), critic(fake)
    return F.binary_cross_entropy_with_logits(r, torch.ones_like(r)) + \
        F.binary_cross_entropy_with_logits(f, torch.zeros_like(f))


def vanilla_generator_loss(critic, generator, z) -> torch.Tensor:
    s = critic(generator(z))
    return F.binary_cross_entropy_with_logits(s, torch.ones_like(s))


# -- inference helpers ----------------------------------------------------

def choose_action(probs, mode: str = "greedy", rng=None) -> int:
    """Greedy picks the lowest index among the maxima; sample draws categorically."""
    probs = np.asarray(probs, dtype=np.float64)
    if mode == "greedy":
        return int(np.argmax(probs))
    if mode == "sample":
        rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
        return int(rng.choice(len(probs), p=probs / probs.sum()))
    raise InvalidArgument(f"unknown act mode {mode!r}")


def act(policy, frame, mode: str = "greedy", rng_seed=None) -> int:
    """One action for one frame; ``policy`` is anything with ``action_probs``."""
    return choose_action(policy.action_probs(np.asarray(frame)[None])[0], mode, rng_seed)


@torch.no_grad()
def predict_next(predictor: PredictorNet, frame, action: int) -> np.ndarray:
    dtype = next(predictor.parameters()).dtype
    out = predictor(to_tensor(frame, dtype), torch.tensor([int(action)]))
    return to_frames(out)[0]


@torch.no_grad()
def predict_batch(predictor: PredictorNet, frames, actions) -> np.ndarray:
    dtype = next(predictor.parameters()).dtype
    return to_frames(predictor(to_tensor(frames, dtype), torch.as_tensor(np.array(actions, dtype=np.int64))))


def latent_batch(n: int, z_dim: int, rng_seed) -> torch.Tensor:
    g = torch.Generator().manual_seed(int(rng_seed))
    return torch.randn(n, z_dim, generator=g)


@torch.no_grad()
def sample_first_frames(generator: GeneratorNet, m: int, rng_seed) -> list:
    """``m`` frames from independent unit-Gaussian latents."""
    if m < 1:
        raise InvalidArgument("m must be >= 1")
    z = latent_batch(m, generator.cfg.z_dim, rng_seed)
    return list(to_frames(generator(z)))


# -- bundle ---------------------------------------------------------------

@dataclass
class OptimConfig:
    lr_policy: float = 1e-3
    lr_generator: float = 2e-4
    lr_critic: float = 2e-4
    lr_predictor: float = 1e-3
    gan_betas: tuple = (0.5, 0.9)


CORE_NETWORKS = ("generator", "critic", "policy", "predictor")


class ModelBundle:
    """Generator, critic, policy and predictor with their optimisers.

    Extra networks (the video generator used by trajectory replay) can be
    attached with :meth:`add_network` and are checkpointed alongside.
    """

    def __init__(self, cfg: NetConfig, optim: OptimConfig = None, seed: int = 0):
        self.cfg = cfg
        self.optim_cfg = optim or OptimConfig()
        self.seed = seed
        self.task_counter = 0
        self.networks: dict[str, nn.Module] = {}
        self.optimizers: dict[str, torch.optim.Optimizer] = {}
        self._gen = torch.Generator().manual_seed(seed)
        oc = self.optim_cfg
        self.add_network("generator", GeneratorNet(cfg), oc.lr_generator, oc.gan_betas)
        self.add_network("critic", CriticNet(cfg), oc.lr_critic, oc.gan_betas)
        self.add_network("policy", PolicyNet(cfg), oc.lr_policy)
        self.add_network("predictor", PredictorNet(cfg), oc.lr_predictor)

    def add_network(self, name: str, net: nn.Module, lr: float, betas=(0.9, 0.999)) -> nn.Module:
        init_params(net, self._gen)
        self.networks[name] = net
        self.optimizers[name] = torch.optim.Adam(net.parameters(), lr=lr, betas=tuple(betas), foreach=True)
        return net

    generator = property(lambda self: self.networks["generator"])
    critic = property(lambda self: self.networks["critic"])
    policy = property(lambda self: self.networks["policy"])
    predictor = property(lambda self: self.networks["predictor"])

    def fingerprint(self) -> str:
        """SHA-256 over every parameter and buffer, in name order."""
        h = hashlib.sha256()
        h.update(str(self.task_counter).encode())
        for name in sorted(self.networks):
            for key, val in sorted(self.networks[name].state_dict().items()):
                h.update(f"{name}.{key}".encode())
                h.update(val.detach().cpu().contiguous().numpy().tobytes())
        return h.hexdigest()


def save_checkpoint(bundle: ModelBundle, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "task_counter": bundle.task_counter,
        "net_config": asdict(bundle.cfg),
        "networks": {k: v.state_dict() for k, v in bundle.networks.items()},
        "optimizers": {k: v.state_dict() for k, v in bundle.optimizers.items()},
    }
    vg = bundle.networks.get("video_generator")
    if vg is not None:
        payload["video_config"] = asdict(vg.vcfg)
    torch.save(payload, path)
    return path


def load_checkpoint(path, bundle: ModelBundle) -> ModelBundle:
    """Restore ``bundle`` in place; every named parameter must match in shape."""
    payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: not a {CHECKPOINT_FORMAT} checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {payload.get('version')}")
    saved = payload["networks"]
    missing = sorted(set(bundle.networks) - set(saved))
    if missing:
        raise CheckpointError(f"{path}: networks missing from checkpoint: {missing}")
    for name, net in bundle.networks.items():
        own = net.state_dict()
        for key, val in saved[name].items():
            if key not in own:
                raise CheckpointError(f"unexpected parameter {name}.{key}")
            if tuple(own[key].shape) != tuple(val.shape):
                raise CheckpointError(
                    f"shape mismatch for {name}.{key}: checkpoint {tuple(val.shape)} vs model {tuple(own[key].shape)}"
                )
        absent = set(own) - set(saved[name])
        if absent:
            raise CheckpointError(f"parameters missing for {name}: {sorted(absent)}")
    for name, net in bundle.networks.items():
        net.load_state_dict(saved[name])
        if name in payload.get("optimizers", {}):
            bundle.optimizers[name].load_state_dict(payload["optimizers"][name])
    bundle.task_counter = payload["task_counter"]
    return bundle


def bundle_from_checkpoint(path) -> ModelBundle:
    payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: not a {CHECKPOINT_FORMAT} checkpoint")
    bundle = ModelBundle(NetConfig(**payload["net_config"]))
    extra = set(payload["networks"]) - set(CORE_NETWORKS)
    if extra:
        # late import: the video networks live with the replay strategies
        from .replay import VideoConfig, attach_video_networks
        attach_video_networks(bundle, VideoConfig(**payload.get("video_config", {})))
    return load_checkpoint(path, bundle)
