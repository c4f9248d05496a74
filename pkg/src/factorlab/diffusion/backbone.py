"""The frozen generative backbone: denoiser, text encoder and noise schedule."""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
import torch

from ..tensorio import (DigestMismatchError, TensorState, load_module_tensors, load_state,
                        module_tensors, save_state, to_bytes)
from ..textencode import TextEncoder, TextEncoderConfig
from .denoiser import ControlChannelError, Denoiser, DenoiserConfig
from .schedule import NoiseSchedule, forward_noise

KIND = "backbone"


class NonFiniteLossError(FloatingPointError):
    pass


@dataclass(frozen=True)
class BackboneConfig:
    resolution: int = 32
    T: int = 250
    beta_start: float = 1e-4
    beta_end: float = 0.02
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)
    text: TextEncoderConfig = field(default_factory=TextEncoderConfig)

    def to_dict(self) -> dict:
        return {
            "resolution": self.resolution, "T": self.T,
            "beta_start": self.beta_start, "beta_end": self.beta_end,
            "denoiser": self.denoiser.to_dict(), "text": asdict(self.text),
        }

    @classmethod
    def from_dict(cls, d) -> "BackboneConfig":
        return cls(d["resolution"], d["T"], d["beta_start"], d["beta_end"],
                   DenoiserConfig.from_dict(d["denoiser"]), TextEncoderConfig(**d["text"]))


class Backbone:
    """Holds theta_frozen. The autoencoder is the identity (pixel-space diffusion)."""

    def __init__(self, config: BackboneConfig, seed: int = 0):
        if config.denoiser.cond_dim != config.text.cond_dim:
            raise ValueError("denoiser conditioning width must equal the text encoder output width")
        self.config = config
        torch.manual_seed(seed)
        self.text_encoder = TextEncoder(config.text)
        self.denoiser = Denoiser(config.denoiser)
        self.schedule = NoiseSchedule.linear(config.T, config.beta_start, config.beta_end)
        self.frozen = False

    # image <-> latent: identity up to the [0,1] -> [-1,1] rescale
    @staticmethod
    def encode_image(x: torch.Tensor) -> torch.Tensor:
        return x * 2.0 - 1.0

    @staticmethod
    def decode_latent(z: torch.Tensor) -> torch.Tensor:
        return ((z + 1.0) / 2.0).clamp(0.0, 1.0)

    @property
    def control(self) -> bool:
        return self.config.denoiser.control

    def freeze(self) -> "Backbone":
        for p in self.parameters():
            p.requires_grad_(False)
        self.denoiser.eval()
        self.text_encoder.eval()
        self.frozen = True
        return self

    def parameters(self):
        yield from self.denoiser.parameters()
        yield from self.text_encoder.parameters()

    def state(self) -> TensorState:
        tensors = {**module_tensors(self.denoiser, "denoiser"), **module_tensors(self.text_encoder, "text")}
        return TensorState({"kind": KIND, "frozen": self.frozen, "config": self.config.to_dict()}, tensors)

    def fingerprint(self) -> str:
        """sha256 over config and weights; inversion checkpoints record it."""
        return hashlib.sha256(to_bytes(self.state())).hexdigest()

    def save(self, path) -> str:
        return save_state(path, self.state())

    @classmethod
    def from_state(cls, state: TensorState) -> "Backbone":
        if state.meta.get("kind") != KIND:
            raise DigestMismatchError(f"expected a backbone checkpoint, found {state.meta.get('kind')!r}")
        bb = cls(BackboneConfig.from_dict(state.meta["config"]))
        load_module_tensors(bb.denoiser, state.tensors, "denoiser")
        load_module_tensors(bb.text_encoder, state.tensors, "text")
        for name, tensor in state.tensors.items():
            if not torch.isfinite(tensor).all():
                raise ValueError(f"non-finite values in {name}")
        if state.meta.get("frozen"):
            bb.freeze()
        return bb

    @classmethod
    def load(cls, path) -> "Backbone":
        return cls.from_state(load_state(path))


def model_input(denoiser: Denoiser, zt: torch.Tensor, control: torch.Tensor | None) -> torch.Tensor:
    if denoiser.cfg.control:
        if control is None:
            control = torch.zeros(zt.shape[0], 1, *zt.shape[2:], dtype=zt.dtype)
        return torch.cat([zt, control.to(zt.dtype)], dim=1)
    if control is not None:
        raise ControlChannelError("a control map was given but the checkpoint has no control channel")
    return zt


def diffusion_loss(
    denoiser: Denoiser,
    schedule: NoiseSchedule,
    z0: torch.Tensor,
    cond: torch.Tensor,
    *,
    t: torch.Tensor | None = None,
    eps: torch.Tensor | None = None,
    control: torch.Tensor | None = None,
    generator: torch.Generator | None = None,
    per_sample: bool = False,
) -> torch.Tensor:
    """Mean squared noise-prediction error, t ~ U{0..T-1}, eps ~ N(0, I)."""
    if z0.shape[0] == 0:
        raise ValueError("empty batch")
    if t is None:
        t = torch.randint(0, schedule.T, (z0.shape[0],), generator=generator)
    if eps is None:
        eps = torch.randn(z0.shape, generator=generator, dtype=z0.dtype)
    zt = forward_noise(z0, t, eps, schedule)
    pred = denoiser(model_input(denoiser, zt, control), t, cond)
    err = (eps - pred).pow(2).flatten(1).mean(dim=1)
    loss = err if per_sample else err.mean()
    if not torch.isfinite(loss).all():
        raise NonFiniteLossError("diffusion loss is not finite")
    return loss


def sampling_timesteps(T: int, steps: int) -> np.ndarray:
    """Strided sub-schedule, descending, always ending at t = 0."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    return np.unique(np.linspace(0, T - 1, steps).round().astype(np.int64))[::-1].copy()


def ancestral_sample(
    eps_fn: Callable[[torch.Tensor, int], torch.Tensor],
    shape: tuple[int, ...],
    schedule: NoiseSchedule,
    steps: int,
    seed: int,
) -> torch.Tensor:
    """Ancestral sampling on a strided sub-schedule; returns the final x0 estimate in latent space."""
    gen = torch.Generator().manual_seed(int(seed))
    x = torch.randn(shape, generator=gen)
    abar = schedule.alpha_bar
    ts = sampling_timesteps(schedule.T, steps)
    for i, t in enumerate(ts):
        a_t = float(abar[t])
        eps = eps_fn(x, int(t))
        x0 = ((x - np.sqrt(1 - a_t) * eps) / np.sqrt(a_t)).clamp(-1.0, 1.0)
        if i + 1 == len(ts):
            return x0
        a_prev = float(abar[ts[i + 1]])
        beta = 1.0 - a_t / a_prev
        mean = (np.sqrt(a_prev) * beta / (1 - a_t)) * x0 + (np.sqrt(1 - beta) * (1 - a_prev) / (1 - a_t)) * x
        var = beta * (1 - a_prev) / (1 - a_t)
        x = mean + np.sqrt(var) * torch.randn(shape, generator=gen)
    return x


@torch.no_grad()
def guided_sample(
    denoiser: Denoiser,
    schedule: NoiseSchedule,
    cond: torch.Tensor,
    null_cond: torch.Tensor,
    *,
    steps: int = 25,
    guidance: float = 2.5,
    seed: int = 0,
    control: torch.Tensor | None = None,
    resolution: int = 32,
) -> torch.Tensor:
    """Classifier-free guided sampling: eps = eps_null + g (eps_cond - eps_null).

    ``cond`` is B x L x D; ``control`` (optional) B x 1 x H x W binary edge maps.
    Returns B x H x W x 3 images in [0, 1].
    """
    if guidance < 0:
        raise ValueError("guidance must be >= 0")
    b = cond.shape[0]
    null = null_cond.expand(b, -1, -1) if null_cond.shape[0] == 1 else null_cond
    shape = (b, 3, resolution, resolution)

    def run(x, t, c):
        tt = torch.full((x.shape[0],), t, dtype=torch.long)
        ctrl = None if control is None else (control if x.shape[0] == b else torch.cat([control, control]))
        return denoiser(model_input(denoiser, x, ctrl), tt, c)

    if guidance == 1.0:
        def eps_fn(x, t):
            return run(x, t, cond)
    elif guidance == 0.0:
        def eps_fn(x, t):
            return run(x, t, null)
    else:
        def eps_fn(x, t):
            both = run(torch.cat([x, x]), t, torch.cat([cond, null]))
            e_cond, e_null = both[:b], both[b:]
            return e_null + guidance * (e_cond - e_null)

    z = ancestral_sample(eps_fn, shape, schedule, steps, seed)
    return Backbone.decode_latent(z).permute(0, 2, 3, 1).contiguous()
