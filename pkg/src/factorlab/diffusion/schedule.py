from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.betas, dtype=np.float64)
        if b.ndim != 1 or len(b) < 2:
            raise ScheduleError("need at least two timesteps")
        if not (np.all(b > 0) and np.all(b < 1) and np.all(np.diff(b) > 0)):
            raise ScheduleError("betas must lie in (0, 1) and increase strictly")
        object.__setattr__(self, "betas", b)

    @classmethod
    def linear(cls, T: int = 250, beta_start: float = 1e-4, beta_end: float = 0.02, reference_T: int = 1000):
        """Linear betas. Endpoints are given for ``reference_T`` steps and rescaled to T
        so the terminal signal level matches (alpha_bar[T-1] ~ 4e-5 at the defaults)."""
        scale = reference_T / T
        return cls(np.linspace(beta_start * scale, beta_end * scale, T))

    @property
    def T(self) -> int:
        return len(self.betas)

    @property
    def alpha_bar(self) -> np.ndarray:
        return np.cumprod(1.0 - self.betas)

    def alpha_bar_tensor(self, t: torch.Tensor) -> torch.Tensor:
        return torch.as_tensor(self.alpha_bar, dtype=torch.float32)[t]


def forward_noise(z0: torch.Tensor, t, eps: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps, t per batch element."""
    if eps.shape != z0.shape:
        raise ValueError(f"eps shape {tuple(eps.shape)} != z0 shape {tuple(z0.shape)}")
    t = torch.as_tensor(t, dtype=torch.long).reshape(-1)
    if t.numel() not in (1, z0.shape[0]):
        raise ValueError("one timestep per batch element")
    if (t < 0).any() or (t >= schedule.T).any():
        raise ValueError(f"timestep out of range [0, {schedule.T})")
    abar = torch.as_tensor(schedule.alpha_bar, dtype=z0.dtype)[t].reshape(-1, *([1] * (z0.ndim - 1)))
    return abar.sqrt() * z0 + (1 - abar).sqrt() * eps


def forward_noise_abar(z0: torch.Tensor, abar: float, eps: torch.Tensor) -> torch.Tensor:
    """Closed form at an explicit alpha_bar (used for the limiting cases)."""
    return float(np.sqrt(abar)) * z0 + float(np.sqrt(1.0 - abar)) * eps
