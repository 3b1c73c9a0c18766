"""Noise schedules, forward diffusion, cubic timestep sampling, DDIM, and CFG.

The reverse pass is the deterministic DDIM update (eta = 0): recover the
clean-sample estimate from the predicted noise, then re-noise it to the
destination timestep. Stepping to timestep 0 treats the destination as the
fully denoised state (signal fraction 1), so a reverse pass driven by an
exact noise predictor terminates on the clean sample it started from.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-timestep noise tables plus the inference timestep subsequence."""

    T: int
    betas: np.ndarray  # (T,) float64
    alphas: np.ndarray
    alpha_bar: np.ndarray
    inference_timesteps: np.ndarray  # strictly decreasing ints in [0,T)


def make_schedule(
    T: int = 1000,
    beta_start: float = 8.5e-4,
    beta_end: float = 1.2e-2,
    inference_steps: int = 25,
) -> NoiseSchedule:
    """Linear beta schedule with an evenly spaced descending inference subset."""
    if not (0 < beta_start <= beta_end < 1):
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    if not (1 <= inference_steps <= T):
        raise ValueError(f"inference_steps must be in [1,{T}], got {inference_steps}")
    betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alphas = 1.0 - betas
    alpha_bar = np.cumprod(alphas)
    timesteps = np.round(np.linspace(T - 1, 0, inference_steps)).astype(np.int64)
    assert np.all(np.diff(timesteps) < 0) or inference_steps == 1
    return NoiseSchedule(
        T=T, betas=betas, alphas=alphas, alpha_bar=alpha_bar, inference_timesteps=timesteps
    )


def _gather_alpha_bar(s: NoiseSchedule, t, ref: torch.Tensor) -> torch.Tensor:
    """alpha_bar[t] as a tensor broadcastable against ref (per-sample t allowed)."""
    tt = torch.as_tensor(t, dtype=torch.long)
    if tt.min() < 0 or tt.max() >= s.T:
        raise ValueError(f"timestep out of range [0,{s.T}): {t}")
    ab = torch.as_tensor(s.alpha_bar, dtype=ref.dtype)[tt]
    while ab.ndim < ref.ndim:
        ab = ab.unsqueeze(-1)
    return ab


def add_noise(z0: torch.Tensor, eps: torch.Tensor, t, s: NoiseSchedule) -> torch.Tensor:
    """Forward process draw: sqrt(a_bar)*z0 + sqrt(1-a_bar)*eps."""
    if z0.shape != eps.shape:
        raise ValueError(f"z0 {tuple(z0.shape)} and eps {tuple(eps.shape)} shapes differ")
    ab = _gather_alpha_bar(s, t, z0)
    return torch.sqrt(ab) * z0 + torch.sqrt(1.0 - ab) * eps


def sample_timesteps_cubic(
    batch: int, T: int, rng: np.random.Generator, enabled: bool = True
) -> np.ndarray:
    """Training timesteps, biased toward the high-noise end by the cubic map.

    enabled=False falls back to plain uniform sampling over [0,T).
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    if not enabled:
        return rng.integers(0, T, size=batch)
    u = rng.uniform(0.0, T, size=batch)
    scaled = T * (1.0 - (u / T) ** 3)
    return np.clip(np.floor(scaled), 0, T - 1).astype(np.int64)


def noise_mse(eps_pred: torch.Tensor, eps: torch.Tensor) -> torch.Tensor:
    if eps_pred.shape != eps.shape:
        raise ValueError(
            f"shape mismatch {tuple(eps_pred.shape)} vs {tuple(eps.shape)}"
        )
    return torch.mean((eps_pred - eps) ** 2)


def ddim_step(
    z_t: torch.Tensor, eps_pred: torch.Tensor, t: int, t_next: int, s: NoiseSchedule
) -> torch.Tensor:
    """One deterministic reverse step t -> t_next (t > t_next).

    x0_hat = (z_t - sqrt(1-a_bar[t]) * eps) / sqrt(a_bar[t])
    z_next = sqrt(a_dst) * x0_hat + sqrt(1-a_dst) * eps
    with a_dst = a_bar[t_next] for t_next > 0 and a_dst = 1 at t_next = 0.
    """
    if t_next >= t:
        raise ValueError(f"reverse step needs t > t_next, got {t} -> {t_next}")
    if t_next < 0 or t >= s.T:
        raise ValueError(f"timesteps out of range [0,{s.T}): {t} -> {t_next}")
    ab_t = float(s.alpha_bar[t])
    ab_next = 1.0 if t_next == 0 else float(s.alpha_bar[t_next])
    x0_hat = (z_t - math.sqrt(1.0 - ab_t) * eps_pred) / math.sqrt(ab_t)
    return math.sqrt(ab_next) * x0_hat + math.sqrt(1.0 - ab_next) * eps_pred


def cfg_combine(eps_uncond: torch.Tensor, eps_cond: torch.Tensor, w: float = 3.0) -> torch.Tensor:
    """Classifier-free guidance: uncond + w * (cond - uncond)."""
    if eps_uncond.shape != eps_cond.shape:
        raise ValueError("conditional/unconditional shapes differ")
    return eps_uncond + w * (eps_cond - eps_uncond)


class IdentityCodec:
    """Pixel-space codec: exact pass-through, downsample factor 1."""

    downsample_factor = 1
    latent_channels = 3

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        return x

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        return z


class TinyAutoencoder(nn.Module):
    """Optional strided conv autoencoder (4x downsample) for latent-mode runs."""

    downsample_factor = 4

    def __init__(self, in_channels: int = 3, latent_channels: int = 8, width: int = 32):
        super().__init__()
        self.latent_channels = latent_channels
        self.enc = nn.Sequential(
            nn.Conv2d(in_channels, width, 3, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(width, latent_channels, 3, stride=2, padding=1),
        )
        self.dec = nn.Sequential(
            nn.ConvTranspose2d(latent_channels, width, 4, stride=2, padding=1),
            nn.SiLU(),
            nn.ConvTranspose2d(width, in_channels, 4, stride=2, padding=1),
        )

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        with torch.no_grad():
            return self.enc(x)

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        with torch.no_grad():
            return self.dec(z)


def train_autoencoder(
    ae: TinyAutoencoder, images: torch.Tensor, steps: int = 2000, lr: float = 1e-3, seed: int = 0
) -> list[float]:
    """Reconstruction-train the tiny autoencoder on a (N,C,H,W) image stack."""
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    opt = torch.optim.Adam(ae.parameters(), lr=lr)
    losses = []
    for _ in range(steps):
        idx = rng.integers(0, len(images), size=min(8, len(images)))
        batch = images[idx]
        recon = ae.dec(ae.enc(batch))
        loss = torch.mean((recon - batch) ** 2)
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(float(loss))
    return losses


def save_trajectory(out_dir: Path, snapshots: list[tuple[int, np.ndarray]]) -> None:
    """Dump latent snapshots plus a manifest listing their timesteps."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    files = []
    for t, z in snapshots:
        name = f"z_{t:05d}.npy"
        np.save(out_dir / name, np.asarray(z, dtype=np.float32))
        files.append({"timestep": int(t), "file": name})
    (out_dir / "manifest.json").write_text(json.dumps({"snapshots": files}, indent=2))


def load_trajectory(traj_dir: Path) -> list[tuple[int, np.ndarray]]:
    traj_dir = Path(traj_dir)
    manifest = json.loads((traj_dir / "manifest.json").read_text())
    return [(e["timestep"], np.load(traj_dir / e["file"])) for e in manifest["snapshots"]]
