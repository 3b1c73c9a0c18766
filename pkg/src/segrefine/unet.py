"""Small encoder-mid-decoder denoising UNet with timestep conditioning.

Every encoder block output plus the mid block output is exposed as a skip
tap; external guidance features of matching shapes are merged by addition
at those taps, so all-zero guidance leaves the network output untouched.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import torch
from torch import nn

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class DenoiserConfig:
    in_channels: int = 3  # z_t channels plus any channel-concatenated condition
    out_channels: int = 3
    base_width: int = 32
    num_levels: int = 3
    blocks_per_level: int = 2
    time_embed_dim: int = 64
    channel_mults: tuple[int, ...] = field(default=None)  # default (1, 2, 4, ...)

    def __post_init__(self):
        if self.num_levels < 2:
            raise ValueError("need at least 2 encoder levels")
        if self.blocks_per_level < 1:
            raise ValueError("blocks_per_level must be >= 1")
        if self.channel_mults is None:
            object.__setattr__(self, "channel_mults", tuple(2**i for i in range(self.num_levels)))
        if len(self.channel_mults) != self.num_levels:
            raise ValueError("channel_mults length must equal num_levels")

    @property
    def num_taps(self) -> int:
        """Skip tap count L: one per encoder block plus the mid block."""
        return self.num_levels * self.blocks_per_level + 1

    @property
    def widths(self) -> tuple[int, ...]:
        return tuple(self.base_width * m for m in self.channel_mults)

    @property
    def tap_channels(self) -> tuple[int, ...]:
        per_block = [
            self.widths[lvl] for lvl in range(self.num_levels) for _ in range(self.blocks_per_level)
        ]
        return tuple(per_block + [self.widths[-1]])

    @property
    def tap_strides(self) -> tuple[int, ...]:
        per_block = [
            2**lvl for lvl in range(self.num_levels) for _ in range(self.blocks_per_level)
        ]
        return tuple(per_block + [2 ** (self.num_levels - 1)])


def timestep_embedding(t, width: int) -> torch.Tensor:
    """Sinusoidal features of t: [cos(t*f_i), sin(t*f_i)] over a log-spaced f grid."""
    tt = torch.as_tensor(t, dtype=torch.float32)
    if tt.ndim == 0:
        tt = tt[None]
    half = width // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
    args = tt[:, None].float() * freqs[None, :]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if width % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[:, :1])], dim=-1)
    return emb


def _norm(channels: int) -> nn.GroupNorm:
    return nn.GroupNorm(min(8, channels), channels)


class ResBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, temb_dim: int):
        super().__init__()
        self.norm1 = _norm(c_in)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.temb = nn.Linear(temb_dim, c_out)
        self.norm2 = _norm(c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(torch.nn.functional.silu(self.norm1(x)))
        h = h + self.temb(temb)[:, :, None, None]
        h = self.conv2(torch.nn.functional.silu(self.norm2(h)))
        return h + self.skip(x)


class Downsample(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.op = nn.Conv2d(channels, channels, 3, stride=2, padding=1)

    def forward(self, x):
        return self.op(x)


class Upsample(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.op = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x):
        return self.op(torch.nn.functional.interpolate(x, scale_factor=2, mode="nearest"))


class DenoiserUNet(nn.Module):
    def __init__(self, config: DenoiserConfig):
        super().__init__()
        self.config = config
        cfg = config
        w = cfg.widths
        td = cfg.time_embed_dim

        self.time_mlp = nn.Sequential(nn.Linear(td, td * 2), nn.SiLU(), nn.Linear(td * 2, td))
        self.stem = nn.Conv2d(cfg.in_channels, w[0], 3, padding=1)

        self.enc_blocks = nn.ModuleList()
        self.downs = nn.ModuleList()
        c = w[0]
        for lvl in range(cfg.num_levels):
            for b in range(cfg.blocks_per_level):
                self.enc_blocks.append(ResBlock(c, w[lvl], td))
                c = w[lvl]
            if lvl < cfg.num_levels - 1:
                self.downs.append(Downsample(c))

        self.mid = ResBlock(c, c, td)

        self.dec_blocks = nn.ModuleList()
        self.ups = nn.ModuleList()
        for lvl in reversed(range(cfg.num_levels)):
            for b in range(cfg.blocks_per_level):
                self.dec_blocks.append(ResBlock(c + w[lvl], w[lvl], td))
                c = w[lvl]
            if lvl > 0:
                self.ups.append(Upsample(c))

        self.head = nn.Sequential(_norm(c), nn.SiLU(), nn.Conv2d(c, cfg.out_channels, 3, padding=1))

    def param_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def _temb(self, t, batch: int) -> torch.Tensor:
        emb = timestep_embedding(t, self.config.time_embed_dim)
        if emb.shape[0] == 1 and batch > 1:
            emb = emb.expand(batch, -1)
        return self.time_mlp(emb)

    def encode_features(
        self, z: torch.Tensor, c_in: torch.Tensor | None, t
    ) -> tuple[list[torch.Tensor], torch.Tensor, torch.Tensor]:
        """Run stem + encoder + mid; returns (taps, h_deep, time_emb).

        taps holds one feature map per encoder block plus the mid output;
        h_deep is the final encoder block output (the alignment tap).
        """
        cfg = self.config
        x = z if c_in is None else torch.cat([z, c_in], dim=1)
        if x.shape[1] != cfg.in_channels:
            raise ValueError(f"expected {cfg.in_channels} input channels, got {x.shape[1]}")
        stride = 2 ** (cfg.num_levels - 1)
        if x.shape[-1] % stride or x.shape[-2] % stride:
            raise ValueError(f"spatial dims {tuple(x.shape[-2:])} not divisible by {stride}")

        temb = self._temb(t, x.shape[0])
        x = self.stem(x)
        taps = []
        bi = 0
        for lvl in range(cfg.num_levels):
            for _ in range(cfg.blocks_per_level):
                x = self.enc_blocks[bi](x, temb)
                taps.append(x)
                bi += 1
            if lvl < cfg.num_levels - 1:
                x = self.downs[lvl](x)
        h_deep = taps[-1]
        x = self.mid(x, temb)
        taps.append(x)
        return taps, h_deep, temb

    def decode_features(
        self,
        taps: list[torch.Tensor],
        temb: torch.Tensor,
        guidance: list[torch.Tensor] | None = None,
    ) -> torch.Tensor:
        cfg = self.config
        if len(taps) != cfg.num_taps:
            raise ValueError(f"expected {cfg.num_taps} taps, got {len(taps)}")
        if guidance is not None:
            if len(guidance) != cfg.num_taps:
                raise ValueError(
                    f"guidance level count {len(guidance)} != taps {cfg.num_taps}"
                )
            taps = [f + g for f, g in zip(taps, guidance)]

        skips = list(taps[:-1])
        x = taps[-1]  # mid
        bi = 0
        for i, lvl in enumerate(reversed(range(cfg.num_levels))):
            for _ in range(cfg.blocks_per_level):
                x = self.dec_blocks[bi](torch.cat([x, skips.pop()], dim=1), temb)
                bi += 1
            if lvl > 0:
                x = self.ups[i](x)
        return self.head(x)

    def forward(
        self,
        z: torch.Tensor,
        c_in: torch.Tensor | None,
        t,
        guidance: list[torch.Tensor] | None = None,
    ) -> tuple[torch.Tensor, torch.Tensor, list[torch.Tensor]]:
        """Predict the noise in z; returns (eps_pred, h_deep, taps)."""
        taps, h_deep, temb = self.encode_features(z, c_in, t)
        eps = self.decode_features(taps, temb, guidance)
        return eps, h_deep, taps


def save_denoiser(model: DenoiserUNet, path: Path, step: int = 0) -> None:
    from dataclasses import asdict

    torch.save(
        {
            "format_version": CHECKPOINT_VERSION,
            "kind": "denoiser",
            "config": asdict(model.config),
            "step": step,
            "state_dict": model.state_dict(),
        },
        path,
    )


def load_denoiser(path: Path) -> tuple[DenoiserUNet, int]:
    blob = torch.load(path, map_location="cpu", weights_only=True)
    if blob.get("kind") != "denoiser":
        raise ValueError(f"{path} is not a denoiser checkpoint")
    cfg = blob["config"]
    cfg["channel_mults"] = tuple(cfg["channel_mults"])
    model = DenoiserUNet(DenoiserConfig(**cfg))
    model.load_state_dict(blob["state_dict"])
    return model, blob["step"]
