"""Conditional guidance network: frozen pseudo-siamese encoder + fusion modules.

A weight-frozen copy of the denoiser encoder processes the two condition
latents (image and coarse map) separately; per level, a guidance module
fuses those condition features with the denoiser's own noisy-sample
features through a zero-initialized pointwise convolution followed by
cross-attention. Both the zero convolution and the attention output
projection start at zero, so an untrained guidance stack is a strict
no-op on the denoiser.
"""

from __future__ import annotations

import copy
import math

import torch
from torch import nn
from torch.nn import functional as F

from segrefine.unet import DenoiserConfig, DenoiserUNet


class FrozenCondEncoder(nn.Module):
    """Weight-frozen copy of a denoiser used as the condition feature extractor."""

    def __init__(self, denoiser: DenoiserUNet):
        super().__init__()
        self.net = copy.deepcopy(denoiser)
        self.net.requires_grad_(False)
        self.net.eval()

    @property
    def config(self) -> DenoiserConfig:
        return self.net.config

    def encode(self, x: torch.Tensor, t) -> list[torch.Tensor]:
        with torch.no_grad():
            taps, _, _ = self.net.encode_features(x, None, t)
        return taps


def encode_conditions(
    c_img: torch.Tensor, c_rough: torch.Tensor, t, frozen: FrozenCondEncoder
) -> list[torch.Tensor]:
    """Per-level condition features: frozen encoder on each input, channel-concat."""
    if c_img.shape != c_rough.shape:
        raise ValueError(
            f"condition shapes differ: {tuple(c_img.shape)} vs {tuple(c_rough.shape)}"
        )
    taps_img = frozen.encode(c_img, t)
    taps_rough = frozen.encode(c_rough, t)
    return [torch.cat([a, b], dim=1) for a, b in zip(taps_img, taps_rough)]


class GuidanceModule(nn.Module):
    """One level's fusion: f' = ZConv(concat(f_zt, f_c)); f_g = f' + W_o Attn(f', f_c, f_c).

    Attention queries come from the flattened fused features, keys/values
    from the flattened condition features, scaled by 1/sqrt(d) with d the
    per-head query dimension. Keys/values are average-pooled 2x while the
    level exceeds max_kv_tokens tokens.
    """

    def __init__(
        self,
        zt_channels: int,
        cond_channels: int,
        attn_dim: int | None = None,
        num_heads: int = 1,
        max_kv_tokens: int = 1024,
    ):
        super().__init__()
        d = attn_dim if attn_dim is not None else zt_channels
        if d % num_heads:
            raise ValueError(f"attn_dim {d} not divisible by num_heads {num_heads}")
        self.num_heads = num_heads
        self.head_dim = d // num_heads
        self.max_kv_tokens = max_kv_tokens

        self.zconv = nn.Conv2d(zt_channels + cond_channels, zt_channels, 1)
        self.wq = nn.Linear(zt_channels, d, bias=False)
        self.wk = nn.Linear(cond_channels, d, bias=False)
        self.wv = nn.Linear(cond_channels, d, bias=False)
        self.wo = nn.Linear(d, zt_channels, bias=False)
        nn.init.zeros_(self.zconv.weight)
        nn.init.zeros_(self.zconv.bias)
        nn.init.zeros_(self.wo.weight)

    def attention_weights(self, f_prime: torch.Tensor, f_c: torch.Tensor) -> torch.Tensor:
        """Softmax attention map (B, heads, N_q, N_kv); exposed for inspection."""
        q, k, _ = self._qkv(f_prime, f_c)
        logits = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        return torch.softmax(logits, dim=-1)

    def _qkv(self, f_prime, f_c):
        b = f_prime.shape[0]
        kv = f_c
        while kv.shape[-2] * kv.shape[-1] > self.max_kv_tokens:
            kv = F.avg_pool2d(kv, 2)
        q_tokens = f_prime.flatten(2).transpose(1, 2)  # (B, N, C)
        kv_tokens = kv.flatten(2).transpose(1, 2)
        q = self.wq(q_tokens).view(b, -1, self.num_heads, self.head_dim).transpose(1, 2)
        k = self.wk(kv_tokens).view(b, -1, self.num_heads, self.head_dim).transpose(1, 2)
        v = self.wv(kv_tokens).view(b, -1, self.num_heads, self.head_dim).transpose(1, 2)
        return q, k, v

    def forward(self, f_zt: torch.Tensor, f_c: torch.Tensor) -> torch.Tensor:
        if f_zt.shape[-2:] != f_c.shape[-2:]:
            raise ValueError(
                f"spatial dims differ: {tuple(f_zt.shape[-2:])} vs {tuple(f_c.shape[-2:])}"
            )
        b, c, h, w = f_zt.shape
        f_prime = self.zconv(torch.cat([f_zt, f_c], dim=1))
        q, k, v = self._qkv(f_prime, f_c)
        attn = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(self.head_dim), dim=-1) @ v
        attn = attn.transpose(1, 2).reshape(b, h * w, -1)  # merge heads
        out = self.wo(attn).transpose(1, 2).reshape(b, c, h, w)
        return f_prime + out


def build_guidance_modules(
    config: DenoiserConfig, num_heads: int = 1, max_kv_tokens: int = 1024
) -> nn.ModuleList:
    """One guidance module per denoiser skip tap, shapes matched to the taps."""
    return nn.ModuleList(
        GuidanceModule(
            zt_channels=c,
            cond_channels=2 * c,
            num_heads=num_heads,
            max_kv_tokens=max_kv_tokens,
        )
        for c in config.tap_channels
    )


def guide(
    f_zt_taps: list[torch.Tensor],
    c_img: torch.Tensor,
    c_rough: torch.Tensor,
    t,
    frozen: FrozenCondEncoder,
    modules: nn.ModuleList,
) -> list[torch.Tensor]:
    """Per-level guidance features for skip injection.

    f_zt_taps must come from the trainable denoiser's encoder pass on z_t.
    """
    f_c = encode_conditions(c_img, c_rough, t, frozen)
    if len(f_zt_taps) != len(modules) or len(f_c) != len(modules):
        raise ValueError(
            f"level mismatch: {len(f_zt_taps)} taps, {len(f_c)} condition levels, "
            f"{len(modules)} modules"
        )
    return [m(fz, fc) for m, fz, fc in zip(modules, f_zt_taps, f_c)]
