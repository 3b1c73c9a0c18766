"""Representation alignment regularizer: patch-wise cosine against target features."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

EPS = 1e-8


class AlignProjector(nn.Module):
    """Pools the deep hidden state to a patch grid and maps channels to the target dim."""

    def __init__(self, in_channels: int, target_dim: int, patch_grid: int, hidden: int = 256):
        super().__init__()
        self.patch_grid = patch_grid
        self.target_dim = target_dim
        self.mlp = nn.Sequential(
            nn.Linear(in_channels, hidden),
            nn.SiLU(),
            nn.Linear(hidden, hidden),
            nn.SiLU(),
            nn.Linear(hidden, target_dim),
        )

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        """(B,C,H,W) -> (B, N, D) with N = patch_grid**2."""
        g = self.patch_grid
        tokens = F.adaptive_avg_pool2d(h, (g, g)).flatten(2).transpose(1, 2)
        return self.mlp(tokens)


def repa_loss(
    h_t: torch.Tensor,
    targets: torch.Tensor,
    proj: AlignProjector,
    return_diagnostics: bool = False,
):
    """Negative mean patch cosine between projected hidden states and targets.

    Patches where either vector has norm <= 1e-8 are skipped and counted.
    """
    z = proj(h_t)  # (B,N,D)
    y = torch.as_tensor(targets, dtype=z.dtype)
    if y.ndim == 2:
        y = y[None].expand(z.shape[0], -1, -1)
    if y.shape[1] != z.shape[1]:
        raise ValueError(f"patch counts differ: targets {y.shape[1]} vs projected {z.shape[1]}")

    zn = z.norm(dim=-1)
    yn = y.norm(dim=-1)
    valid = (zn > EPS) & (yn > EPS)
    n_skipped = int((~valid).sum())
    if valid.sum() == 0:
        loss = z.sum() * 0.0
    else:
        cos = (z * y).sum(dim=-1) / (zn * yn).clamp_min(EPS)
        loss = -cos[valid].mean()
    return (loss, n_skipped) if return_diagnostics else loss


def total_loss(mse, repa, step: int, lambda0: float = 0.5, stop_step: int = 200):
    """mse + lambda(step) * repa with lambda = lambda0 before stop_step, 0 after."""
    if step < 0:
        raise ValueError("step must be >= 0")
    if step >= stop_step or lambda0 == 0.0:
        return mse
    return mse + lambda0 * repa


class CoarseFeatureTargets:
    """Alignment targets from the coarse segmenter's penultimate features."""

    def __init__(self, coarse_model, patch_grid: int):
        self.model = coarse_model
        self.patch_grid = patch_grid
        self.target_dim = coarse_model.width

    def __call__(self, images: torch.Tensor) -> torch.Tensor:
        g = self.patch_grid
        with torch.no_grad():
            feats = self.model.features(images)
            return F.adaptive_avg_pool2d(feats, (g, g)).flatten(2).transpose(1, 2)


class FileTargets:
    """Alignment targets precomputed elsewhere, one (N,D) array per sample id."""

    def __init__(self, root: Path):
        self.root = Path(root)
        manifest = json.loads((self.root / "manifest.json").read_text())
        self.target_dim = manifest["dim"]
        self.patch_count = manifest["patch_count"]
        self.files = manifest["files"]

    def for_ids(self, ids: list[str]) -> torch.Tensor:
        arrays = []
        for i in ids:
            if i not in self.files:
                raise KeyError(f"no precomputed targets for id '{i}'")
            a = np.load(self.root / self.files[i])
            if a.shape != (self.patch_count, self.target_dim):
                raise ValueError(
                    f"targets for '{i}' have shape {a.shape}, "
                    f"expected {(self.patch_count, self.target_dim)}"
                )
            arrays.append(a)
        return torch.as_tensor(np.stack(arrays), dtype=torch.float32)


def save_file_targets(root: Path, targets: dict[str, np.ndarray]) -> None:
    """Write an id-keyed manifest plus one .npy per sample."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    shapes = {a.shape for a in targets.values()}
    if len(shapes) != 1:
        raise ValueError(f"inconsistent target shapes: {shapes}")
    (n, d) = shapes.pop()
    files = {}
    for i, a in targets.items():
        name = f"{i}.npy"
        np.save(root / name, np.asarray(a, dtype=np.float32))
        files[i] = name
    (root / "manifest.json").write_text(
        json.dumps({"dim": d, "patch_count": n, "files": files}, indent=2)
    )
