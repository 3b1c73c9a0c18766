"""Label embedding network: class indices <-> 3-channel continuous maps.

A per-class embedding table squashed to (-1,1) on the way in, and a small
pointwise-conv decoder (3 -> 128 -> K) recovering class logits on the way
out. Trained on labels alone with Gaussian noise injected between the two
halves so decoding survives the perturbations a diffusion sampler leaves
behind.
"""

from __future__ import annotations

import logging
from pathlib import Path

import numpy as np
import torch
from torch import nn

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
EMBED_CHANNELS = 3


class LabelCodec(nn.Module):
    def __init__(self, num_classes: int, hidden_channels: int = 128):
        super().__init__()
        if num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {num_classes}")
        self.num_classes = num_classes
        self.table = nn.Embedding(num_classes, EMBED_CHANNELS)
        self.decoder = nn.Sequential(
            nn.Conv2d(EMBED_CHANNELS, hidden_channels, kernel_size=1),
            nn.ReLU(),
            nn.Conv2d(hidden_channels, num_classes, kernel_size=1),
        )

    def embed(self, labels: torch.Tensor) -> torch.Tensor:
        """(B,H,W) int labels -> (B,3,H,W) float in (-1,1)."""
        if labels.min() < 0 or labels.max() >= self.num_classes:
            raise ValueError(
                f"label values outside [0,{self.num_classes}): "
                f"[{int(labels.min())}, {int(labels.max())}]"
            )
        raw = self.table(labels)  # (B,H,W,3)
        return (2.0 * torch.sigmoid(raw) - 1.0).permute(0, 3, 1, 2)

    def decode(self, embedded: torch.Tensor) -> torch.Tensor:
        """(B,3,H,W) float -> (B,K,H,W) class logits."""
        if embedded.ndim != 4 or embedded.shape[1] != EMBED_CHANNELS:
            raise ValueError(f"expected (B,{EMBED_CHANNELS},H,W), got {tuple(embedded.shape)}")
        return self.decoder(embedded)

    def decode_labels(self, embedded: torch.Tensor) -> torch.Tensor:
        return self.decode(embedded).argmax(dim=1)


def embed_labels(labels: np.ndarray | torch.Tensor, codec: LabelCodec) -> torch.Tensor:
    """Convenience wrapper accepting a single (H,W) map or a (B,H,W) batch."""
    t = torch.as_tensor(np.asarray(labels), dtype=torch.long)
    squeeze = t.ndim == 2
    if squeeze:
        t = t[None]
    with torch.no_grad():
        out = codec.embed(t)
    return out[0] if squeeze else out


def decode_embedding(embedded: torch.Tensor, codec: LabelCodec) -> torch.Tensor:
    """Convenience wrapper accepting (3,H,W) or (B,3,H,W); returns logits."""
    squeeze = embedded.ndim == 3
    if squeeze:
        embedded = embedded[None]
    with torch.no_grad():
        out = codec.decode(embedded)
    return out[0] if squeeze else out


def round_trip_accuracy(codec: LabelCodec, labels: np.ndarray) -> float:
    """Fraction of pixels where argmax(decode(embed(y))) == y."""
    t = torch.as_tensor(labels, dtype=torch.long)
    if t.ndim == 2:
        t = t[None]
    with torch.no_grad():
        pred = codec.decode_labels(codec.embed(t))
    return float((pred == t).float().mean())


def train_codec(
    labels: list[np.ndarray] | np.ndarray,
    noise_variance: float = 0.25,
    steps: int = 2000,
    lr: float = 1e-3,
    batch_size: int = 8,
    seed: int = 0,
    num_classes: int | None = None,
) -> tuple[LabelCodec, list[float]]:
    """Train the codec on label maps only; returns (codec, per-step loss log).

    Gaussian noise of the given variance is added to the embedding before
    decoding, and the decoder is optimized with cross entropy against the
    original labels. steps=0 returns the untrained initialization.
    """
    stack = np.stack(list(labels)).astype(np.int64)
    if stack.ndim != 3:
        raise ValueError(f"expected a batch of (H,W) label maps, got shape {stack.shape}")
    k = int(num_classes if num_classes is not None else stack.max() + 1)
    if len(np.unique(stack)) < 2:
        logger.warning("training corpus holds a single class; decoder is unfalsifiable")
        k = max(k, 2)

    torch.manual_seed(seed)
    codec = LabelCodec(k)
    if steps == 0:
        return codec, []

    rng = np.random.default_rng(seed)
    opt = torch.optim.Adam(codec.parameters(), lr=lr)
    ce = nn.CrossEntropyLoss()
    noise_std = float(np.sqrt(noise_variance))
    losses = []
    data = torch.as_tensor(stack)

    for _ in range(steps):
        idx = rng.integers(0, len(data), size=min(batch_size, len(data)))
        batch = data[idx]
        emb = codec.embed(batch)
        if noise_std > 0:
            emb = emb + noise_std * torch.randn_like(emb)
        loss = ce(codec.decode(emb), batch)
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(float(loss))
    return codec, losses


def save_codec(codec: LabelCodec, path: Path) -> None:
    torch.save(
        {
            "format_version": CHECKPOINT_VERSION,
            "kind": "label_codec",
            "num_classes": codec.num_classes,
            "state_dict": codec.state_dict(),
        },
        path,
    )


def load_codec(path: Path) -> LabelCodec:
    blob = torch.load(path, map_location="cpu", weights_only=True)
    if blob.get("kind") != "label_codec":
        raise ValueError(f"{path} is not a label codec checkpoint")
    codec = LabelCodec(blob["num_classes"])
    codec.load_state_dict(blob["state_dict"])
    codec.eval()
    return codec
