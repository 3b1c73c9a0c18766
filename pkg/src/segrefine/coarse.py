"""Stage-one discriminative segmenter producing coarse label maps."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from segrefine.synth import Sample

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


def _block(c_in: int, c_out: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(c_in, c_out, 3, padding=1),
        nn.GroupNorm(min(8, c_out), c_out),
        nn.SiLU(),
        nn.Conv2d(c_out, c_out, 3, padding=1),
        nn.GroupNorm(min(8, c_out), c_out),
        nn.SiLU(),
    )


class CoarseModel(nn.Module):
    """Small encoder-decoder CNN (~1M params at width 32)."""

    def __init__(self, num_classes: int, width: int = 32):
        super().__init__()
        self.num_classes = num_classes
        self.width = width
        w = width
        self.enc1 = _block(3, w)
        self.enc2 = _block(w, 2 * w)
        self.bottleneck = _block(2 * w, 4 * w)
        self.dec2 = _block(4 * w + 2 * w, 2 * w)
        self.dec1 = _block(2 * w + w, w)
        self.head = nn.Conv2d(w, num_classes, 1)

    def features(self, x: torch.Tensor) -> torch.Tensor:
        """Penultimate feature map (B, width, H, W); also the alignment target source."""
        e1 = self.enc1(x)
        e2 = self.enc2(F.avg_pool2d(e1, 2))
        b = self.bottleneck(F.avg_pool2d(e2, 2))
        d2 = self.dec2(torch.cat([F.interpolate(b, scale_factor=2, mode="nearest"), e2], dim=1))
        d1 = self.dec1(torch.cat([F.interpolate(d2, scale_factor=2, mode="nearest"), e1], dim=1))
        return d1

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.features(x))


@dataclass
class TrainHistory:
    steps: list[int]
    train_loss: list[float]
    val_miou: list[float]


def _miou(model: CoarseModel, samples: list[Sample]) -> float:
    from segrefine.metrics import classical_metrics, confusion

    k = model.num_classes
    cm = np.zeros((k, k), dtype=np.int64)
    for s in samples:
        pred = predict_coarse(model, s.image)
        cm += confusion(pred, s.label, k)
    return classical_metrics(cm).miou


def train_coarse(
    train: list[Sample],
    val: list[Sample],
    steps: int = 5000,
    batch_size: int = 8,
    lr: float = 1e-3,
    num_classes: int | None = None,
    width: int = 32,
    hflip: bool = True,
    seed: int = 0,
    val_every: int = 500,
) -> tuple[CoarseModel, TrainHistory]:
    """Cross-entropy training with 50% horizontal-flip augmentation."""
    if not train:
        raise ValueError("empty training set")
    k = int(num_classes if num_classes is not None else max(s.label.max() for s in train) + 1)
    present = np.unique(np.concatenate([np.unique(s.label) for s in train]))
    missing = sorted(set(range(k)) - set(present.tolist()))
    if missing:
        logger.warning("classes absent from training set: %s", missing)

    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    model = CoarseModel(k, width=width)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    images = torch.as_tensor(np.stack([s.image for s in train]))
    labels = torch.as_tensor(np.stack([s.label for s in train]))

    hist = TrainHistory(steps=[], train_loss=[], val_miou=[])
    for step in range(1, steps + 1):
        idx = rng.integers(0, len(images), size=min(batch_size, len(images)))
        xb, yb = images[idx], labels[idx]
        if hflip:
            flip = torch.as_tensor(rng.random(len(idx)) < 0.5)
            xb = torch.where(flip[:, None, None, None], xb.flip(-1), xb)
            yb = torch.where(flip[:, None, None], yb.flip(-1), yb)
        loss = F.cross_entropy(model(xb), yb)
        opt.zero_grad()
        loss.backward()
        opt.step()
        if step % val_every == 0 or step == steps:
            model.eval()
            miou = _miou(model, val) if val else float("nan")
            model.train()
            hist.steps.append(step)
            hist.train_loss.append(float(loss))
            hist.val_miou.append(miou)
            logger.info("coarse step %d: loss %.4f, val mIoU %.4f", step, float(loss), miou)
    model.eval()
    return model, hist


def predict_coarse(model: CoarseModel, image: np.ndarray) -> np.ndarray:
    """Per-pixel argmax class map for one (3,H,W) image."""
    x = torch.as_tensor(np.asarray(image, dtype=np.float32))[None]
    was_training = model.training
    model.eval()
    with torch.no_grad():
        out = model(x).argmax(dim=1)[0].numpy()
    if was_training:
        model.train()
    return out


def save_coarse(model: CoarseModel, path: Path) -> None:
    torch.save(
        {
            "format_version": CHECKPOINT_VERSION,
            "kind": "coarse",
            "num_classes": model.num_classes,
            "width": model.width,
            "state_dict": model.state_dict(),
        },
        path,
    )


def load_coarse(path: Path) -> CoarseModel:
    blob = torch.load(path, map_location="cpu", weights_only=True)
    if blob.get("kind") != "coarse":
        raise ValueError(f"{path} is not a coarse segmenter checkpoint")
    model = CoarseModel(blob["num_classes"], width=blob["width"])
    model.load_state_dict(blob["state_dict"])
    model.eval()
    return model
