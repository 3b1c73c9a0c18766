"""Seeded synthetic segmentation scenes, coarse-map degradations, and folder dataset IO."""

from __future__ import annotations

import colorsys
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage


@dataclass(frozen=True)
class SceneSpec:
    """Parameters for one synthetic scene."""

    width: int = 64
    height: int = 64
    num_classes: int = 3
    rect_frac: float = 0.4
    strip_frac: float = 0.3
    blob_frac: float = 0.3
    min_size: int = 8
    max_size: int = 20
    seed: int = 0
    shadow_prob: float = 0.5

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ValueError(f"non-positive scene dims {self.width}x{self.height}")
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        total = self.rect_frac + self.strip_frac + self.blob_frac
        if not np.isclose(total, 1.0, atol=1e-6):
            raise ValueError(f"shape proportions must sum to 1, got {total}")
        if not (0 < self.min_size <= self.max_size):
            raise ValueError(f"bad object size range [{self.min_size}, {self.max_size}]")


@dataclass
class Sample:
    """One image/label pair. image: float32 (3,H,W) in [0,1]; label: int64 (H,W)."""

    image: np.ndarray
    label: np.ndarray
    id: str

    def __post_init__(self):
        if self.image.shape[1:] != self.label.shape:
            raise ValueError(
                f"image {self.image.shape} and label {self.label.shape} spatial dims differ"
            )


@dataclass(frozen=True)
class DegradeParams:
    """Controlled corruption of a label map into a simulated coarse prediction."""

    jitter: int = 0
    hole_rate: float = 0.0
    flip_rate: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.jitter < 0:
            raise ValueError("jitter must be >= 0")
        for name in ("hole_rate", "flip_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0,1], got {v}")


def class_color(k: int, num_classes: int) -> np.ndarray:
    """Stable base color for class k, evenly spaced in hue."""
    if k == 0:
        return np.array([0.15, 0.15, 0.15], dtype=np.float32)
    h = (k - 1) / max(1, num_classes - 1)
    r, g, b = colorsys.hsv_to_rgb(h, 0.6, 0.85)
    return np.array([r, g, b], dtype=np.float32)


def _rect_mask(h, w, rng, min_size, max_size):
    rh = int(rng.integers(min_size, max_size + 1))
    rw = int(rng.integers(min_size, max_size + 1))
    if rh >= h or rw >= w:
        return None
    top = int(rng.integers(0, h - rh))
    left = int(rng.integers(0, w - rw))
    m = np.zeros((h, w), dtype=bool)
    m[top : top + rh, left : left + rw] = True
    return m


def _strip_mask(h, w, rng, min_size, max_size):
    # elongated band: all pixels within thickness/2 of a random line segment
    length = float(rng.uniform(1.5 * max_size, 3.0 * max_size))
    thickness = float(rng.uniform(max(2, min_size / 3), max(3, min_size / 2)))
    ang = float(rng.uniform(0, np.pi))
    cy = float(rng.uniform(0, h))
    cx = float(rng.uniform(0, w))
    dy, dx = np.sin(ang), np.cos(ang)
    y0, x0 = cy - dy * length / 2, cx - dx * length / 2
    y1, x1 = cy + dy * length / 2, cx + dx * length / 2
    yy, xx = np.mgrid[0:h, 0:w]
    # distance from each pixel to the segment (y0,x0)-(y1,x1)
    vy, vx = y1 - y0, x1 - x0
    seg2 = vy * vy + vx * vx
    t = ((yy - y0) * vy + (xx - x0) * vx) / seg2
    t = np.clip(t, 0.0, 1.0)
    dist = np.hypot(yy - (y0 + t * vy), xx - (x0 + t * vx))
    m = dist <= thickness / 2
    return m if m.any() else None


def _blob_mask(h, w, rng, min_size, max_size):
    a = float(rng.uniform(min_size, max_size)) / 2
    b = float(rng.uniform(min_size, max_size)) / 2
    ang = float(rng.uniform(0, np.pi))
    cy = float(rng.uniform(a, h - a)) if h > 2 * a else h / 2
    cx = float(rng.uniform(b, w - b)) if w > 2 * b else w / 2
    yy, xx = np.mgrid[0:h, 0:w]
    yr = (yy - cy) * np.cos(ang) + (xx - cx) * np.sin(ang)
    xr = -(yy - cy) * np.sin(ang) + (xx - cx) * np.cos(ang)
    m = (yr / a) ** 2 + (xr / b) ** 2 <= 1.0
    return m if m.any() else None


def generate_scene(spec: SceneSpec) -> Sample:
    """Render one deterministic synthetic scene from a spec.

    The label map places non-overlapping objects (rectangles, elongated
    strips, elliptical blobs) of classes 1..K-1 on a class-0 background;
    the image gives every class a stable base color plus Gaussian texture
    noise and, optionally, a multiplicative shadow band.
    """
    rng = np.random.default_rng(spec.seed)
    h, w, k = spec.height, spec.width, spec.num_classes
    label = np.zeros((h, w), dtype=np.int64)
    # min 1px gap between objects so connected components stay per-object
    blocked = np.zeros((h, w), dtype=bool)

    avg_area = ((spec.min_size + spec.max_size) / 2) ** 2
    n_objects = max(4, int(0.5 * h * w / avg_area))
    shape_p = np.array([spec.rect_frac, spec.strip_frac, spec.blob_frac])
    makers = [_rect_mask, _strip_mask, _blob_mask]

    for _ in range(n_objects):
        maker = makers[int(rng.choice(3, p=shape_p))]
        cls = 1 if k == 2 else int(rng.integers(1, k))
        for _attempt in range(30):
            m = maker(h, w, rng, spec.min_size, spec.max_size)
            if m is None or not m.any():
                continue
            if not (m & blocked).any():
                label[m] = cls
                blocked |= ndimage.binary_dilation(m, np.ones((3, 3), dtype=bool))
                break

    palette = np.stack([class_color(c, k) for c in range(k)])  # (K,3)
    img = palette[label].transpose(2, 0, 1).astype(np.float32)  # (3,H,W)
    img += rng.normal(0.0, 0.05, size=img.shape).astype(np.float32)

    if rng.random() < spec.shadow_prob:
        ang = float(rng.uniform(0, np.pi))
        offs = float(rng.uniform(-0.5, 0.5))
        band_w = float(rng.uniform(0.1, 0.3))
        yy, xx = np.mgrid[0:h, 0:w]
        proj = ((yy / h - 0.5) * np.sin(ang) + (xx / w - 0.5) * np.cos(ang)) - offs
        shade = np.where(np.abs(proj) < band_w / 2, 0.5, 1.0).astype(np.float32)
        img *= shade[None]

    img = np.clip(img, 0.0, 1.0)
    return Sample(image=img, label=label, id=f"scene_{spec.seed:06d}")


def generate_corpus(spec: SceneSpec, count: int) -> list[Sample]:
    """Generate `count` scenes with per-scene seeds spec.seed..spec.seed+count-1."""
    from dataclasses import replace

    return [generate_scene(replace(spec, seed=spec.seed + i)) for i in range(count)]


def degrade_label(y: np.ndarray, p: DegradeParams) -> np.ndarray:
    """Produce a simulated coarse map: class flips, interior holes, boundary jitter.

    With all rates zero and jitter zero this is the identity. Jitter moves
    pixels by a smooth displacement field of Euclidean norm <= p.jitter, so
    disagreements stay within p.jitter px of the original class boundaries.
    """
    out = y.copy()
    if p.flip_rate == 0.0 and p.hole_rate == 0.0 and p.jitter == 0:
        return out
    rng = np.random.default_rng(p.seed)
    h, w = y.shape

    if p.flip_rate > 0.0:
        classes = np.unique(y)
        for cls in classes:
            if cls == 0:
                continue
            comps, n = ndimage.label(y == cls)
            for i in range(1, n + 1):
                if rng.random() < p.flip_rate:
                    others = classes[classes != cls]
                    new = int(rng.choice(others)) if len(others) else 0
                    out[comps == i] = new

    if p.hole_rate > 0.0:
        for cls in np.unique(out):
            if cls == 0:
                continue
            comps, n = ndimage.label(out == cls)
            for i in range(1, n + 1):
                if rng.random() >= p.hole_rate:
                    continue
                comp = comps == i
                dt = ndimage.distance_transform_edt(comp)
                r_max = dt.max()
                if r_max < 2.0:
                    continue  # too thin to hold an interior hole
                cy, cx = np.unravel_index(np.argmax(dt), dt.shape)
                radius = max(1, min(int(r_max / 2), int(np.ceil(r_max)) - 1))
                yy, xx = np.mgrid[0:h, 0:w]
                hole = (yy - cy) ** 2 + (xx - cx) ** 2 <= radius**2
                out[hole & comp] = 0

    if p.jitter > 0:
        u = ndimage.gaussian_filter(rng.standard_normal((h, w)), sigma=max(2.0, p.jitter))
        v = ndimage.gaussian_filter(rng.standard_normal((h, w)), sigma=max(2.0, p.jitter))
        norm = np.hypot(u, v).max()
        if norm > 0:
            # trunc keeps the integer displacement norm <= jitter exactly
            dy = np.trunc(p.jitter * u / norm).astype(np.int64)
            dx = np.trunc(p.jitter * v / norm).astype(np.int64)
            yy, xx = np.mgrid[0:h, 0:w]
            ys = np.clip(yy + dy, 0, h - 1)
            xs = np.clip(xx + dx, 0, w - 1)
            out = out[ys, xs]

    return out


def save_sample(sample: Sample, img_dir: Path, mask_dir: Path) -> None:
    img8 = (np.clip(sample.image, 0, 1) * 255).round().astype(np.uint8).transpose(1, 2, 0)
    Image.fromarray(img8, mode="RGB").save(Path(img_dir) / f"{sample.id}.png")
    if sample.label.max() > 255:
        raise ValueError("label values exceed 8-bit mask range")
    Image.fromarray(sample.label.astype(np.uint8), mode="L").save(
        Path(mask_dir) / f"{sample.id}.png"
    )


def save_split(samples: list[Sample], root: Path, split: str) -> None:
    """Write samples as root/split/{images,masks}/*.png."""
    img_dir = Path(root) / split / "images"
    mask_dir = Path(root) / split / "masks"
    img_dir.mkdir(parents=True, exist_ok=True)
    mask_dir.mkdir(parents=True, exist_ok=True)
    for s in samples:
        save_sample(s, img_dir, mask_dir)


def load_dataset(root: Path, split: str, num_classes: int | None = None) -> list[Sample]:
    """Load root/split/{images,masks}/*.png as Samples in stem-sorted order.

    Stems present in only one of the two folders are reported in a warning
    and skipped. If num_classes is given, masks holding values >= K raise.
    """
    img_dir = Path(root) / split / "images"
    mask_dir = Path(root) / split / "masks"
    img_stems = {p.stem: p for p in img_dir.glob("*.png")} if img_dir.is_dir() else {}
    mask_stems = {p.stem: p for p in mask_dir.glob("*.png")} if mask_dir.is_dir() else {}

    matched = sorted(set(img_stems) & set(mask_stems))
    missing = sorted(set(img_stems) ^ set(mask_stems))
    if missing:
        warnings.warn(f"{split}: skipped {len(missing)} unpaired file(s): {missing}")
    if not matched:
        warnings.warn(f"{split}: no image/mask pairs found under {root}")
        return []

    samples = []
    for stem in matched:
        img = np.asarray(Image.open(img_stems[stem]).convert("RGB"), dtype=np.float32) / 255.0
        mask = np.asarray(Image.open(mask_stems[stem]).convert("L"), dtype=np.int64)
        if img.shape[:2] != mask.shape:
            warnings.warn(f"{split}: dim mismatch for '{stem}', pair rejected")
            continue
        if num_classes is not None and mask.max() >= num_classes:
            raise ValueError(
                f"mask '{mask_stems[stem]}' holds class {int(mask.max())} >= K={num_classes}"
            )
        samples.append(Sample(image=img.transpose(2, 0, 1), label=mask, id=stem))
    return samples
