"""Experiment orchestration: two-stage training, DDIM inference, evaluation.

Stage one produces coarse label maps (a trained CNN segmenter, a controlled
degradation of the ground truth, or any external directory of mask PNGs).
Stage two trains the conditional diffusion refiner: labels are embedded and
encoded to latents, noised at cubic-sampled timesteps, and the denoiser is
optimized jointly with the guidance modules and the alignment projector.
Inference reverses the DDIM timestep sequence from pure noise under
classifier-free guidance and decodes the result back to a label map.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from segrefine import synth as synth_mod
from segrefine.align import AlignProjector, CoarseFeatureTargets, FileTargets, repa_loss, total_loss
from segrefine.codec import LabelCodec, load_codec, save_codec, train_codec
from segrefine.diffusion import (
    IdentityCodec,
    NoiseSchedule,
    TinyAutoencoder,
    add_noise,
    cfg_combine,
    ddim_step,
    make_schedule,
    noise_mse,
    sample_timesteps_cubic,
    save_trajectory,
)
from segrefine.guidance import FrozenCondEncoder, build_guidance_modules, guide
from segrefine.metrics import MetricsReport, REPORT_SCHEMA, evaluate_pairs
from segrefine.synth import DegradeParams, Sample, SceneSpec, degrade_label, generate_corpus
from segrefine.unet import DenoiserConfig, DenoiserUNet

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class ConfigurationError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    # data
    data_root: str | None = None
    num_classes: int = 3
    image_size: int = 64
    synth_train: int = 200
    synth_test: int = 50
    synth_seed: int = 0
    # coarse-map source for conditioning
    rough_source: str = "degrade"  # degrade | coarse | dir
    rough_dir: str | None = None
    coarse_ckpt: str | None = None
    degrade_jitter: int = 3
    degrade_hole_rate: float = 0.1
    degrade_flip_rate: float = 0.0
    # codecs
    codec_mode: str = "identity"  # identity | tiny-autoencoder
    codec_ckpt: str | None = None
    codec_steps: int = 2000
    # schedule
    timesteps: int = 1000
    beta_start: float = 8.5e-4
    beta_end: float = 1.2e-2
    inference_steps: int = 25
    # denoiser
    base_width: int = 32
    num_levels: int = 3
    blocks_per_level: int = 2
    time_embed_dim: int = 64
    concat_image_condition: bool = False  # plain-generative wiring
    # guidance
    guidance: bool = True
    condition_image: bool = True
    condition_rough: bool = True
    attn_heads: int = 1
    max_kv_tokens: int = 1024
    # training
    cubic_sampling: bool = True
    cond_dropout: float = 0.1
    train_steps: int = 20000
    warmup_steps: int = 5000
    warm_start_ckpt: str | None = None
    batch_size: int = 4
    lr: float = 1e-5
    cfg_weight: float = 3.0
    # representation alignment
    align_targets: str = "coarse"  # coarse | files | none
    align_files_dir: str | None = None
    lambda0: float = 0.5
    align_stop_step: int = 200
    align_patch_grid: int = 8
    # bookkeeping
    seed: int = 0
    out_dir: str = "out"
    val_every: int = 1000
    val_subset: int = 16
    dump_trajectories: int = 0

    def __post_init__(self):
        if self.guidance and not (self.condition_image or self.condition_rough):
            raise ConfigurationError("guidance enabled but the condition set is empty")
        if self.rough_source not in ("degrade", "coarse", "dir"):
            raise ConfigurationError(f"unknown rough_source '{self.rough_source}'")
        if self.codec_mode not in ("identity", "tiny-autoencoder"):
            raise ConfigurationError(f"unknown codec_mode '{self.codec_mode}'")
        if self.align_targets not in ("coarse", "files", "none"):
            raise ConfigurationError(f"unknown align_targets '{self.align_targets}'")

    def to_json(self, path: Path) -> None:
        Path(path).write_text(json.dumps(dataclasses.asdict(self), indent=2))

    @classmethod
    def from_json(cls, path: Path) -> "ExperimentConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        raw = json.loads(Path(path).read_text())
        unknown = set(raw) - known
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        return cls(**raw)

    def denoiser_config(self, latent_channels: int) -> DenoiserConfig:
        in_ch = latent_channels * (2 if self.concat_image_condition else 1)
        return DenoiserConfig(
            in_channels=in_ch,
            out_channels=latent_channels,
            base_width=self.base_width,
            num_levels=self.num_levels,
            blocks_per_level=self.blocks_per_level,
            time_embed_dim=self.time_embed_dim,
        )


def build_image_codec(cfg: ExperimentConfig):
    if cfg.codec_mode == "identity":
        return IdentityCodec()
    return TinyAutoencoder()


class Refiner:
    """Trained refiner bundle: denoiser, frozen condition encoder, guidance stack."""

    def __init__(
        self,
        cfg: ExperimentConfig,
        schedule: NoiseSchedule,
        label_codec: LabelCodec,
        image_codec,
        denoiser: DenoiserUNet,
        frozen: FrozenCondEncoder | None,
        modules: torch.nn.ModuleList | None,
        projector: AlignProjector | None,
        step: int = 0,
    ):
        self.cfg = cfg
        self.schedule = schedule
        self.label_codec = label_codec
        self.image_codec = image_codec
        self.denoiser = denoiser
        self.frozen = frozen
        self.modules = modules
        self.projector = projector
        self.step = step

    def trainable_parameters(self):
        params = list(self.denoiser.parameters())
        if self.modules is not None:
            params += list(self.modules.parameters())
        if self.projector is not None:
            params += list(self.projector.parameters())
        return params

    def encode_rough(self, rough: torch.Tensor) -> torch.Tensor:
        return self.image_codec.encode(self.label_codec.embed(rough))

    def predict_noise(
        self, z_t: torch.Tensor, c_img: torch.Tensor, c_rough: torch.Tensor, t
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Noise prediction under the configured wiring; returns (eps, deep hidden)."""
        cfg = self.cfg
        c_in = c_img if cfg.concat_image_condition else None
        taps, h_deep, temb = self.denoiser.encode_features(z_t, c_in, t)
        g = None
        if cfg.guidance:
            g = guide(taps, c_img, c_rough, t, self.frozen, self.modules)
        eps = self.denoiser.decode_features(taps, temb, g)
        return eps, h_deep

    def eval_mode(self):
        for m in (self.denoiser, self.modules, self.projector):
            if m is not None:
                m.eval()

    def train_mode(self):
        for m in (self.denoiser, self.modules, self.projector):
            if m is not None:
                m.train()


def _to_latents(refiner: Refiner, images: torch.Tensor, rough: torch.Tensor):
    c_img = refiner.image_codec.encode(images)
    c_rough = refiner.encode_rough(rough)
    if not refiner.cfg.condition_image:
        c_img = torch.zeros_like(c_img)
    if not refiner.cfg.condition_rough:
        c_rough = torch.zeros_like(c_rough)
    return c_img, c_rough


def warmup_denoiser(
    cfg: ExperimentConfig, labels: list[np.ndarray], label_codec: LabelCodec, image_codec
) -> DenoiserUNet:
    """Unconditional diffusion warm-up on label latents; seeds the frozen encoder."""
    latent_channels = getattr(image_codec, "latent_channels", 3)
    dcfg = dataclasses.replace(cfg.denoiser_config(latent_channels), in_channels=latent_channels)
    torch.manual_seed(cfg.seed)
    model = DenoiserUNet(dcfg)
    if cfg.warmup_steps == 0:
        return model
    schedule = make_schedule(cfg.timesteps, cfg.beta_start, cfg.beta_end, cfg.inference_steps)
    rng = np.random.default_rng(cfg.seed)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    stack = torch.as_tensor(np.stack(labels))
    for step in range(1, cfg.warmup_steps + 1):
        idx = rng.integers(0, len(stack), size=min(cfg.batch_size, len(stack)))
        with torch.no_grad():
            z0 = image_codec.encode(label_codec.embed(stack[idx]))
        t = sample_timesteps_cubic(len(idx), cfg.timesteps, rng, enabled=False)
        eps = torch.randn_like(z0)
        z_t = add_noise(z0, eps, t, schedule)
        eps_pred, _, _ = model(z_t, None, torch.as_tensor(t))
        loss = noise_mse(eps_pred, eps)
        opt.zero_grad()
        loss.backward()
        opt.step()
        if step % 500 == 0:
            logger.info("warm-up step %d: mse %.4f", step, float(loss))
    model.eval()
    return model


def build_refiner(
    cfg: ExperimentConfig,
    label_codec: LabelCodec,
    image_codec,
    warm: DenoiserUNet | None = None,
) -> Refiner:
    """Assemble a fresh refiner; guidance modules start at exact zero output."""
    latent_channels = getattr(image_codec, "latent_channels", 3)
    dcfg = cfg.denoiser_config(latent_channels)
    schedule = make_schedule(cfg.timesteps, cfg.beta_start, cfg.beta_end, cfg.inference_steps)
    torch.manual_seed(cfg.seed + 1)
    denoiser = DenoiserUNet(dcfg)
    if warm is not None:
        if warm.config == dcfg:
            denoiser.load_state_dict(warm.state_dict())
        elif cfg.concat_image_condition:
            # concat wiring widens the stem; copy everything that matches
            state = {k: v for k, v in warm.state_dict().items() if not k.startswith("stem.")}
            denoiser.load_state_dict(state, strict=False)
        else:
            raise ConfigurationError("warm-start checkpoint does not match the denoiser config")

    frozen = modules = None
    if cfg.guidance:
        frozen_src = warm if warm is not None else denoiser
        if frozen_src.config.in_channels != latent_channels:
            raise ConfigurationError("frozen condition encoder needs an unconditional denoiser")
        frozen = FrozenCondEncoder(frozen_src)
        modules = build_guidance_modules(
            dcfg, num_heads=cfg.attn_heads, max_kv_tokens=cfg.max_kv_tokens
        )
    return Refiner(cfg, schedule, label_codec, image_codec, denoiser, frozen, modules, None)


def _make_targets_provider(cfg: ExperimentConfig, coarse_model=None):
    if cfg.align_targets == "none" or cfg.lambda0 == 0.0:
        return None
    if cfg.align_targets == "files":
        if not cfg.align_files_dir:
            raise ConfigurationError("align_targets='files' needs align_files_dir")
        return FileTargets(cfg.align_files_dir)
    if coarse_model is None:
        raise ConfigurationError("align_targets='coarse' needs a trained coarse model")
    return CoarseFeatureTargets(coarse_model, cfg.align_patch_grid)


def train_refiner(
    cfg: ExperimentConfig,
    train_samples: list[Sample],
    rough_labels: list[np.ndarray],
    label_codec: LabelCodec | None = None,
    image_codec=None,
    warm: DenoiserUNet | None = None,
    targets_provider=None,
    val_samples: list[Sample] | None = None,
    val_rough: list[np.ndarray] | None = None,
    resume_from: Path | None = None,
) -> tuple[Refiner, dict]:
    """Joint training of denoiser + guidance modules (+ alignment projector).

    Per step: embed and encode labels and coarse labels, draw noise and a
    cubic-sampled timestep batch, forward with guidance, and optimize the
    noise MSE plus the early-phase alignment term. Conditions are dropped
    (both zeroed) with probability cond_dropout per sample so the same
    network serves the unconditional branch at inference. The final state,
    optimizer, and rng streams land in out_dir/train_state.pt, which
    resume_from continues bit-exactly.
    """
    if len(train_samples) != len(rough_labels):
        raise ConfigurationError("train samples and rough labels differ in length")
    if val_samples and val_rough is None:
        raise ConfigurationError("val_samples given without val_rough maps")

    if resume_from is not None:
        refiner, opt_state, rng_states = load_refiner(resume_from, with_train_state=True)
        refiner.cfg = cfg  # caller may extend train_steps / move out_dir
        torch.set_rng_state(rng_states["torch"])
        rng = np.random.default_rng()
        rng.bit_generator.state = rng_states["numpy"]
        start_step = refiner.step
    else:
        if label_codec is None:
            raise ConfigurationError("label_codec required when not resuming")
        if image_codec is None:
            image_codec = build_image_codec(cfg)
        refiner = build_refiner(cfg, label_codec, image_codec, warm)
        opt_state = None
        start_step = 0
        torch.manual_seed(cfg.seed + 2)
        rng = np.random.default_rng(cfg.seed + 2)

    if targets_provider is not None and refiner.projector is None:
        deep_ch = refiner.denoiser.config.widths[-1]
        refiner.projector = AlignProjector(
            deep_ch, targets_provider.target_dim, cfg.align_patch_grid
        )

    opt = torch.optim.Adam(refiner.trainable_parameters(), lr=cfg.lr)
    if opt_state is not None:
        opt.load_state_dict(opt_state)

    images = torch.as_tensor(np.stack([s.image for s in train_samples]))
    labels = torch.as_tensor(np.stack([s.label for s in train_samples]))
    rough = torch.as_tensor(np.stack(rough_labels))
    ids = [s.id for s in train_samples]

    history: dict = {"loss": [], "val": [], "aborted": False}
    last_good = None
    refiner.train_mode()

    for step in range(start_step, cfg.train_steps):
        idx = rng.integers(0, len(images), size=min(cfg.batch_size, len(images)))
        xb, yb, rb = images[idx], labels[idx], rough[idx]
        with torch.no_grad():
            z0 = refiner.image_codec.encode(refiner.label_codec.embed(yb))
            c_img, c_rough = _to_latents(refiner, xb, rb)
            drop = torch.as_tensor(rng.random(len(idx)) < cfg.cond_dropout)
            c_img = torch.where(drop[:, None, None, None], torch.zeros_like(c_img), c_img)
            c_rough = torch.where(drop[:, None, None, None], torch.zeros_like(c_rough), c_rough)

        t = sample_timesteps_cubic(len(idx), cfg.timesteps, rng, enabled=cfg.cubic_sampling)
        eps = torch.randn_like(z0)
        z_t = add_noise(z0, eps, t, refiner.schedule)

        eps_pred, h_deep = refiner.predict_noise(z_t, c_img, c_rough, torch.as_tensor(t))
        mse = noise_mse(eps_pred, eps)
        if refiner.projector is not None and step < cfg.align_stop_step:
            if isinstance(targets_provider, FileTargets):
                y_c = targets_provider.for_ids([ids[i] for i in idx])
            else:
                y_c = targets_provider(xb)
            repa = repa_loss(h_deep, y_c, refiner.projector)
        else:
            repa = torch.zeros(())
        loss = total_loss(mse, repa, step, cfg.lambda0, cfg.align_stop_step)

        if not torch.isfinite(loss):
            logger.error("non-finite loss at step %d; aborting with last good state", step)
            history["aborted"] = True
            if last_good is not None:
                refiner.denoiser.load_state_dict(last_good["denoiser"])
                if refiner.modules is not None:
                    refiner.modules.load_state_dict(last_good["modules"])
            break

        opt.zero_grad()
        loss.backward()
        opt.step()
        refiner.step = step + 1
        history["loss"].append(float(loss))

        if (step + 1) % 100 == 0:
            last_good = {
                "denoiser": {k: v.clone() for k, v in refiner.denoiser.state_dict().items()},
                "modules": (
                    {k: v.clone() for k, v in refiner.modules.state_dict().items()}
                    if refiner.modules is not None
                    else None
                ),
            }
        if (step + 1) % cfg.val_every == 0 and val_samples:
            entry = _validate(refiner, val_samples, val_rough, cfg)
            entry["step"] = step + 1
            history["val"].append(entry)
            logger.info(
                "step %d: loss %.4f, val mIoU %.4f, WFm(3) %.4f",
                step + 1,
                float(loss),
                entry["miou"],
                entry["wfm3"],
            )
            refiner.train_mode()

    refiner.eval_mode()
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_refiner(refiner, out_dir / "train_state.pt", opt=opt, train_rng=rng)
    return refiner, history


def _validate(refiner, val_samples, val_rough, cfg) -> dict:
    subset = val_samples[: cfg.val_subset]
    rough = val_rough[: cfg.val_subset]
    pairs = []
    for s, r in zip(subset, rough):
        pred = infer_refine(refiner, s.image, r, seed=cfg.seed + 7)
        pairs.append((pred, s.label))
    report = evaluate_pairs(pairs, cfg.num_classes, tolerances=(3,))
    return {"miou": report.miou, "wfm3": report.wfm.get(3, math.nan)}


def infer_refine(
    refiner: Refiner,
    image: np.ndarray,
    rough: np.ndarray,
    seed: int = 0,
    trajectory_dir: Path | None = None,
) -> np.ndarray:
    """Refine one coarse label map by the full DDIM reverse pass.

    Deterministic for a fixed seed: the initial noise is the only sampled
    quantity and every reverse step is the eta=0 DDIM update with the
    classifier-free-guided noise estimate.
    """
    cfg = refiner.cfg
    img = torch.as_tensor(np.asarray(image, dtype=np.float32))[None]
    rl = torch.as_tensor(np.asarray(rough, dtype=np.int64))[None]
    if img.shape[-2:] != rl.shape[-2:]:
        raise ValueError(f"image {tuple(img.shape[-2:])} vs rough {tuple(rl.shape[-2:])} dims")

    refiner.eval_mode()
    with torch.no_grad():
        c_img, c_rough = _to_latents(refiner, img, rl)
        gen = torch.Generator().manual_seed(seed)
        z = torch.randn(c_rough.shape, generator=gen)
        snapshots = [(cfg.timesteps, z[0].numpy().copy())]
        zeros_i, zeros_r = torch.zeros_like(c_img), torch.zeros_like(c_rough)
        steps = refiner.schedule.inference_timesteps
        for t, t_next in zip(steps[:-1], steps[1:]):
            eps_c, _ = refiner.predict_noise(z, c_img, c_rough, int(t))
            if cfg.cfg_weight == 1.0:
                eps = eps_c
            else:
                eps_u, _ = refiner.predict_noise(z, zeros_i, zeros_r, int(t))
                eps = cfg_combine(eps_u, eps_c, cfg.cfg_weight)
            z = ddim_step(z, eps, int(t), int(t_next), refiner.schedule)
            snapshots.append((int(t_next), z[0].numpy().copy()))
        decoded = refiner.image_codec.decode(z)
        logits = refiner.label_codec.decode(decoded)
        label = torch.softmax(logits, dim=1).argmax(dim=1)[0].numpy()

    if trajectory_dir is not None:
        save_trajectory(trajectory_dir, snapshots)
    return label


def decode_latent_to_label(refiner: Refiner, z: np.ndarray) -> np.ndarray:
    """Decode one latent snapshot to a label map (trajectory analysis hook)."""
    with torch.no_grad():
        zt = torch.as_tensor(np.asarray(z, dtype=np.float32))[None]
        logits = refiner.label_codec.decode(refiner.image_codec.decode(zt))
        return logits.argmax(dim=1)[0].numpy()


def save_refiner(
    refiner: Refiner,
    path: Path,
    opt: torch.optim.Optimizer | None = None,
    train_rng: np.random.Generator | None = None,
) -> None:
    blob = {
        "format_version": CHECKPOINT_VERSION,
        "kind": "refiner",
        "config": dataclasses.asdict(refiner.cfg),
        "step": refiner.step,
        "denoiser": refiner.denoiser.state_dict(),
        "frozen": refiner.frozen.net.state_dict() if refiner.frozen is not None else None,
        "modules": refiner.modules.state_dict() if refiner.modules is not None else None,
        "projector": refiner.projector.state_dict() if refiner.projector is not None else None,
        "projector_meta": (
            {
                "in_channels": refiner.denoiser.config.widths[-1],
                "target_dim": refiner.projector.target_dim,
                "patch_grid": refiner.projector.patch_grid,
            }
            if refiner.projector is not None
            else None
        ),
        "codec_num_classes": refiner.label_codec.num_classes,
        "codec": refiner.label_codec.state_dict(),
        "image_codec": (
            refiner.image_codec.state_dict()
            if isinstance(refiner.image_codec, torch.nn.Module)
            else None
        ),
        "torch_rng": torch.get_rng_state(),
        "numpy_rng": json.dumps(train_rng.bit_generator.state) if train_rng is not None else None,
        "optimizer": opt.state_dict() if opt is not None else None,
    }
    torch.save(blob, path)


def load_refiner(path: Path, with_train_state: bool = False):
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if blob.get("kind") != "refiner":
        raise ValueError(f"{path} is not a refiner checkpoint")
    cfg = ExperimentConfig(**blob["config"])
    label_codec = LabelCodec(blob["codec_num_classes"])
    label_codec.load_state_dict(blob["codec"])
    label_codec.eval()
    image_codec = build_image_codec(cfg)
    if blob["image_codec"] is not None:
        image_codec.load_state_dict(blob["image_codec"])

    latent_channels = getattr(image_codec, "latent_channels", 3)
    denoiser = DenoiserUNet(cfg.denoiser_config(latent_channels))
    denoiser.load_state_dict(blob["denoiser"])
    frozen = modules = projector = None
    if blob["frozen"] is not None:
        base = DenoiserUNet(
            dataclasses.replace(cfg.denoiser_config(latent_channels), in_channels=latent_channels)
        )
        base.load_state_dict(blob["frozen"])
        frozen = FrozenCondEncoder(base)
        modules = build_guidance_modules(
            denoiser.config, num_heads=cfg.attn_heads, max_kv_tokens=cfg.max_kv_tokens
        )
        modules.load_state_dict(blob["modules"])
    if blob["projector"] is not None:
        meta = blob["projector_meta"]
        projector = AlignProjector(meta["in_channels"], meta["target_dim"], meta["patch_grid"])
        projector.load_state_dict(blob["projector"])

    refiner = Refiner(
        cfg,
        make_schedule(cfg.timesteps, cfg.beta_start, cfg.beta_end, cfg.inference_steps),
        label_codec,
        image_codec,
        denoiser,
        frozen,
        modules,
        projector,
        step=blob["step"],
    )
    refiner.eval_mode()
    if with_train_state:
        rng_states = {
            "torch": blob["torch_rng"],
            "numpy": json.loads(blob["numpy_rng"]) if blob["numpy_rng"] else None,
        }
        return refiner, blob["optimizer"], rng_states
    return refiner


def export_masks(out_dir: Path, named_masks: list[tuple[str, np.ndarray]]) -> None:
    """Write label maps as 8-bit single-channel PNGs."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for name, mask in named_masks:
        Image.fromarray(np.asarray(mask, dtype=np.uint8), mode="L").save(out_dir / f"{name}.png")


def load_masks(mask_dir: Path) -> dict[str, np.ndarray]:
    return {
        p.stem: np.asarray(Image.open(p).convert("L"), dtype=np.int64)
        for p in sorted(Path(mask_dir).glob("*.png"))
    }


def run_eval(
    pred_dir: Path,
    gt_dir: Path,
    num_classes: int,
    tolerances: tuple[int, ...] = (3,),
    ignore_class: int | None = None,
    out_path: Path | None = None,
) -> MetricsReport:
    """Evaluate a directory of prediction masks against ground-truth masks.

    Ground-truth stems without a prediction are listed in the report's
    `skipped` field and excluded from all means.
    """
    import jsonschema

    preds = load_masks(pred_dir)
    gts = load_masks(gt_dir)
    if not gts:
        raise ValueError(f"no ground-truth masks found in {gt_dir}")
    skipped = sorted(set(gts) - set(preds))
    matched = sorted(set(gts) & set(preds))
    if not matched:
        raise ValueError("no prediction matches any ground-truth stem")
    pairs = [(preds[s], gts[s]) for s in matched]
    report = evaluate_pairs(pairs, num_classes, tolerances, ignore_class=ignore_class)
    report.skipped = skipped
    jsonschema.validate(report.to_dict(), REPORT_SCHEMA)
    if out_path is not None:
        report.save(out_path)
        Path(out_path).with_suffix(".txt").write_text(format_report(report))
    return report


def format_report(report: MetricsReport) -> str:
    header = f"images evaluated: {report.n_images}"
    if report.skipped:
        header += f" (skipped {len(report.skipped)}: {', '.join(report.skipped[:5])}...)"
    lines = [header, f"{'class':>8} {'IoU':>10} {'F1':>10}"]
    for k in range(report.num_classes):
        tag = " (ignored)" if k == report.ignore_class else ""
        lines.append(
            f"{k:>8} {report.per_class_iou[k]:>10.4f} {report.per_class_f1[k]:>10.4f}{tag}"
        )
    lines.append(f"mIoU {report.miou:.4f}  meanF1 {report.mean_f1:.4f}")
    lines.append(f"Kappa {report.kappa:.4f}  OA {report.oa:.4f}")
    for tol in sorted(report.wfm):
        lines.append(f"WFm({tol}px) {report.wfm[tol]:.4f}")
    return "\n".join(lines) + "\n"


def _prepare_data(cfg: ExperimentConfig, workdir: Path) -> tuple[list[Sample], list[Sample]]:
    if cfg.data_root:
        root = Path(cfg.data_root)
        train = synth_mod.load_dataset(root, "train", cfg.num_classes)
        test = synth_mod.load_dataset(root, "test", cfg.num_classes)
        if not train or not test:
            raise ConfigurationError(f"dataset at {root} is missing train or test pairs")
        return train, test
    spec = SceneSpec(
        width=cfg.image_size,
        height=cfg.image_size,
        num_classes=cfg.num_classes,
        seed=cfg.synth_seed,
    )
    train = generate_corpus(spec, cfg.synth_train)
    test_spec = dataclasses.replace(spec, seed=cfg.synth_seed + cfg.synth_train)
    test = generate_corpus(test_spec, cfg.synth_test)
    synth_mod.save_split(train, workdir / "data", "train")
    synth_mod.save_split(test, workdir / "data", "test")
    return train, test


def _rough_maps(cfg: ExperimentConfig, samples: list[Sample], split_tag: int) -> list[np.ndarray]:
    if cfg.rough_source == "degrade":
        return [
            degrade_label(
                s.label,
                DegradeParams(
                    jitter=cfg.degrade_jitter,
                    hole_rate=cfg.degrade_hole_rate,
                    flip_rate=cfg.degrade_flip_rate,
                    seed=cfg.seed + split_tag * 100003 + i,
                ),
            )
            for i, s in enumerate(samples)
        ]
    if cfg.rough_source == "coarse":
        from segrefine.coarse import load_coarse, predict_coarse

        if not cfg.coarse_ckpt or not Path(cfg.coarse_ckpt).exists():
            raise ConfigurationError(f"coarse checkpoint not found: {cfg.coarse_ckpt}")
        model = load_coarse(cfg.coarse_ckpt)
        return [predict_coarse(model, s.image) for s in samples]
    if not cfg.rough_dir:
        raise ConfigurationError("rough_source='dir' needs rough_dir")
    masks = load_masks(Path(cfg.rough_dir))
    missing = [s.id for s in samples if s.id not in masks]
    if missing:
        raise ConfigurationError(f"rough_dir missing masks for: {missing[:5]}")
    return [masks[s.id] for s in samples]


def run_experiment(cfg: ExperimentConfig, coarse_model=None) -> dict:
    """Full second-stage pipeline from config alone: data, codec, refiner, eval.

    Returns the trained refiner, key paths, and test-set MetricsReports for
    both the coarse inputs and the refined outputs.
    """
    workdir = Path(cfg.out_dir)
    workdir.mkdir(parents=True, exist_ok=True)
    cfg.to_json(workdir / "config.json")
    train, test = _prepare_data(cfg, workdir)

    if cfg.codec_ckpt:
        if not Path(cfg.codec_ckpt).exists():
            raise ConfigurationError(f"codec checkpoint not found: {cfg.codec_ckpt}")
        label_codec = load_codec(cfg.codec_ckpt)
    else:
        label_codec, _ = train_codec(
            [s.label for s in train],
            steps=cfg.codec_steps,
            seed=cfg.seed,
            num_classes=cfg.num_classes,
        )
        save_codec(label_codec, workdir / "codec.pt")

    image_codec = build_image_codec(cfg)

    rough_train = _rough_maps(cfg, train, split_tag=1)
    rough_test = _rough_maps(cfg, test, split_tag=2)
    export_masks(workdir / "rough_test", [(s.id, r) for s, r in zip(test, rough_test)])
    export_masks(workdir / "gt_test", [(s.id, s.label) for s in test])

    if cfg.warm_start_ckpt:
        if not Path(cfg.warm_start_ckpt).exists():
            raise ConfigurationError(f"warm-start checkpoint not found: {cfg.warm_start_ckpt}")
        from segrefine.unet import load_denoiser

        warm, _ = load_denoiser(cfg.warm_start_ckpt)
    else:
        from segrefine.unet import save_denoiser

        warm = warmup_denoiser(cfg, [s.label for s in train], label_codec, image_codec)
        save_denoiser(warm, workdir / "warmup.pt", step=cfg.warmup_steps)

    targets = _make_targets_provider(cfg, coarse_model)
    refiner, history = train_refiner(
        cfg,
        train,
        rough_train,
        label_codec,
        image_codec,
        warm=warm,
        targets_provider=targets,
        val_samples=test[: cfg.val_subset],
        val_rough=rough_test[: cfg.val_subset],
    )
    save_refiner(refiner, workdir / "refiner.pt")
    (workdir / "history.json").write_text(json.dumps(history))

    refined = []
    for i, (s, r) in enumerate(zip(test, rough_test)):
        traj = workdir / "trajectories" / s.id if i < cfg.dump_trajectories else None
        refined.append(
            (s.id, infer_refine(refiner, s.image, r, seed=cfg.seed + 11, trajectory_dir=traj))
        )
    export_masks(workdir / "refined_test", refined)

    report_refined = run_eval(
        workdir / "refined_test",
        workdir / "gt_test",
        cfg.num_classes,
        tolerances=(1, 3, 5),
        out_path=workdir / "report_refined.json",
    )
    report_rough = run_eval(
        workdir / "rough_test",
        workdir / "gt_test",
        cfg.num_classes,
        tolerances=(1, 3, 5),
        out_path=workdir / "report_rough.json",
    )
    return {
        "refiner": refiner,
        "history": history,
        "workdir": workdir,
        "report_refined": report_refined,
        "report_rough": report_rough,
        "test": test,
        "rough_test": rough_test,
    }
