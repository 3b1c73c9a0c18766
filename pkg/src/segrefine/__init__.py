"""Boundary refinement for semantic segmentation with a conditional diffusion model.

A two-stage pipeline: a discriminative segmenter (or any external source)
produces a coarse label map, and a small conditional diffusion model refines
it by iterative denoising, guided by the image and the coarse map through a
pseudo-siamese guidance network. Ships with synthetic scene generation,
boundary-sensitive evaluation metrics, and frequency-domain analysis tools.
"""

from segrefine.synth import SceneSpec, Sample, DegradeParams, generate_scene, degrade_label, load_dataset
from segrefine.codec import LabelCodec, train_codec
from segrefine.diffusion import (
    NoiseSchedule,
    make_schedule,
    add_noise,
    sample_timesteps_cubic,
    noise_mse,
    ddim_step,
    cfg_combine,
    IdentityCodec,
    TinyAutoencoder,
)
from segrefine.unet import DenoiserConfig, DenoiserUNet, timestep_embedding
from segrefine.guidance import GuidanceModule, FrozenCondEncoder, encode_conditions, guide
from segrefine.coarse import CoarseModel, train_coarse, predict_coarse
from segrefine.align import AlignProjector, repa_loss, total_loss
from segrefine.metrics import (
    WfmConfig,
    MetricsReport,
    confusion,
    classical_metrics,
    boundary_band,
    weighted_fmeasure,
    wfm_boundary,
)
from segrefine.frequency import RadialSpectrum, WienerCurve, radial_spectrum, stage_decompose, wiener_response
from segrefine.pipeline import ExperimentConfig, train_refiner, infer_refine, run_eval

__version__ = "0.1.0"
