"""Multimodal diffusion with per-modality, per-time-segment noise levels.

Train one denoiser whose forward process assigns every (modality, segment)
cell its own diffusion timestep, then serve joint, cross-modal, continuation,
and interpolation generation at inference by masking the timestep vector.
"""

from .schedule import (
    NoiseSchedule,
    StrategyKind,
    TimestepVector,
    constant_timestep_vector,
    make_linear_schedule,
    sample_timestep_vector,
)
from .forward import LatentShape, MultimodalLatent, q_sample, q_sample_scalar
from .denoiser import (
    Denoiser,
    DenoiserConfig,
    NetPredictor,
    denoise,
    embed_timestep_vector,
    init_denoiser,
    load_checkpoint,
    save_checkpoint,
)
from .training import (
    TrainConfig,
    TrainState,
    TrainingDiverged,
    ema_update,
    lr_at,
    make_train_state,
    mse_loss,
    train_loop,
    train_step,
)
from .sampling import (
    ConditionSpec,
    SamplerConfig,
    SamplingDiverged,
    build_task_mask,
    cfg_denoise,
    ddim_sample,
    ddpm_sample,
    reconstruction_guided_sample,
    replacement_sample,
)
from .data import CoupledConfig, Dataset, gen_coupled, load_dataset, save_dataset
from .evaluate import (
    GaussianDataSpec,
    OraclePredictor,
    analytic_optimal_eps,
    conditional_mse,
    frechet_gaussian,
    run_task_battery,
)

__version__ = "0.1.0"
