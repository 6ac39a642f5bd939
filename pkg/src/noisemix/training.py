"""Diffusion training loop: per-example timestep vectors, EMA, LR schedule.

Each batch example gets its own timestep vector drawn under the configured
strategy, so mixture strategies mix within a batch. The loss is plain MSE on
noise prediction with equal per-element weighting. Random draws happen in a
fixed order (timestep vectors per example, then noise per modality, then the
self-conditioning coin) so a seeded run is exactly reproducible.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .denoiser import Denoiser, DenoiserConfig, init_denoiser, load_checkpoint, save_checkpoint
from .forward import MultimodalLatent, q_sample
from .schedule import NoiseSchedule, StrategyKind, sample_timestep_vector

__all__ = [
    "TrainConfig",
    "TrainState",
    "StepInfo",
    "TrainingDiverged",
    "mse_loss",
    "lr_at",
    "ema_update",
    "ema_init",
    "training_loss",
    "train_step",
    "make_train_state",
    "resume_train_state",
    "train_loop",
]


class TrainingDiverged(RuntimeError):
    """Raised when the training loss becomes non-finite."""

    def __init__(self, step: int, kinds, loss_value: float):
        self.step = step
        self.kinds = tuple(k.value for k in kinds)
        self.loss_value = loss_value
        super().__init__(
            f"non-finite loss {loss_value!r} at step {step} (strategies drawn: {self.kinds})"
        )


@dataclass(frozen=True)
class TrainConfig:
    """Optimization hyperparameters.

    Desk-scale defaults; the reference setting this mirrors used lr 5e-4,
    5000 warmup steps and batch 256 at full scale.
    """

    strategy: StrategyKind = StrategyKind.MONL
    batch_size: int = 32
    learning_rate: float = 1e-3
    warmup_steps: int = 100
    total_steps: int = 3000
    ema_decay: float = 0.999
    self_cond_rate: float = 0.9
    weight_decay: float = 0.01
    grad_clip: float = 1.0

    def __post_init__(self):
        if self.warmup_steps > self.total_steps:
            raise ValueError("warmup_steps must be <= total_steps")
        if not (0.0 <= self.ema_decay < 1.0):
            raise ValueError("ema_decay must lie in [0, 1)")
        if not (0.0 <= self.self_cond_rate <= 1.0):
            raise ValueError("self_cond_rate must lie in [0, 1]")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class TrainState:
    """Mutable training state: model, optimizer moments, EMA shadow, rng."""

    module: Denoiser
    optimizer: torch.optim.AdamW
    ema: dict[str, torch.Tensor]
    sched: NoiseSchedule
    rng: np.random.Generator
    step: int = 0


@dataclass(frozen=True)
class StepInfo:
    loss: float
    lr: float
    kinds: tuple[StrategyKind, ...] = field(default=())


def mse_loss(eps_hat, eps):
    """Mean squared error over all elements of all modalities.

    Works on :class:`MultimodalLatent` (numpy) or sequences of torch tensors;
    the return type follows the inputs (float or scalar tensor).
    """
    a_parts = eps_hat.parts if isinstance(eps_hat, MultimodalLatent) else tuple(eps_hat)
    b_parts = eps.parts if isinstance(eps, MultimodalLatent) else tuple(eps)
    if len(a_parts) != len(b_parts):
        raise ValueError("modality count mismatch")
    total = None
    count = 0
    for a, b in zip(a_parts, b_parts):
        if tuple(a.shape) != tuple(b.shape):
            raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
        sq = ((a - b) ** 2).sum()
        total = sq if total is None else total + sq
        count += math.prod(a.shape)
    return total / count


def lr_at(step: int, config: TrainConfig) -> float:
    """Linear warmup to the peak rate, then cosine decay to zero."""
    if step < 0:
        raise ValueError("step must be >= 0")
    peak = config.learning_rate
    if config.warmup_steps > 0 and step < config.warmup_steps:
        return peak * step / config.warmup_steps
    if step >= config.total_steps:
        return 0.0
    span = max(config.total_steps - config.warmup_steps, 1)
    progress = (step - config.warmup_steps) / span
    return peak * 0.5 * (1.0 + math.cos(math.pi * progress))


def ema_init(module: Denoiser) -> dict[str, torch.Tensor]:
    """Fresh EMA shadow equal to the current parameters."""
    return {name: p.detach().clone() for name, p in module.named_parameters()}


def ema_update(ema_params: dict[str, torch.Tensor], params, decay: float) -> dict[str, torch.Tensor]:
    """In-place update ``ema = decay * ema + (1 - decay) * params``.

    ``params`` is a module or a name-to-tensor mapping. Returns ``ema_params``.
    """
    if not (0.0 <= decay < 1.0):
        raise ValueError("decay must lie in [0, 1)")
    source = dict(params.named_parameters()) if isinstance(params, torch.nn.Module) else params
    with torch.no_grad():
        for name, shadow in ema_params.items():
            shadow.mul_(decay).add_(source[name].detach(), alpha=1.0 - decay)
    return ema_params


def _gather_alpha_bar(sched: NoiseSchedule, tvec_t: torch.Tensor, dtype) -> list[torch.Tensor]:
    """Per-modality alpha_bar tensors shaped (B, N, 1) for a (B, M, N) tvec."""
    table = torch.as_tensor(sched.alpha_bars, dtype=dtype)
    return [table[tvec_t[:, m, :]].unsqueeze(-1) for m in range(tvec_t.shape[1])]


def clean_estimate(
    z_t: list[torch.Tensor], eps_hat: list[torch.Tensor], sched: NoiseSchedule, tvec_t: torch.Tensor
) -> list[torch.Tensor]:
    """Per-element clean-data estimate (z_t - sqrt(1-abar) eps_hat) / sqrt(abar)."""
    abars = _gather_alpha_bar(sched, tvec_t, z_t[0].dtype)
    return [
        (z - torch.sqrt(1.0 - ab) * e) / torch.sqrt(ab)
        for z, e, ab in zip(z_t, eps_hat, abars)
    ]


def training_loss(
    module: Denoiser,
    z_t: list[torch.Tensor],
    tvec_t: torch.Tensor,
    eps: list[torch.Tensor],
    self_cond: list[torch.Tensor] | None = None,
) -> torch.Tensor:
    """Noise-prediction MSE for fixed draws; differentiable in the parameters."""
    pred = module(z_t, tvec_t, self_cond)
    return mse_loss(pred, eps)


def train_step(state: TrainState, batch: MultimodalLatent, config: TrainConfig) -> tuple[TrainState, StepInfo]:
    """One optimization step on a batch.

    Draw order per step: one timestep vector per example, then unit-normal
    noise per modality, then a single self-conditioning coin for the batch.
    The self-conditioning first pass runs gradient-free and its clean-data
    estimate is fed back as an auxiliary input.
    """
    module, sched, rng = state.module, state.sched, state.rng
    if batch.batch_shape == () or batch.batch_shape[0] == 0:
        raise ValueError("batch must be non-empty and batched")
    B = batch.batch_shape[0]
    M, N = batch.num_modalities, batch.num_segments
    dtype = module.config.torch_dtype

    kinds = []
    tvecs = np.empty((B, M, N), dtype=np.int64)
    for i in range(B):
        tv = sample_timestep_vector(config.strategy, M, N, sched.T, rng)
        tvecs[i] = tv.entries
        kinds.append(tv.kind)
    eps = MultimodalLatent.standard_normal(batch.shape, rng)

    z0 = batch.astype(np.float64)
    z_t = q_sample(z0, tvecs, eps, sched)

    z_t_t = [torch.as_tensor(p, dtype=dtype) for p in z_t.parts]
    eps_t = [torch.as_tensor(p, dtype=dtype) for p in eps.parts]
    tvec_t = torch.as_tensor(tvecs, dtype=torch.long)

    self_cond = None
    if module.config.self_conditioning and config.self_cond_rate > 0.0:
        if rng.uniform() < config.self_cond_rate:
            with torch.no_grad():
                first = module(z_t_t, tvec_t, None)
                self_cond = clean_estimate(z_t_t, first, sched, tvec_t)

    loss = training_loss(module, z_t_t, tvec_t, eps_t, self_cond)
    loss_value = float(loss.detach())
    if not math.isfinite(loss_value):
        raise TrainingDiverged(state.step, kinds, loss_value)

    state.optimizer.zero_grad(set_to_none=True)
    loss.backward()
    if config.grad_clip > 0.0:
        torch.nn.utils.clip_grad_norm_(module.parameters(), config.grad_clip)
    lr = lr_at(state.step, config)
    for group in state.optimizer.param_groups:
        group["lr"] = lr
    state.optimizer.step()
    ema_update(state.ema, module, config.ema_decay)
    state.step += 1
    return state, StepInfo(loss=loss_value, lr=lr, kinds=tuple(kinds))


def _make_optimizer(module: Denoiser, config: TrainConfig) -> torch.optim.AdamW:
    return torch.optim.AdamW(
        module.parameters(), lr=config.learning_rate, weight_decay=config.weight_decay
    )


def make_train_state(
    model_config: DenoiserConfig,
    train_config: TrainConfig,
    sched: NoiseSchedule,
    rng: np.random.Generator,
) -> TrainState:
    """Initialize model, optimizer, and EMA shadow from one random stream."""
    module = init_denoiser(model_config, rng)
    return TrainState(
        module=module,
        optimizer=_make_optimizer(module, train_config),
        ema=ema_init(module),
        sched=sched,
        rng=rng,
        step=0,
    )


def _optimizer_extra_tensors(state: TrainState) -> dict[str, np.ndarray]:
    tensors: dict[str, np.ndarray] = {}
    for i, p in enumerate(state.module.parameters()):
        st = state.optimizer.state.get(p)
        if not st:
            continue
        tensors[f"opt{i}.step"] = np.asarray(float(st["step"]))
        tensors[f"opt{i}.exp_avg"] = st["exp_avg"].numpy()
        tensors[f"opt{i}.exp_avg_sq"] = st["exp_avg_sq"].numpy()
    return tensors


def save_train_checkpoint(path, state: TrainState) -> None:
    """Full training checkpoint: params, EMA, optimizer moments, rng state."""
    save_checkpoint(
        path,
        state.module,
        state.ema,
        step=state.step,
        extra_tensors=_optimizer_extra_tensors(state),
        extra_header={"rng_state": state.rng.bit_generator.state},
    )


def resume_train_state(path, train_config: TrainConfig, sched: NoiseSchedule) -> TrainState:
    """Restore a :class:`TrainState` from a training checkpoint."""
    ckpt = load_checkpoint(path)
    module = ckpt.build_module(use_ema=False)
    optimizer = _make_optimizer(module, train_config)
    if ckpt.extra_tensors:
        params = list(module.parameters())
        opt_state: dict[int, dict] = {}
        for i, p in enumerate(params):
            key = f"opt{i}.exp_avg"
            if key not in ckpt.extra_tensors:
                continue
            opt_state[i] = {
                "step": torch.tensor(float(np.asarray(ckpt.extra_tensors[f"opt{i}.step"]).reshape(-1)[0])),
                "exp_avg": torch.as_tensor(ckpt.extra_tensors[key], dtype=p.dtype),
                "exp_avg_sq": torch.as_tensor(
                    ckpt.extra_tensors[f"opt{i}.exp_avg_sq"], dtype=p.dtype
                ),
            }
        base = optimizer.state_dict()
        optimizer.load_state_dict({"state": opt_state, "param_groups": base["param_groups"]})
    ema = {
        name: torch.as_tensor(arr.copy()) for name, arr in (ckpt.ema or {}).items()
    }
    if not ema:
        ema = ema_init(module)
    rng = np.random.Generator(np.random.PCG64())
    if "rng_state" in ckpt.header:
        rng.bit_generator.state = ckpt.header["rng_state"]
    return TrainState(
        module=module, optimizer=optimizer, ema=ema, sched=sched, rng=rng, step=ckpt.step
    )


def train_loop(
    state: TrainState,
    data: MultimodalLatent,
    config: TrainConfig,
    *,
    steps: int | None = None,
    metrics_path=None,
    checkpoint_path=None,
    checkpoint_every: int = 0,
    log_every: int = 50,
) -> list[StepInfo]:
    """Run training steps with JSONL metrics and periodic checkpoints.

    ``data`` is the full (batched) training set; each step samples batch
    indices with replacement from the state's random stream before the step's
    own draws. Cumulative strategy counts go into every metrics record.
    """
    n = data.batch_shape[0]
    total = config.total_steps if steps is None else steps
    counts: dict[str, int] = {}
    infos: list[StepInfo] = []
    metrics_file = open(metrics_path, "a") if metrics_path else None
    try:
        while state.step < total:
            idx = state.rng.integers(0, n, size=config.batch_size)
            batch = data[idx]
            state, info = train_step(state, batch, config)
            infos.append(info)
            for k in info.kinds:
                counts[k.value] = counts.get(k.value, 0) + 1
            if metrics_file and (state.step % log_every == 0 or state.step == total):
                record = {
                    "step": state.step,
                    "loss": info.loss,
                    "lr": info.lr,
                    "strategy_counts": dict(sorted(counts.items())),
                }
                metrics_file.write(json.dumps(record) + "\n")
                metrics_file.flush()
            if (
                checkpoint_path
                and checkpoint_every > 0
                and (state.step % checkpoint_every == 0 or state.step == total)
            ):
                save_train_checkpoint(checkpoint_path, state)
    finally:
        if metrics_file:
            metrics_file.close()
    if checkpoint_path:
        save_train_checkpoint(checkpoint_path, state)
    return infos
