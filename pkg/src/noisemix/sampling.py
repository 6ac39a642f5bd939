"""Reverse-process samplers driven by timestep masking.

Conditioning is a boolean (modality, segment) mask plus clean values. The
masked cells are held at their clean values with timestep 0 in the model
input while generated cells walk down the noise levels, so joint,
cross-modal, continuation, and interpolation generation all run through one
code path. Replacement and reconstruction-guided sampling are provided as
baselines for models trained with a single shared timestep.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch

from . import fileio
from .forward import LatentShape, MultimodalLatent, q_sample_scalar
from .schedule import NoiseSchedule

__all__ = [
    "ConditionSpec",
    "SamplerConfig",
    "SamplingDiverged",
    "TASKS",
    "build_task_mask",
    "cfg_denoise",
    "ddpm_sample",
    "ddim_sample",
    "ddim_timesteps",
    "replacement_sample",
    "reconstruction_guided_sample",
    "run_sampler",
    "save_samples",
    "load_samples",
]

TASKS = ("joint", "a2v", "v2a", "continue", "inpaint")

SAMPLE_KIND = "latent-samples"

STATE_NORM_LIMIT = 1e6


class SamplingDiverged(RuntimeError):
    """Raised when a reverse process produces non-finite or runaway state."""

    def __init__(self, tau: int, detail: str):
        self.tau = tau
        super().__init__(f"sampler diverged at timestep {tau}: {detail}")


@dataclass(frozen=True)
class ConditionSpec:
    """Boolean conditioning mask (True = held clean) plus the clean values."""

    mask: np.ndarray
    values: MultimodalLatent | None = None

    def __post_init__(self):
        mask = np.asarray(self.mask, dtype=bool)
        object.__setattr__(self, "mask", mask)
        if mask.ndim != 2:
            raise ValueError("mask must be a 2-D (modalities, segments) array")
        if self.values is None:
            if mask.any():
                raise ValueError("conditioned entries require values")
        else:
            M, N = self.values.num_modalities, self.values.num_segments
            if mask.shape != (M, N):
                raise ValueError(f"mask shape {mask.shape} does not match values ({M}, {N})")
            for m in range(M):
                if mask[m].any() and not np.all(
                    np.isfinite(self.values.parts[m][..., mask[m], :])
                ):
                    raise ValueError(f"conditioning values for modality {m} are not finite")

    @staticmethod
    def unconditional(M: int, N: int) -> "ConditionSpec":
        return ConditionSpec(mask=np.zeros((M, N), dtype=bool), values=None)

    @property
    def all_conditioned(self) -> bool:
        return bool(self.mask.all())


@dataclass(frozen=True)
class SamplerConfig:
    """Reverse-process settings shared by the samplers.

    ``self_cond`` threads the previous step's clean-data estimate back into
    the model during the reverse loop. Off by default: at desk scale the
    feedback loop amplifies model error.
    """

    kind: str = "ddim"
    steps: int = 250
    guidance_scale: float = 0.0
    sigma_rule: str = "beta"
    self_cond: bool = False

    def __post_init__(self):
        if self.kind not in ("ddpm", "ddim"):
            raise ValueError("kind must be 'ddpm' or 'ddim'")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.guidance_scale < 0.0:
            raise ValueError("guidance scale must be >= 0")
        if self.sigma_rule not in ("beta", "posterior"):
            raise ValueError("sigma_rule must be 'beta' or 'posterior'")

    def to_dict(self) -> dict:
        return asdict(self)


def build_task_mask(task: str, M: int, N: int, n_c: int = 3, k: int = 2) -> np.ndarray:
    """Conditioning mask for one of the five generation tasks.

    joint: nothing conditioned. a2v: modality 1 conditioned. v2a: modality 2
    conditioned. continue: first ``n_c`` segments of every modality.
    inpaint: first segment and last ``k`` segments of every modality.
    """
    mask = np.zeros((M, N), dtype=bool)
    if task == "joint":
        return mask
    if task == "a2v":
        mask[0, :] = True
        return mask
    if task == "v2a":
        if M < 2:
            raise ValueError("v2a needs at least two modalities")
        mask[1, :] = True
        return mask
    if task == "continue":
        if not (1 <= n_c < N):
            raise ValueError(f"n_c must lie in [1, {N - 1}], got {n_c}")
        mask[:, :n_c] = True
        return mask
    if task == "inpaint":
        if not (1 <= k <= N - 2):
            raise ValueError(f"k must lie in [1, {N - 2}], got {k}")
        mask[:, 0] = True
        mask[:, N - k :] = True
        return mask
    raise ValueError(f"unknown task {task!r}; choose from {TASKS}")


def _resolve_shape(cond: ConditionSpec, shape: LatentShape | None) -> LatentShape:
    if cond.values is not None:
        return cond.values.shape
    if shape is None:
        raise ValueError("unconditional sampling needs an explicit shape")
    return shape


def _init_state(cond: ConditionSpec, shape: LatentShape, rng) -> list[np.ndarray]:
    noise = MultimodalLatent.standard_normal(shape, rng)
    state = [p.copy() for p in noise.parts]
    _inject_values(state, cond)
    return state


def _inject_values(state: list[np.ndarray], cond: ConditionSpec) -> None:
    if cond.values is None:
        return
    for m in range(len(state)):
        rows = cond.mask[m]
        if rows.any():
            state[m][..., rows, :] = cond.values.parts[m][..., rows, :].astype(np.float64)


def _check_finite(state: list[np.ndarray], tau: int) -> None:
    for m, p in enumerate(state):
        if not np.all(np.isfinite(p)):
            raise SamplingDiverged(tau, f"non-finite values in modality {m}")


def _sigma(sched: NoiseSchedule, tau: int, rule: str) -> float:
    beta = float(sched.betas[tau - 1])
    if rule == "beta":
        return math.sqrt(beta)
    prev = float(sched.alpha_bars[tau - 1])
    cur = float(sched.alpha_bars[tau])
    return math.sqrt(beta * (1.0 - prev) / (1.0 - cur))


def _clean_estimate_np(
    state: list[np.ndarray], eps_hat: MultimodalLatent, tvec: np.ndarray, sched: NoiseSchedule
) -> MultimodalLatent:
    """Per-element clean-data estimate used for self-conditioning feedback."""
    parts = []
    for m, (z, e) in enumerate(zip(state, eps_hat.parts)):
        ab = sched.alpha_bars[tvec[m]][:, None]
        parts.append((z - np.sqrt(1.0 - ab) * e) / np.sqrt(ab))
    return MultimodalLatent(tuple(parts))


def cfg_denoise(
    model,
    z_t: MultimodalLatent,
    cond: ConditionSpec,
    tau: int,
    s: float,
    *,
    sched: NoiseSchedule,
    rng: np.random.Generator,
    self_cond: MultimodalLatent | None = None,
) -> MultimodalLatent:
    """Guided noise prediction blending conditional and unconditional branches.

    The conditional branch sees clean values with timestep 0 at masked cells;
    the unconditional branch replaces masked cells with fresh unit-normal
    noise at timestep T (redrawn every call). Returns
    ``(1 + s) * eps_cond - s * eps_uncond`` on generated cells and the
    conditional prediction on masked cells. With ``s == 0`` the unconditional
    branch is never evaluated and no noise is drawn.
    """
    if s < 0.0:
        raise ValueError("guidance scale must be >= 0")
    tvec_c = np.where(cond.mask, 0, tau)
    eps_c = model(z_t, tvec_c, self_cond)
    if s == 0.0 or not cond.mask.any():
        return eps_c
    fresh = MultimodalLatent.standard_normal(z_t.shape, rng)
    parts_u = []
    for m, p in enumerate(z_t.parts):
        q = p.copy()
        rows = cond.mask[m]
        if rows.any():
            q[..., rows, :] = fresh.parts[m][..., rows, :]
        parts_u.append(q)
    tvec_u = np.where(cond.mask, sched.T, tau)
    eps_u = model(MultimodalLatent(tuple(parts_u)), tvec_u, self_cond)
    blended = []
    for m, (ec, eu) in enumerate(zip(eps_c.parts, eps_u.parts)):
        out = (1.0 + s) * ec - s * eu
        rows = cond.mask[m]
        if rows.any():
            out[..., rows, :] = ec[..., rows, :]
        blended.append(out)
    return MultimodalLatent(tuple(blended))


def _predict(model, state, cond, tau, config, sched, rng, self_cond):
    z = MultimodalLatent(tuple(state))
    sc = self_cond if (config.self_cond and getattr(model, "self_conditioning", False)) else None
    if config.guidance_scale > 0.0 and cond.mask.any():
        return cfg_denoise(
            model, z, cond, tau, config.guidance_scale, sched=sched, rng=rng, self_cond=sc
        )
    tvec = np.where(cond.mask, 0, tau)
    return model(z, tvec, sc)


def ddpm_sample(
    model,
    sched: NoiseSchedule,
    cond: ConditionSpec,
    shape: LatentShape | None = None,
    rng: np.random.Generator | None = None,
    config: SamplerConfig = SamplerConfig(kind="ddpm"),
) -> MultimodalLatent:
    """Ancestral reverse process with masked conditioning.

    Generated cells start from unit normal and step through
    ``(z - beta/sqrt(1-abar) * eps_hat) / sqrt(alpha) + sigma * noise`` for
    tau = T..1 (no noise at tau = 1); masked cells are injected once and
    returned bit-exactly. Model calls see timestep 0 at masked cells and tau
    elsewhere. If all cells are masked the values are returned without any
    model call or random draw.
    """
    shape = _resolve_shape(cond, shape)
    if cond.all_conditioned:
        return cond.values.copy()
    state = _init_state(cond, shape, rng)
    self_cond = None
    track_sc = config.self_cond and getattr(model, "self_conditioning", False)
    for tau in range(sched.T, 0, -1):
        eps_hat = _predict(model, state, cond, tau, config, sched, rng, self_cond)
        if track_sc:
            tvec = np.where(cond.mask, 0, tau)
            self_cond = _clean_estimate_np(state, eps_hat, tvec, sched)
        coef = float(sched.betas[tau - 1]) / math.sqrt(1.0 - float(sched.alpha_bars[tau]))
        inv_sqrt_alpha = math.sqrt(float(sched.alphas[tau - 1]))
        sigma = _sigma(sched, tau, config.sigma_rule)
        noise = (
            MultimodalLatent.standard_normal(shape, rng)
            if tau > 1
            else MultimodalLatent.zeros(shape)
        )
        for m in range(len(state)):
            gen = ~cond.mask[m]
            if not gen.any():
                continue
            z = state[m][..., gen, :]
            mean = (z - coef * eps_hat.parts[m][..., gen, :]) / inv_sqrt_alpha
            state[m][..., gen, :] = mean + sigma * noise.parts[m][..., gen, :]
        _check_finite(state, tau)
    return MultimodalLatent(tuple(state))


def ddim_timesteps(T: int, steps: int) -> list[int]:
    """Evenly spaced descending timesteps including T, excluding 0, floored."""
    if not (1 <= steps <= T):
        raise ValueError(f"steps must lie in [1, {T}], got {steps}")
    return [math.floor(T * (steps - i) / steps) for i in range(steps)]


def ddim_sample(
    model,
    sched: NoiseSchedule,
    cond: ConditionSpec,
    shape: LatentShape | None = None,
    rng: np.random.Generator | None = None,
    steps: int = 250,
    config: SamplerConfig = SamplerConfig(kind="ddim"),
) -> MultimodalLatent:
    """Deterministic (eta = 0) strided reverse process, same masking contract
    as :func:`ddpm_sample`. Randomness enters only through the initial noise
    (and guidance, if enabled)."""
    shape = _resolve_shape(cond, shape)
    if cond.all_conditioned:
        return cond.values.copy()
    taus = ddim_timesteps(sched.T, steps)
    state = _init_state(cond, shape, rng)
    self_cond = None
    track_sc = config.self_cond and getattr(model, "self_conditioning", False)
    for i, tau in enumerate(taus):
        tau_next = taus[i + 1] if i + 1 < len(taus) else 0
        eps_hat = _predict(model, state, cond, tau, config, sched, rng, self_cond)
        if track_sc:
            tvec = np.where(cond.mask, 0, tau)
            self_cond = _clean_estimate_np(state, eps_hat, tvec, sched)
        ab_t = float(sched.alpha_bars[tau])
        ab_n = float(sched.alpha_bars[tau_next])
        for m in range(len(state)):
            gen = ~cond.mask[m]
            if not gen.any():
                continue
            z = state[m][..., gen, :]
            e = eps_hat.parts[m][..., gen, :]
            x0 = (z - math.sqrt(1.0 - ab_t) * e) / math.sqrt(ab_t)
            state[m][..., gen, :] = math.sqrt(ab_n) * x0 + math.sqrt(1.0 - ab_n) * e
        _check_finite(state, tau)
    return MultimodalLatent(tuple(state))


def replacement_sample(
    model,
    sched: NoiseSchedule,
    cond: ConditionSpec,
    shape: LatentShape | None = None,
    rng: np.random.Generator | None = None,
    config: SamplerConfig = SamplerConfig(kind="ddpm"),
) -> MultimodalLatent:
    """Conditional sampling for shared-timestep models by replacement.

    Runs the plain reverse process on the full latent with one shared
    timestep, then overwrites masked cells with freshly noised clean values
    at the new noise level after every step. The final overwrite (at level 0)
    makes masked output cells equal the clean values exactly.
    """
    shape = _resolve_shape(cond, shape)
    if cond.all_conditioned:
        return cond.values.copy()
    noise0 = MultimodalLatent.standard_normal(shape, rng)
    state = [p.copy() for p in noise0.parts]
    values64 = cond.values.astype(np.float64) if cond.values is not None else None
    self_cond = None
    track_sc = config.self_cond and getattr(model, "self_conditioning", False)
    M, N = cond.mask.shape
    for tau in range(sched.T, 0, -1):
        tvec = np.full((M, N), tau, dtype=np.int64)
        sc = self_cond if track_sc else None
        eps_hat = model(MultimodalLatent(tuple(state)), tvec, sc)
        if track_sc:
            self_cond = _clean_estimate_np(state, eps_hat, tvec, sched)
        coef = float(sched.betas[tau - 1]) / math.sqrt(1.0 - float(sched.alpha_bars[tau]))
        inv_sqrt_alpha = math.sqrt(float(sched.alphas[tau - 1]))
        sigma = _sigma(sched, tau, config.sigma_rule)
        noise = (
            MultimodalLatent.standard_normal(shape, rng)
            if tau > 1
            else MultimodalLatent.zeros(shape)
        )
        for m in range(len(state)):
            mean = (state[m] - coef * eps_hat.parts[m]) / inv_sqrt_alpha
            state[m] = mean + sigma * noise.parts[m]
        if values64 is not None:
            re_noise = MultimodalLatent.standard_normal(shape, rng)
            noised = q_sample_scalar(values64, tau - 1, re_noise, sched)
            for m in range(len(state)):
                rows = cond.mask[m]
                if rows.any():
                    state[m][..., rows, :] = noised.parts[m][..., rows, :]
        _check_finite(state, tau)
    return MultimodalLatent(tuple(state))


def reconstruction_guided_sample(
    model,
    sched: NoiseSchedule,
    cond: ConditionSpec,
    shape: LatentShape | None = None,
    rng: np.random.Generator | None = None,
    lam: float = 0.02,
    config: SamplerConfig = SamplerConfig(kind="ddpm"),
) -> MultimodalLatent:
    """Gradient-guided conditional sampling for shared-timestep models.

    The state evolves unconditionally; at each step the generated cells are
    corrected by ``-lam * sqrt(1 - abar_tau) * grad``, where the gradient (of
    the squared error between the stepped mean at masked cells and freshly
    noised clean values at the next level) is taken through the network with
    respect to the input state. Masked output cells are overwritten with the
    clean values at the end. Aborts if the state norm exceeds 1e6.
    """
    if lam < 0.0:
        raise ValueError("lam must be >= 0")
    shape = _resolve_shape(cond, shape)
    if cond.all_conditioned:
        return cond.values.copy()
    module = getattr(model, "module", None)
    if lam > 0.0 and module is None:
        raise ValueError("reconstruction guidance needs a network model with input gradients")
    noise0 = MultimodalLatent.standard_normal(shape, rng)
    state = [p.copy() for p in noise0.parts]
    values64 = cond.values.astype(np.float64) if cond.values is not None else None
    self_cond = None
    track_sc = config.self_cond and getattr(model, "self_conditioning", False)
    M, N = cond.mask.shape
    for tau in range(sched.T, 0, -1):
        tvec = np.full((M, N), tau, dtype=np.int64)
        coef = float(sched.betas[tau - 1]) / math.sqrt(1.0 - float(sched.alpha_bars[tau]))
        inv_sqrt_alpha = math.sqrt(float(sched.alphas[tau - 1]))
        sigma = _sigma(sched, tau, config.sigma_rule)
        sc = self_cond if track_sc else None

        if lam > 0.0 and cond.mask.any():
            target_noise = MultimodalLatent.standard_normal(shape, rng)
            targets = q_sample_scalar(values64, tau - 1, target_noise, sched)
            eps_hat, mean, grads = _guidance_step(
                module, state, tvec, cond, targets, coef, inv_sqrt_alpha, sc
            )
        else:
            eps_hat = model(MultimodalLatent(tuple(state)), tvec, sc)
            mean = [
                (state[m] - coef * eps_hat.parts[m]) / inv_sqrt_alpha for m in range(len(state))
            ]
            grads = None
        if track_sc:
            self_cond = _clean_estimate_np(state, eps_hat, tvec, sched)
        noise = (
            MultimodalLatent.standard_normal(shape, rng)
            if tau > 1
            else MultimodalLatent.zeros(shape)
        )
        guide_scale = lam * math.sqrt(1.0 - float(sched.alpha_bars[tau]))
        for m in range(len(state)):
            new = mean[m] + sigma * noise.parts[m]
            if grads is not None:
                gen = ~cond.mask[m]
                if gen.any():
                    new[..., gen, :] -= guide_scale * grads[m][..., gen, :]
            state[m] = new
        norm = math.sqrt(sum(float(np.sum(p * p)) for p in state))
        if norm > STATE_NORM_LIMIT:
            raise SamplingDiverged(tau, f"state norm {norm:.3e} exceeds {STATE_NORM_LIMIT:.0e}")
        _check_finite(state, tau)
    if values64 is not None:
        _inject_values(state, cond)
    return MultimodalLatent(tuple(state))


def _guidance_step(module, state, tvec, cond, targets, coef, inv_sqrt_alpha, self_cond):
    """Noise prediction, stepped mean, and input-gradient of the masked
    reconstruction error, all computed through the network."""
    dtype = module.config.torch_dtype
    unbatched = state[0].ndim == 2
    z_req = [torch.tensor(p[None] if unbatched else p, dtype=dtype, requires_grad=True) for p in state]
    tvec_t = torch.as_tensor(tvec, dtype=torch.long)
    sc_t = None
    if self_cond is not None:
        sc_t = [
            torch.as_tensor(p[None] if unbatched else p, dtype=dtype)
            for p in self_cond.parts
        ]
    eps = module(z_req, tvec_t, sc_t)
    mean_t = [(z - coef * e) / inv_sqrt_alpha for z, e in zip(z_req, eps)]
    err = None
    for m, mt in enumerate(mean_t):
        rows = cond.mask[m]
        if not rows.any():
            continue
        target = targets.parts[m][..., rows, :]
        target_t = torch.as_tensor(target[None] if unbatched else target, dtype=dtype)
        sq = ((mt[..., rows, :] - target_t) ** 2).sum()
        err = sq if err is None else err + sq
    grads_t = torch.autograd.grad(err, z_req)

    def strip(t):
        a = t.detach().numpy()
        return a[0] if unbatched else a

    eps_np = MultimodalLatent(tuple(strip(e) for e in eps))
    return eps_np, [strip(mt) for mt in mean_t], [strip(g) for g in grads_t]


def run_sampler(
    model,
    sched: NoiseSchedule,
    cond: ConditionSpec,
    shape: LatentShape | None = None,
    rng: np.random.Generator | None = None,
    config: SamplerConfig = SamplerConfig(),
    method: str = "masked",
    lam: float = 0.02,
) -> MultimodalLatent:
    """Dispatch to the configured sampler or baseline method."""
    if method == "masked":
        if config.kind == "ddim":
            return ddim_sample(model, sched, cond, shape, rng, config.steps, config)
        return ddpm_sample(model, sched, cond, shape, rng, config)
    if method == "replacement":
        return replacement_sample(model, sched, cond, shape, rng, config)
    if method == "recon-guided":
        return reconstruction_guided_sample(model, sched, cond, shape, rng, lam, config)
    raise ValueError(f"unknown sampling method {method!r}")


def save_samples(
    path,
    latent: MultimodalLatent,
    *,
    mask: np.ndarray,
    seed: int,
    sampler: SamplerConfig,
    task: str | None = None,
    extra: dict | None = None,
) -> None:
    """Write generated latents with full provenance to a sample file."""
    if latent.batch_shape == ():
        latent = MultimodalLatent(tuple(p[None] for p in latent.parts))
    header = {
        "shape": {
            "n": latent.batch_shape[0],
            "num_segments": latent.num_segments,
            "widths": list(latent.widths),
        },
        "mask": np.asarray(mask, dtype=bool).tolist(),
        "seed": int(seed),
        "sampler": sampler.to_dict(),
        "task": task,
    }
    if extra:
        header.update(extra)
    payload = fileio_pack(latent)
    fileio.write_container(path, SAMPLE_KIND, header, payload)


def load_samples(path) -> tuple[MultimodalLatent, dict]:
    """Read a sample file back into a batched latent plus its header."""
    header, payload = fileio.read_container(path, SAMPLE_KIND)
    shape = header["shape"]
    latent = fileio_unpack(payload, shape["n"], shape["num_segments"], shape["widths"])
    return latent, header


def fileio_pack(latent: MultimodalLatent) -> bytes:
    """Example-major, modality-major, segment-major float32 packing."""
    n = latent.batch_shape[0]
    rows = np.concatenate(
        [p.reshape(n, -1).astype("<f4") for p in latent.parts], axis=1
    )
    return rows.tobytes()


def fileio_unpack(payload: bytes, n: int, num_segments: int, widths) -> MultimodalLatent:
    widths = list(widths)
    per_example = num_segments * sum(widths)
    flat = np.frombuffer(payload, dtype="<f4")
    if flat.size != n * per_example:
        raise fileio.ContainerError(
            f"payload holds {flat.size} floats, header implies {n * per_example}"
        )
    rows = flat.reshape(n, per_example)
    parts = []
    offset = 0
    for d in widths:
        span = num_segments * d
        parts.append(
            rows[:, offset : offset + span].reshape(n, num_segments, d).astype(np.float32)
        )
        offset += span
    return MultimodalLatent(tuple(parts))
