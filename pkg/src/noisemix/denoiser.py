"""Joint noise-prediction transformer for multimodal latent sequences.

One token per (modality, time-segment). Each token's adaptive layer norm is
modulated by the embedding of that token's own diffusion timestep (summed
with learned positional and modality embeddings), so different tokens can
carry different noise levels through the same forward pass. All modulation
maps are zero-initialized: every block starts as identity-plus-residual.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn

from . import fileio
from .forward import MultimodalLatent
from .schedule import TimestepVector

__all__ = [
    "DenoiserConfig",
    "Denoiser",
    "NetPredictor",
    "init_denoiser",
    "embed_timestep_vector",
    "denoise",
    "save_checkpoint",
    "load_checkpoint",
    "CheckpointData",
]

CHECKPOINT_KIND = "denoiser-checkpoint"

_DTYPES = {"float32": torch.float32, "float64": torch.float64}


@dataclass(frozen=True)
class DenoiserConfig:
    """Architecture hyperparameters for the toy multimodal denoiser."""

    widths: tuple[int, ...] = (4, 6)
    num_segments: int = 8
    model_dim: int = 32
    layers: int = 2
    heads: int = 4
    T: int = 1000
    timestep_embed_dim: int = 64
    self_conditioning: bool = True
    dtype: str = "float64"

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if self.layers < 1:
            raise ValueError("layers must be >= 1")
        if self.model_dim % self.heads != 0:
            raise ValueError(f"model_dim {self.model_dim} not divisible by heads {self.heads}")
        if any(w < 1 for w in self.widths) or self.num_segments < 1:
            raise ValueError("widths and num_segments must be positive")
        if self.T < 1:
            raise ValueError("T must be >= 1")
        if self.dtype not in _DTYPES:
            raise ValueError(f"dtype must be one of {sorted(_DTYPES)}")

    @property
    def num_modalities(self) -> int:
        return len(self.widths)

    @property
    def torch_dtype(self) -> torch.dtype:
        return _DTYPES[self.dtype]

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "DenoiserConfig":
        return DenoiserConfig(**{**d, "widths": tuple(d["widths"])})


def sinusoidal_embedding(t: torch.Tensor, dim: int, dtype: torch.dtype) -> torch.Tensor:
    """Standard sin/cos embedding of integer timesteps, max period 10000."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=dtype, device=t.device) / half
    )
    args = t.to(dtype)[..., None] * freqs
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[..., :1])], dim=-1)
    return emb


class SelfAttention(nn.Module):
    """Bidirectional multi-head self-attention over the joint token sequence."""

    def __init__(self, dim: int, heads: int, dtype: torch.dtype):
        super().__init__()
        self.heads = heads
        self.head_dim = dim // heads
        self.qkv = nn.Linear(dim, 3 * dim, dtype=dtype)
        self.proj = nn.Linear(dim, dim, dtype=dtype)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        B, L, d = x.shape
        q, k, v = self.qkv(x).chunk(3, dim=-1)
        q = q.view(B, L, self.heads, self.head_dim).transpose(1, 2)
        k = k.view(B, L, self.heads, self.head_dim).transpose(1, 2)
        v = v.view(B, L, self.heads, self.head_dim).transpose(1, 2)
        att = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(self.head_dim), dim=-1)
        y = (att @ v).transpose(1, 2).reshape(B, L, d)
        return self.proj(y)


class Block(nn.Module):
    """Transformer block with per-token scale/shift/gate modulation."""

    def __init__(self, dim: int, heads: int, dtype: torch.dtype):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim, elementwise_affine=False, eps=1e-6, dtype=dtype)
        self.attn = SelfAttention(dim, heads, dtype)
        self.norm2 = nn.LayerNorm(dim, elementwise_affine=False, eps=1e-6, dtype=dtype)
        self.mlp = nn.Sequential(
            nn.Linear(dim, 4 * dim, dtype=dtype),
            nn.GELU(approximate="tanh"),
            nn.Linear(4 * dim, dim, dtype=dtype),
        )
        self.modulation = nn.Sequential(nn.SiLU(), nn.Linear(dim, 6 * dim, dtype=dtype))

    def forward(self, x: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        shift_a, scale_a, gate_a, shift_m, scale_m, gate_m = self.modulation(cond).chunk(6, dim=-1)
        x = x + gate_a * self.attn(self.norm1(x) * (1 + scale_a) + shift_a)
        x = x + gate_m * self.mlp(self.norm2(x) * (1 + scale_m) + shift_m)
        return x


class Denoiser(nn.Module):
    """Noise-prediction network; see module docstring for the layout."""

    def __init__(self, config: DenoiserConfig):
        super().__init__()
        self.config = config
        d, dt = config.model_dim, config.torch_dtype
        in_mult = 2 if config.self_conditioning else 1
        self.in_proj = nn.ModuleList(
            nn.Linear(w * in_mult, d, dtype=dt) for w in config.widths
        )
        self.out_proj = nn.ModuleList(nn.Linear(d, w, dtype=dt) for w in config.widths)
        self.pos_emb = nn.Parameter(
            torch.zeros(config.num_modalities, config.num_segments, d, dtype=dt)
        )
        self.mod_emb = nn.Parameter(torch.zeros(config.num_modalities, d, dtype=dt))
        self.t_mlp = nn.Sequential(
            nn.Linear(config.timestep_embed_dim, d, dtype=dt),
            nn.SiLU(),
            nn.Linear(d, d, dtype=dt),
        )
        self.blocks = nn.ModuleList(
            Block(d, config.heads, dt) for _ in range(config.layers)
        )
        self.final_norm = nn.LayerNorm(d, elementwise_affine=False, eps=1e-6, dtype=dt)
        self.final_modulation = nn.Sequential(nn.SiLU(), nn.Linear(d, 2 * d, dtype=dt))

    def _check_tvec(self, tvec: torch.Tensor, batch: int) -> torch.Tensor:
        cfg = self.config
        if tvec.dim() == 2:
            tvec = tvec.unsqueeze(0).expand(batch, -1, -1)
        if tvec.shape != (batch, cfg.num_modalities, cfg.num_segments):
            raise ValueError(
                f"timestep vector shape {tuple(tvec.shape)} does not match "
                f"(batch={batch}, M={cfg.num_modalities}, N={cfg.num_segments})"
            )
        if (tvec < 0).any() or (tvec > cfg.T).any():
            raise ValueError(f"timesteps must lie in [0, {cfg.T}]")
        return tvec

    def conditioning(self, tvec: torch.Tensor) -> torch.Tensor:
        """Per-token conditioning vectors, shape (B, M, N, model_dim)."""
        cfg = self.config
        B = tvec.shape[0]
        sin = sinusoidal_embedding(
            tvec.reshape(B, -1), cfg.timestep_embed_dim, cfg.torch_dtype
        )
        emb = self.t_mlp(sin).reshape(B, cfg.num_modalities, cfg.num_segments, cfg.model_dim)
        return emb + self.pos_emb + self.mod_emb[:, None, :]

    def forward(
        self,
        parts: list[torch.Tensor],
        tvec: torch.Tensor,
        self_cond: list[torch.Tensor] | None = None,
    ) -> list[torch.Tensor]:
        cfg = self.config
        if len(parts) != cfg.num_modalities:
            raise ValueError(f"expected {cfg.num_modalities} modalities, got {len(parts)}")
        B, N = parts[0].shape[0], cfg.num_segments
        for p, w in zip(parts, cfg.widths):
            if p.shape != (B, N, w):
                raise ValueError(f"modality shape {tuple(p.shape)} != ({B}, {N}, {w})")
        tvec = self._check_tvec(tvec, B)

        if cfg.self_conditioning:
            if self_cond is None:
                self_cond = [torch.zeros_like(p) for p in parts]
            parts = [torch.cat([p, s], dim=-1) for p, s in zip(parts, self_cond)]
        elif self_cond is not None:
            raise ValueError("model was built without self-conditioning")

        # Tokens carry position and modality directly; the same tables also
        # enter the conditioning pathway.
        x = torch.cat(
            [
                proj(p) + self.pos_emb[m] + self.mod_emb[m]
                for m, (proj, p) in enumerate(zip(self.in_proj, parts))
            ],
            dim=1,
        )
        cond = self.conditioning(tvec).reshape(B, -1, cfg.model_dim)
        for block in self.blocks:
            x = block(x, cond)
        shift, scale = self.final_modulation(cond).chunk(2, dim=-1)
        x = self.final_norm(x) * (1 + scale) + shift
        return [
            proj(x[:, m * N : (m + 1) * N]) for m, proj in enumerate(self.out_proj)
        ]


def init_denoiser(config: DenoiserConfig, rng) -> Denoiser:
    """Build a denoiser with deterministic, seeded initialization.

    Linear weights are normal with std 1/sqrt(fan_in), embeddings normal with
    std 0.02, biases zero, and every modulation map exactly zero. ``rng`` is
    either an integer seed or a numpy Generator (one draw is consumed).
    """
    seed = int(rng) if isinstance(rng, (int, np.integer)) else int(rng.integers(0, 2**63 - 1))
    gen = torch.Generator().manual_seed(seed)
    module = Denoiser(config)
    with torch.no_grad():
        for name, p in module.named_parameters():
            if "modulation" in name:
                p.zero_()
            elif name.endswith(".bias"):
                p.zero_()
            elif name in ("pos_emb", "mod_emb"):
                p.normal_(0.0, 0.02, generator=gen)
            else:
                p.normal_(0.0, 1.0 / math.sqrt(p.shape[-1]), generator=gen)
    return module


def _to_tensor_parts(z: MultimodalLatent, dtype: torch.dtype) -> list[torch.Tensor]:
    return [torch.as_tensor(np.ascontiguousarray(p), dtype=dtype) for p in z.parts]


def _tvec_tensor(tvec) -> torch.Tensor:
    t = tvec.entries if isinstance(tvec, TimestepVector) else np.asarray(tvec)
    return torch.as_tensor(t, dtype=torch.long)


def embed_timestep_vector(tvec, model: Denoiser) -> np.ndarray:
    """Conditioning embedding for a timestep vector, shape (..., M, N, model_dim)."""
    t = _tvec_tensor(tvec)
    squeeze = t.dim() == 2
    if squeeze:
        t = t.unsqueeze(0)
    with torch.no_grad():
        out = model.conditioning(t)
    out = out.numpy()
    return out[0] if squeeze else out


def denoise(
    model: "Denoiser | NetPredictor",
    z_t: MultimodalLatent,
    tvec,
    self_cond: MultimodalLatent | None = None,
) -> MultimodalLatent:
    """Predict the noise content of ``z_t`` under timestep vector ``tvec``.

    Accepts unbatched ``(N, d_m)`` or batched ``(B, N, d_m)`` latents; the
    output matches the input shape. An absent ``self_cond`` is treated as
    zeros.
    """
    module = model.module if isinstance(model, NetPredictor) else model
    dtype = module.config.torch_dtype
    squeeze = z_t.batch_shape == ()
    z = MultimodalLatent(tuple(p[None] for p in z_t.parts)) if squeeze else z_t
    parts = _to_tensor_parts(z, dtype)
    t = _tvec_tensor(tvec)
    if squeeze and t.dim() == 3:
        raise ValueError("batched timestep vector with unbatched latent")
    sc = None
    if self_cond is not None:
        s = MultimodalLatent(tuple(p[None] for p in self_cond.parts)) if squeeze else self_cond
        sc = _to_tensor_parts(s, dtype)
    with torch.no_grad():
        out = module(parts, t, sc)
    arrs = [o.numpy() for o in out]
    if squeeze:
        arrs = [a[0] for a in arrs]
    return MultimodalLatent(tuple(arrs))


class NetPredictor:
    """Numpy-facing callable around a denoiser, as used by the samplers."""

    def __init__(self, module: Denoiser):
        self.module = module
        self.self_conditioning = module.config.self_conditioning

    def __call__(self, z_t, tvec, self_cond=None) -> MultimodalLatent:
        return denoise(self.module, z_t, tvec, self_cond)


@dataclass
class CheckpointData:
    """Decoded checkpoint: config plus named parameter arrays."""

    config: DenoiserConfig
    params: dict[str, np.ndarray]
    ema: dict[str, np.ndarray] | None
    step: int
    extra_tensors: dict[str, np.ndarray]
    header: dict

    def build_module(self, use_ema: bool = False) -> Denoiser:
        """Instantiate the denoiser, validating shape agreement."""
        source = self.ema if use_ema else self.params
        if source is None:
            raise ValueError("checkpoint carries no EMA weights")
        module = Denoiser(self.config)
        with torch.no_grad():
            for name, p in module.named_parameters():
                if name not in source:
                    raise ValueError(f"checkpoint is missing tensor {name!r}")
                arr = source[name]
                if tuple(arr.shape) != tuple(p.shape):
                    raise ValueError(
                        f"checkpoint tensor {name!r} has shape {arr.shape}, expected {tuple(p.shape)}"
                    )
                p.copy_(torch.as_tensor(arr, dtype=p.dtype))
        return module


def save_checkpoint(
    path,
    module: Denoiser,
    ema: dict[str, torch.Tensor] | None = None,
    *,
    step: int = 0,
    extra_tensors: dict[str, np.ndarray] | None = None,
    extra_header: dict | None = None,
) -> None:
    """Serialize parameters (and optional EMA/extra tensors) to ``path``."""
    tensors: list[tuple[str, np.ndarray]] = []
    for name, p in module.named_parameters():
        tensors.append((f"param/{name}", p.detach().numpy()))
    if ema is not None:
        for name, t in ema.items():
            tensors.append((f"ema/{name}", t.detach().numpy()))
    for name, arr in (extra_tensors or {}).items():
        tensors.append((f"extra/{name}", np.asarray(arr)))

    index = []
    chunks = []
    for name, arr in tensors:
        arr = np.ascontiguousarray(arr)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        index.append({"name": name, "shape": list(arr.shape), "dtype": str(arr.dtype)})
        chunks.append(le.tobytes())
    header = {
        "config": module.config.to_dict(),
        "tensors": index,
        "step": int(step),
    }
    if extra_header:
        header.update(extra_header)
    fileio.write_container(path, CHECKPOINT_KIND, header, b"".join(chunks))


def load_checkpoint(path) -> CheckpointData:
    """Read a checkpoint written by :func:`save_checkpoint`."""
    header, payload = fileio.read_container(path, CHECKPOINT_KIND)
    config = DenoiserConfig.from_dict(header["config"])
    params: dict[str, np.ndarray] = {}
    ema: dict[str, np.ndarray] = {}
    extra: dict[str, np.ndarray] = {}
    offset = 0
    for entry in header["tensors"]:
        dtype = np.dtype(entry["dtype"]).newbyteorder("<")
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        nbytes = dtype.itemsize * count
        if offset + nbytes > len(payload):
            raise fileio.ContainerError(f"{path}: tensor payload shorter than header index")
        arr = np.frombuffer(payload, dtype=dtype, count=count, offset=offset)
        arr = arr.reshape(entry["shape"]).astype(dtype.newbyteorder("="), copy=True)
        offset += nbytes
        name = entry["name"]
        if name.startswith("param/"):
            params[name[len("param/") :]] = arr
        elif name.startswith("ema/"):
            ema[name[len("ema/") :]] = arr
        elif name.startswith("extra/"):
            extra[name[len("extra/") :]] = arr
    return CheckpointData(
        config=config,
        params=params,
        ema=ema or None,
        step=int(header.get("step", 0)),
        extra_tensors=extra,
        header=header,
    )
