"""Multimodal latent sequences and the element-wise forward diffusion map.

A latent holds M per-modality arrays that share the time axis N but may have
different channel widths. Forward diffusion noises each (modality, segment)
cell according to its own timestep, so cells with timestep 0 pass through
untouched.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .schedule import NoiseSchedule, TimestepVector, constant_timestep_vector

__all__ = ["MultimodalLatent", "LatentShape", "q_sample", "q_sample_scalar"]


@dataclass(frozen=True)
class LatentShape:
    """Shape descriptor: channel widths per modality, segment count, batch dims."""

    widths: tuple[int, ...]
    num_segments: int
    batch: tuple[int, ...] = ()

    @property
    def num_modalities(self) -> int:
        return len(self.widths)


@dataclass(frozen=True)
class MultimodalLatent:
    """Tuple of per-modality arrays shaped ``(*batch, N, d_m)``.

    All modalities share the batch dims and segment count N; widths d_m may
    differ. Arithmetic on latents is done through the free functions in this
    module and in :mod:`noisemix.sampling`.
    """

    parts: tuple[np.ndarray, ...]

    def __post_init__(self):
        if len(self.parts) == 0:
            raise ValueError("latent needs at least one modality")
        object.__setattr__(self, "parts", tuple(np.asarray(p) for p in self.parts))
        lead = self.parts[0].shape[:-1]
        for p in self.parts:
            if p.ndim < 2:
                raise ValueError("each modality must be shaped (..., N, d_m)")
            if p.shape[:-1] != lead:
                raise ValueError(
                    f"modalities must share batch and segment dims, got {[q.shape for q in self.parts]}"
                )

    @property
    def num_modalities(self) -> int:
        return len(self.parts)

    @property
    def num_segments(self) -> int:
        return self.parts[0].shape[-2]

    @property
    def widths(self) -> tuple[int, ...]:
        return tuple(p.shape[-1] for p in self.parts)

    @property
    def batch_shape(self) -> tuple[int, ...]:
        return self.parts[0].shape[:-2]

    @property
    def shape(self) -> LatentShape:
        return LatentShape(self.widths, self.num_segments, self.batch_shape)

    def copy(self) -> "MultimodalLatent":
        return MultimodalLatent(tuple(p.copy() for p in self.parts))

    def astype(self, dtype) -> "MultimodalLatent":
        return MultimodalLatent(tuple(p.astype(dtype) for p in self.parts))

    def validate_finite(self) -> "MultimodalLatent":
        for m, p in enumerate(self.parts):
            if not np.all(np.isfinite(p)):
                raise ValueError(f"modality {m} contains non-finite values")
        return self

    def __getitem__(self, idx) -> "MultimodalLatent":
        """Index into the batch dims, keeping (N, d_m) per modality."""
        return MultimodalLatent(tuple(p[idx] for p in self.parts))

    @staticmethod
    def zeros(shape: LatentShape, dtype=np.float64) -> "MultimodalLatent":
        return MultimodalLatent(
            tuple(np.zeros((*shape.batch, shape.num_segments, d), dtype=dtype) for d in shape.widths)
        )

    @staticmethod
    def standard_normal(
        shape: LatentShape, rng: np.random.Generator, dtype=np.float64
    ) -> "MultimodalLatent":
        """Unit-normal draw, one modality at a time in index order."""
        return MultimodalLatent(
            tuple(
                rng.standard_normal((*shape.batch, shape.num_segments, d)).astype(dtype, copy=False)
                for d in shape.widths
            )
        )


def _check_congruent(z0: MultimodalLatent, eps: MultimodalLatent, tvec: np.ndarray):
    if z0.widths != eps.widths or z0.parts[0].shape != eps.parts[0].shape:
        raise ValueError(f"latent and noise shapes differ: {z0.shape} vs {eps.shape}")
    M, N = tvec.shape[-2], tvec.shape[-1]
    if M != z0.num_modalities or N != z0.num_segments:
        raise ValueError(
            f"timestep vector is {M}x{N} but latent has {z0.num_modalities} modalities "
            f"and {z0.num_segments} segments"
        )


def q_sample(
    z0: MultimodalLatent,
    tvec: TimestepVector | np.ndarray,
    eps: MultimodalLatent,
    sched: NoiseSchedule,
) -> MultimodalLatent:
    """Noise each cell (m, n) to its own timestep.

    Cell (m, n) becomes ``sqrt(abar_t) * z0 + sqrt(1 - abar_t) * eps`` with
    t = tvec[m, n]; cells with t = 0 are returned bit-identical to ``z0``.
    ``tvec`` may carry leading batch dims matching the latent's.

    Args:
        z0: Clean latent.
        tvec: Timestep vector, entries in [0, T].
        eps: Unit-normal noise, shape-congruent with ``z0``.
        sched: Noise schedule supplying the cumulative signal levels.

    Returns:
        The noised latent, same shape and dtype as ``z0``.
    """
    t = tvec.entries if isinstance(tvec, TimestepVector) else np.asarray(tvec)
    _check_congruent(z0, eps, t)
    if np.any(t < 0) or np.any(t > sched.T):
        raise ValueError(f"timesteps must lie in [0, {sched.T}]")
    out_parts = []
    for m, (z_m, e_m) in enumerate(zip(z0.parts, eps.parts)):
        t_m = t[..., m, :]
        ab = sched.alpha_bars[t_m]
        signal = np.sqrt(ab)[..., None]
        noise = np.sqrt(1.0 - ab)[..., None]
        out = signal * z_m + noise * e_m
        clean = np.broadcast_to(t_m[..., None] == 0, out.shape)
        if clean.any():
            out[clean] = np.broadcast_to(z_m, out.shape)[clean]
        out_parts.append(out.astype(z_m.dtype, copy=False))
    return MultimodalLatent(tuple(out_parts))


def q_sample_scalar(
    z0: MultimodalLatent, t: int, eps: MultimodalLatent, sched: NoiseSchedule
) -> MultimodalLatent:
    """Noise the whole latent to a single timestep t (constant vector case)."""
    tvec = constant_timestep_vector(t, z0.num_modalities, z0.num_segments, T=sched.T)
    return q_sample(z0, tvec, eps, sched)
