"""Synthetic coupled two-modality sequences with a known cross-modal law.

Modality 1 carries smooth per-example harmonic signals mixed through a fixed
random square projection; modality 2 is a fixed linear map of modality 1
delayed by a circular lag, plus observation noise. The coupling is therefore
exactly recoverable (e.g. by least squares), which gives every conditional
generation task a measurable ground truth.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import fileio
from .forward import MultimodalLatent
from .sampling import fileio_pack, fileio_unpack

__all__ = ["CoupledConfig", "Dataset", "gen_coupled", "resolve_maps", "save_dataset", "load_dataset"]

DATASET_KIND = "coupled-dataset"


@dataclass(frozen=True)
class CoupledConfig:
    """Generator settings. ``embed`` and ``coupling`` are drawn from the
    generator's random stream when left as None and recorded back into the
    dataset's config so a saved dataset is fully self-describing."""

    num_segments: int = 8
    d1: int = 4
    d2: int = 6
    freq_range: tuple[float, float] = (0.5, 1.25)
    amp_range: tuple[float, float] = (0.8, 1.2)
    lag: int = 1
    sigma_obs: float = 0.05
    embed: np.ndarray | None = field(default=None, repr=False)
    coupling: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if not (0 <= self.lag < self.num_segments):
            raise ValueError("lag must lie in [0, num_segments)")
        if self.sigma_obs < 0:
            raise ValueError("sigma_obs must be >= 0")
        if self.d1 < 1 or self.d2 < 1 or self.num_segments < 1:
            raise ValueError("dimensions must be positive")
        if self.embed is not None:
            object.__setattr__(self, "embed", np.asarray(self.embed, dtype=np.float64))
            if self.embed.shape != (self.d1, self.d1):
                raise ValueError(f"embed must be ({self.d1}, {self.d1})")
        if self.coupling is not None:
            object.__setattr__(self, "coupling", np.asarray(self.coupling, dtype=np.float64))
            if self.coupling.shape != (self.d2, self.d1):
                raise ValueError(f"coupling must be ({self.d2}, {self.d1})")

    def to_dict(self) -> dict:
        return {
            "num_segments": self.num_segments,
            "d1": self.d1,
            "d2": self.d2,
            "freq_range": list(self.freq_range),
            "amp_range": list(self.amp_range),
            "lag": self.lag,
            "sigma_obs": self.sigma_obs,
            "embed": None if self.embed is None else self.embed.tolist(),
            "coupling": None if self.coupling is None else self.coupling.tolist(),
        }

    @staticmethod
    def from_dict(d: dict) -> "CoupledConfig":
        return CoupledConfig(
            num_segments=d["num_segments"],
            d1=d["d1"],
            d2=d["d2"],
            freq_range=tuple(d["freq_range"]),
            amp_range=tuple(d["amp_range"]),
            lag=d["lag"],
            sigma_obs=d["sigma_obs"],
            embed=None if d.get("embed") is None else np.array(d["embed"]),
            coupling=None if d.get("coupling") is None else np.array(d["coupling"]),
        )


@dataclass(frozen=True)
class Dataset:
    """Normalized example collection plus everything needed to rebuild it."""

    latents: MultimodalLatent
    stats: tuple[tuple[float, float], ...]
    config: CoupledConfig
    seed: int

    @property
    def n_examples(self) -> int:
        return self.latents.batch_shape[0]

    @property
    def examples(self) -> list[MultimodalLatent]:
        return [self.latents[i] for i in range(self.n_examples)]

    def denormalized(self) -> MultimodalLatent:
        """Examples mapped back to the raw generator scale."""
        parts = []
        for p, (mean, std) in zip(self.latents.parts, self.stats):
            parts.append(p.astype(np.float64) * std + mean)
        return MultimodalLatent(tuple(parts))


def resolve_maps(config: CoupledConfig, rng: np.random.Generator) -> CoupledConfig:
    embed, coupling = config.embed, config.coupling
    if embed is None:
        # Orthogonal mixing keeps modality 1 well conditioned across channels.
        raw = rng.standard_normal((config.d1, config.d1))
        q, r = np.linalg.qr(raw)
        embed = q * np.sign(np.diag(r))
    if coupling is None:
        # Scale keeps the raw modality-2 variance comfortably above 1, so the
        # normalized observation-noise floor sits below sigma_obs^2.
        coupling = rng.standard_normal((config.d2, config.d1)) * (1.5 / np.sqrt(config.d1))
    return replace(config, embed=embed, coupling=coupling)


def gen_coupled(config: CoupledConfig, n_examples: int, rng: np.random.Generator) -> Dataset:
    """Generate a normalized coupled dataset.

    Each of the d1 latent channels is a sum of two sinusoids with per-example
    random frequency, phase, and amplitude, mixed by the fixed embedding.
    Modality 2 applies the fixed coupling map to modality 1 delayed by
    ``lag`` segments (circularly) and adds N(0, sigma_obs^2) noise. Both
    modalities are then normalized to zero mean and unit variance; the stats
    are recorded on the dataset.
    """
    if n_examples < 1:
        raise ValueError("n_examples must be >= 1")
    config = resolve_maps(config, rng)
    N, d1 = config.num_segments, config.d1
    lo_f, hi_f = config.freq_range
    lo_a, hi_a = config.amp_range

    n = np.arange(N)
    freqs = rng.uniform(lo_f, hi_f, size=(n_examples, d1, 2))
    phases = rng.uniform(0.0, 2.0 * np.pi, size=(n_examples, d1, 2))
    amps = rng.uniform(lo_a, hi_a, size=(n_examples, d1, 2))
    # (n_examples, d1, 2, N) sinusoid table, summed over the pair axis.
    args = 2.0 * np.pi * freqs[..., None] * n / N + phases[..., None]
    bank = (amps[..., None] * np.sin(args)).sum(axis=2)
    x = np.einsum("ekn,jk->enj", bank, config.embed)

    x_lag = np.roll(x, config.lag, axis=1)
    y = x_lag @ config.coupling.T
    if config.sigma_obs > 0:
        y = y + config.sigma_obs * rng.standard_normal(y.shape)

    stats = []
    parts = []
    for arr in (x, y):
        mean = float(arr.mean())
        std = float(arr.std())
        stats.append((mean, std))
        parts.append(((arr - mean) / std).astype(np.float32))
    return Dataset(
        latents=MultimodalLatent(tuple(parts)),
        stats=tuple(stats),
        config=config,
        seed=-1,
    )


def gen_coupled_seeded(config: CoupledConfig, n_examples: int, seed: int) -> Dataset:
    """Like :func:`gen_coupled` but records the integer seed it was built from."""
    rng = np.random.Generator(np.random.PCG64(seed))
    ds = gen_coupled(config, n_examples, rng)
    return replace(ds, seed=int(seed))


def save_dataset(ds: Dataset, path) -> None:
    """Write the dataset file (header + float32 payload + checksum)."""
    header = {
        "n_examples": ds.n_examples,
        "num_segments": ds.latents.num_segments,
        "widths": list(ds.latents.widths),
        "stats": [list(s) for s in ds.stats],
        "config": ds.config.to_dict(),
        "seed": ds.seed,
    }
    fileio.write_container(path, DATASET_KIND, header, fileio_pack(ds.latents))


def load_dataset(path) -> Dataset:
    """Read a dataset file, verifying checksum and header/payload agreement."""
    header, payload = fileio.read_container(path, DATASET_KIND)
    latents = fileio_unpack(
        payload, header["n_examples"], header["num_segments"], header["widths"]
    )
    return Dataset(
        latents=latents,
        stats=tuple((float(m), float(s)) for m, s in header["stats"]),
        config=CoupledConfig.from_dict(header["config"]),
        seed=int(header["seed"]),
    )
