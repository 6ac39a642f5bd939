"""Command-line front end: gen-data, train, sample, eval, inspect-schedule.

A single versioned JSON run configuration drives every command; the master
seed deterministically derives the data, init, training, and sampling
streams, so a full pipeline run is reproducible end to end. Every command
writes its resolved configuration next to its outputs.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import data as data_mod
from .denoiser import DenoiserConfig, load_checkpoint
from .evaluate import conditional_mse, frechet_gaussian, region_features, validate_report
from .fileio import ContainerError, canonical_json
from .forward import LatentShape
from .sampling import (
    ConditionSpec,
    SamplerConfig,
    build_task_mask,
    load_samples,
    run_sampler,
    save_samples,
    TASKS,
)
from .schedule import NoiseSchedule, StrategyKind, make_linear_schedule
from .seeding import child_rng, child_seed
from .training import TrainConfig, make_train_state, resume_train_state, train_loop

CONFIG_VERSION = 1


class ConfigError(Exception):
    """Invalid or incomplete run configuration."""


class UsageError(Exception):
    """Bad command-line invocation."""


def _require(section: dict, key: str, where: str):
    if key not in section:
        raise ConfigError(f"missing field {where}.{key}")
    return section[key]


def _section(doc: dict, name: str) -> dict:
    value = _require(doc, name, "config")
    if not isinstance(value, dict):
        raise ConfigError(f"config.{name} must be an object")
    return value


@dataclass(frozen=True)
class RunConfig:
    """Typed view of the run configuration document."""

    version: int
    seed: int
    schedule_T: int
    beta_start: float
    beta_end: float
    data: data_mod.CoupledConfig
    n_train: int
    n_eval: int
    denoiser: DenoiserConfig
    train: TrainConfig
    sampler: SamplerConfig
    n_c: int
    k: int
    n_sample: int
    log_every: int
    checkpoint_every: int
    out_dir: Path
    train_dataset: Path
    eval_dataset: Path

    @staticmethod
    def from_dict(doc: dict) -> "RunConfig":
        version = _require(doc, "version", "config")
        if version != CONFIG_VERSION:
            raise ConfigError(f"config version {version} not supported (expected {CONFIG_VERSION})")
        seed = int(_require(doc, "seed", "config"))

        sch = _section(doc, "schedule")
        T = int(_require(sch, "T", "schedule"))
        beta_start = float(_require(sch, "beta_start", "schedule"))
        beta_end = float(_require(sch, "beta_end", "schedule"))

        dat = _section(doc, "data")
        try:
            coupled = data_mod.CoupledConfig(
                num_segments=int(_require(dat, "num_segments", "data")),
                d1=int(_require(dat, "d1", "data")),
                d2=int(_require(dat, "d2", "data")),
                freq_range=tuple(dat.get("freq_range", (0.5, 2.0))),
                amp_range=tuple(dat.get("amp_range", (0.5, 1.5))),
                lag=int(_require(dat, "lag", "data")),
                sigma_obs=float(_require(dat, "sigma_obs", "data")),
            )
        except ValueError as e:
            raise ConfigError(f"invalid data section: {e}") from e
        n_train = int(_require(dat, "n_train", "data"))
        n_eval = int(_require(dat, "n_eval", "data"))

        den = _section(doc, "denoiser")
        try:
            denoiser = DenoiserConfig(
                widths=(coupled.d1, coupled.d2),
                num_segments=coupled.num_segments,
                model_dim=int(_require(den, "model_dim", "denoiser")),
                layers=int(_require(den, "layers", "denoiser")),
                heads=int(_require(den, "heads", "denoiser")),
                T=T,
                timestep_embed_dim=int(den.get("timestep_embed_dim", 64)),
                self_conditioning=bool(den.get("self_conditioning", True)),
                dtype=den.get("dtype", "float64"),
            )
        except ValueError as e:
            raise ConfigError(f"invalid denoiser section: {e}") from e

        trn = _section(doc, "train")
        try:
            strategy = StrategyKind.from_string(str(_require(trn, "strategy", "train")))
            train = TrainConfig(
                strategy=strategy,
                batch_size=int(_require(trn, "batch_size", "train")),
                learning_rate=float(_require(trn, "learning_rate", "train")),
                warmup_steps=int(_require(trn, "warmup_steps", "train")),
                total_steps=int(_require(trn, "total_steps", "train")),
                ema_decay=float(_require(trn, "ema_decay", "train")),
                self_cond_rate=float(_require(trn, "self_cond_rate", "train")),
                weight_decay=float(trn.get("weight_decay", 0.01)),
                grad_clip=float(trn.get("grad_clip", 1.0)),
            )
        except ValueError as e:
            raise ConfigError(f"invalid train section: {e}") from e

        smp = _section(doc, "sampler")
        try:
            sampler = SamplerConfig(
                kind=str(_require(smp, "kind", "sampler")),
                steps=int(_require(smp, "steps", "sampler")),
                guidance_scale=float(smp.get("guidance_scale", 0.0)),
                sigma_rule=smp.get("sigma_rule", "beta"),
                self_cond=bool(smp.get("self_cond", True)),
            )
        except ValueError as e:
            raise ConfigError(f"invalid sampler section: {e}") from e

        tasks = _section(doc, "tasks")
        paths = _section(doc, "paths")
        out_dir = Path(_require(paths, "out_dir", "paths"))
        return RunConfig(
            version=version,
            seed=seed,
            schedule_T=T,
            beta_start=beta_start,
            beta_end=beta_end,
            data=coupled,
            n_train=n_train,
            n_eval=n_eval,
            denoiser=denoiser,
            train=train,
            sampler=sampler,
            n_c=int(_require(tasks, "n_c", "tasks")),
            k=int(_require(tasks, "k", "tasks")),
            n_sample=int(doc.get("sample", {}).get("n", 64)),
            log_every=int(trn.get("log_every", 50)),
            checkpoint_every=int(trn.get("checkpoint_every", 0)),
            out_dir=out_dir,
            train_dataset=Path(paths.get("train_dataset", out_dir / "train.nmx")),
            eval_dataset=Path(paths.get("eval_dataset", out_dir / "eval.nmx")),
        )

    @staticmethod
    def from_file(path) -> "RunConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except FileNotFoundError as e:
            raise ConfigError(f"config file not found: {path}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file is not valid JSON: {e}") from e
        if not isinstance(doc, dict):
            raise ConfigError("config root must be a JSON object")
        return RunConfig.from_dict(doc)

    def schedule(self) -> NoiseSchedule:
        return make_linear_schedule(self.schedule_T, self.beta_start, self.beta_end)

    def resolved_document(self) -> dict:
        return {
            "version": self.version,
            "seed": self.seed,
            "schedule": {
                "T": self.schedule_T,
                "beta_start": self.beta_start,
                "beta_end": self.beta_end,
            },
            "data": {
                **self.data.to_dict(),
                "n_train": self.n_train,
                "n_eval": self.n_eval,
            },
            "denoiser": self.denoiser.to_dict(),
            "train": {
                "strategy": self.train.strategy.value,
                "batch_size": self.train.batch_size,
                "learning_rate": self.train.learning_rate,
                "warmup_steps": self.train.warmup_steps,
                "total_steps": self.train.total_steps,
                "ema_decay": self.train.ema_decay,
                "self_cond_rate": self.train.self_cond_rate,
                "weight_decay": self.train.weight_decay,
                "grad_clip": self.train.grad_clip,
                "log_every": self.log_every,
                "checkpoint_every": self.checkpoint_every,
            },
            "sampler": self.sampler.to_dict(),
            "tasks": {"n_c": self.n_c, "k": self.k},
            "sample": {"n": self.n_sample},
            "paths": {
                "out_dir": str(self.out_dir),
                "train_dataset": str(self.train_dataset),
                "eval_dataset": str(self.eval_dataset),
            },
        }

    def write_resolved(self, directory: Path) -> None:
        directory.mkdir(parents=True, exist_ok=True)
        (directory / "config.resolved.json").write_text(
            canonical_json(self.resolved_document()) + "\n"
        )


def cmd_gen_data(config_path, out_path, split: str = "train") -> int:
    """Generate one dataset split and write it with its checksum."""
    cfg = RunConfig.from_file(config_path)
    if split not in ("train", "eval"):
        raise UsageError(f"split must be 'train' or 'eval', got {split!r}")
    maps_rng = child_rng(cfg.seed, "data", "maps")
    resolved = data_mod.resolve_maps(cfg.data, maps_rng)
    n = cfg.n_train if split == "train" else cfg.n_eval
    seed = child_seed(cfg.seed, "data", split)
    ds = data_mod.gen_coupled_seeded(resolved, n, seed)
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    data_mod.save_dataset(ds, out_path)
    cfg.write_resolved(out_path.parent)
    for m, (mean, std) in enumerate(ds.stats):
        print(f"modality {m + 1}: raw mean {mean:+.6f}, raw std {std:.6f}")
    print(f"wrote {n} examples to {out_path}")
    return 0


def cmd_train(config_path, *, strategy: str | None = None, seed: int | None = None,
              resume: bool = False) -> int:
    """Train per the config; writes checkpoint, metrics log, resolved config."""
    cfg = RunConfig.from_file(config_path)
    if seed is not None:
        cfg = replace(cfg, seed=seed)
    if strategy is not None:
        cfg = replace(cfg, train=replace(cfg.train, strategy=StrategyKind.from_string(strategy)))
    if not cfg.train_dataset.exists():
        raise FileNotFoundError(f"training dataset not found: {cfg.train_dataset}")
    ds = data_mod.load_dataset(cfg.train_dataset)
    sched = cfg.schedule()
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    cfg.write_resolved(cfg.out_dir)
    ckpt_path = cfg.out_dir / "checkpoint.nmx"
    if resume and ckpt_path.exists():
        state = resume_train_state(ckpt_path, cfg.train, sched)
        print(f"resumed from {ckpt_path} at step {state.step}")
    else:
        state = make_train_state(cfg.denoiser, cfg.train, sched, child_rng(cfg.seed, "train"))
    infos = train_loop(
        state,
        ds.latents,
        cfg.train,
        metrics_path=cfg.out_dir / "metrics.jsonl",
        checkpoint_path=ckpt_path,
        checkpoint_every=cfg.checkpoint_every,
        log_every=cfg.log_every,
    )
    if infos:
        print(
            f"trained {len(infos)} steps (strategy {cfg.train.strategy.value}); "
            f"final loss {infos[-1].loss:.6f}"
        )
    print(f"checkpoint: {ckpt_path}")
    return 0


def _load_model(checkpoint_path, use_ema: bool):
    from .denoiser import NetPredictor

    ckpt = load_checkpoint(checkpoint_path)
    module = ckpt.build_module(use_ema=use_ema and ckpt.ema is not None)
    return NetPredictor(module), ckpt


def cmd_sample(config_path, checkpoint, task: str, out_path, *,
               guidance: float | None = None, sampler: str | None = None,
               steps: int | None = None, baseline: str | None = None,
               seed: int | None = None, n: int | None = None,
               raw_weights: bool = False) -> int:
    """Generate one task's samples from a checkpoint and save them."""
    cfg = RunConfig.from_file(config_path)
    if task not in TASKS:
        raise UsageError(f"unknown task {task!r}; choose from {TASKS}")
    master = cfg.seed if seed is None else seed
    sampler_cfg = cfg.sampler
    if sampler is not None:
        sampler_cfg = replace(sampler_cfg, kind=sampler)
    if steps is not None:
        sampler_cfg = replace(sampler_cfg, steps=steps)
    if guidance is not None:
        sampler_cfg = replace(sampler_cfg, guidance_scale=guidance)
    method = "masked"
    if baseline is not None:
        if baseline not in ("replacement", "recon-guided"):
            raise UsageError("baseline must be 'replacement' or 'recon-guided'")
        method = baseline

    model, ckpt = _load_model(checkpoint, use_ema=not raw_weights)
    if ckpt.config.widths != (cfg.data.d1, cfg.data.d2) or (
        ckpt.config.num_segments != cfg.data.num_segments
    ):
        raise ContainerError(
            f"checkpoint latent shape {ckpt.config.widths}x{ckpt.config.num_segments} does not "
            f"match config ({cfg.data.d1}, {cfg.data.d2})x{cfg.data.num_segments}"
        )
    sched = cfg.schedule()
    n_out = cfg.n_sample if n is None else n
    mask = build_task_mask(task, len(ckpt.config.widths), ckpt.config.num_segments, cfg.n_c, cfg.k)
    rng = child_rng(master, "sample", task, method)
    if mask.any():
        if not cfg.eval_dataset.exists():
            raise FileNotFoundError(f"eval dataset not found: {cfg.eval_dataset}")
        eval_ds = data_mod.load_dataset(cfg.eval_dataset)
        n_out = min(n_out, eval_ds.n_examples)
        values = eval_ds.latents[np.arange(n_out)].astype(np.float64)
        cond = ConditionSpec(mask=mask, values=values)
        shape = None
    else:
        cond = ConditionSpec.unconditional(len(ckpt.config.widths), ckpt.config.num_segments)
        shape = LatentShape(ckpt.config.widths, ckpt.config.num_segments, (n_out,))
    latent = run_sampler(model, sched, cond, shape, rng, sampler_cfg, method)
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    save_samples(
        out_path,
        latent,
        mask=mask,
        seed=master,
        sampler=sampler_cfg,
        task=task,
        extra={
            "method": method,
            "checkpoint": str(checkpoint),
            "ema_weights": not raw_weights,
            "n_c": cfg.n_c,
            "k": cfg.k,
        },
    )
    cfg.write_resolved(out_path.parent)
    print(f"wrote {n_out} {task} samples to {out_path} (method {method})")
    return 0


def cmd_eval(config_path, samples_dir, dataset_path, out_path=None) -> int:
    """Score every sample file in a directory against a dataset."""
    cfg = RunConfig.from_file(config_path)
    samples_dir = Path(samples_dir)
    files = sorted(samples_dir.glob("*.nmx")) if samples_dir.is_dir() else []
    if not files:
        raise FileNotFoundError(f"no sample files found in {samples_dir}")
    ds = data_mod.load_dataset(dataset_path)
    report = {
        "version": 1,
        "seed": cfg.seed,
        "sampler": cfg.sampler.to_dict(),
        "method": "files",
        "tasks": {},
    }
    for path in files:
        latent, header = load_samples(path)
        task = header.get("task") or path.stem
        mask = np.asarray(header["mask"], dtype=bool)
        n = latent.batch_shape[0]
        truth = ds.latents[np.arange(min(n, ds.n_examples))].astype(np.float64)
        gen = latent[np.arange(truth.batch_shape[0])]
        entry = {
            "frechet": frechet_gaussian(
                region_features(truth, mask), region_features(gen, mask)
            ),
            "mse": conditional_mse(gen, truth, mask) if mask.any() else None,
            "n": truth.batch_shape[0],
            "seed": int(header["seed"]),
            "sampler": header["sampler"]["kind"],
        }
        report["tasks"][task] = entry
    validate_report(report)
    text = canonical_json(report) + "\n"
    if out_path is not None:
        Path(out_path).parent.mkdir(parents=True, exist_ok=True)
        Path(out_path).write_text(text)
    sys.stdout.write(text)
    return 0


def cmd_inspect_schedule(config_path, limit: int = 8) -> int:
    """Print the head and tail of the beta / alpha-bar tables."""
    cfg = RunConfig.from_file(config_path)
    sched = cfg.schedule()
    print(f"T = {sched.T}, beta in [{cfg.beta_start}, {cfg.beta_end}]")
    print(f"{'t':>6}  {'beta_t':>12}  {'alpha_bar_t':>14}")
    rows = list(range(1, min(limit, sched.T) + 1))
    if sched.T > limit:
        rows += list(range(max(sched.T - limit + 1, limit + 1), sched.T + 1))
    last = 0
    for t in rows:
        if t > last + 1:
            print(f"{'...':>6}")
        print(f"{t:>6}  {sched.betas[t - 1]:>12.6e}  {sched.alpha_bars[t]:>14.6e}")
        last = t
    return 0


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="noisemix", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic coupled dataset split")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="train", choices=("train", "eval"))

    p = sub.add_parser("train", help="train a denoiser per the run config")
    p.add_argument("--config", required=True)
    p.add_argument("--strategy", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--resume", action="store_true")

    p = sub.add_parser("sample", help="generate task samples from a checkpoint")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--task", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--guidance", type=float, default=None)
    p.add_argument("--sampler", choices=("ddpm", "ddim"), default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--baseline", choices=("replacement", "recon-guided"), default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--n", type=int, default=None)
    p.add_argument("--raw-weights", action="store_true")

    p = sub.add_parser("eval", help="score sample files against a dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--samples", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", default=None)

    p = sub.add_parser("inspect-schedule", help="print beta / alpha-bar tables")
    p.add_argument("--config", required=True)
    p.add_argument("--limit", type=int, default=8)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command == "gen-data":
            return cmd_gen_data(args.config, args.out, args.split)
        if args.command == "train":
            return cmd_train(
                args.config, strategy=args.strategy, seed=args.seed, resume=args.resume
            )
        if args.command == "sample":
            return cmd_sample(
                args.config,
                args.checkpoint,
                args.task,
                args.out,
                guidance=args.guidance,
                sampler=args.sampler,
                steps=args.steps,
                baseline=args.baseline,
                seed=args.seed,
                n=args.n,
                raw_weights=args.raw_weights,
            )
        if args.command == "eval":
            return cmd_eval(args.config, args.samples, args.dataset, args.out)
        if args.command == "inspect-schedule":
            return cmd_inspect_schedule(args.config, args.limit)
        raise UsageError(f"unknown command {args.command!r}")
    except (UsageError, ConfigError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001 - CLI boundary
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
