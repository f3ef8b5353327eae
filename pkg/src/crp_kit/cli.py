"""Command-line entry point: generate, train, enhance, sweep, pipeline.

Exit codes: 0 success, 2 configuration/usage error, 1 runtime/numeric error.
"""
from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import logging
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import metrics, spectral
from .network import Checkpoint
from .sampler import CorrectorConfig, build_schedule
from .sde import BbedParams, DomainError
from .training import TrainConfig, train_crp, train_dsm, train_predictive

log = logging.getLogger("crp_kit")

SCHEMA_VERSION = 1
DEFAULT_SWEEP = (1, 2, 3, 4, 5, 8, 16, 32)


class ConfigError(ValueError):
    pass


# --------------------------------------------------------------------------
# run configuration

@dataclass
class DataConfig:
    snr_range_db: tuple = (0.0, 20.0)
    num_train: int = 256
    num_valid: int = 10
    num_test: int = 32
    tone_count: int = 3
    noise_ar_coefficient: float = 0.9
    length: int = 1008
    sample_rate: int = 8000
    window_length: int = 64
    hop: int = 16
    alpha: float = 0.5
    beta: float = 0.15


@dataclass
class SdeConfig:
    c: float = 0.51
    k: float = 2.6
    T: float = 0.999
    t_eps: float = 0.03
    t_rsp: float = 0.5


@dataclass
class TrainSection:
    batch_size: int = 16
    crp_batch_size: int | None = None
    lr: float = 1e-3
    crp_lr: float = 1e-3
    lr_schedule: str = "constant"
    crp_lr_schedule: str = "constant"
    weight_decay: float = 1e-6
    ema_decay: float = 0.999
    ema_warmup: bool = True
    widths: tuple = (128, 128, 128)
    time_embed_dim: int = 2
    precondition: bool = True
    skip: bool = True
    data_scale: float | None = None
    dsm_epochs: int = 50
    crp_epochs: int = 10
    predictive_epochs: int = 50
    crp_n_steps: int = 1
    crp_stochastic_rollout: bool = True
    resume_adam: bool = False
    validation_every: int = 50
    n_valid: int = 10


@dataclass
class SamplerSection:
    mode: str = "em"
    convention: str = "printed"
    corrector_steps: int = 1
    corrector_snr: float = 0.5


@dataclass
class SweepSection:
    n_steps: tuple = DEFAULT_SWEEP
    crp_n_steps: tuple = (1, 2, 3, 4, 5)
    seeds: tuple = (0,)
    checkpoints: dict = field(default_factory=dict)


@dataclass
class RunConfig:
    schema_version: int = SCHEMA_VERSION
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    sde: SdeConfig = field(default_factory=SdeConfig)
    train: TrainSection = field(default_factory=TrainSection)
    sampler: SamplerSection = field(default_factory=SamplerSection)
    sweep: SweepSection = field(default_factory=SweepSection)

    @property
    def bbed(self) -> BbedParams:
        return BbedParams(**asdict(self.sde))

    @property
    def stft_meta(self) -> spectral.StftMeta:
        d = self.data
        return spectral.StftMeta(d.window_length, d.hop, d.sample_rate)

    def mixture(self, split: str) -> spectral.MixtureSpec:
        d = self.data
        n = {"train": d.num_train, "valid": d.num_valid, "test": d.num_test}[split]
        return spectral.MixtureSpec(tuple(d.snr_range_db), n, self.seed, d.tone_count,
                                    d.noise_ar_coefficient, d.length, d.sample_rate)

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))


_SECTIONS = {"data": DataConfig, "sde": SdeConfig, "train": TrainSection,
             "sampler": SamplerSection, "sweep": SweepSection}


def _build(cls, raw, where):
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected an object")
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(raw) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    kw = {}
    for k, v in raw.items():
        kw[k] = tuple(v) if isinstance(v, list) and k != "checkpoints" else v
    return cls(**kw)


def config_from_dict(raw: dict) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config: expected a JSON object")
    raw = dict(raw)
    version = raw.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"schema_version: unsupported value {version!r}")
    unknown = sorted(set(raw) - {"schema_version", "seed", *_SECTIONS})
    if unknown:
        raise ConfigError(f"config: unknown key(s) {', '.join(unknown)}")
    cfg = RunConfig(schema_version=version, seed=int(raw.get("seed", 0)))
    for name, cls in _SECTIONS.items():
        if name in raw:
            setattr(cfg, name, _build(cls, raw[name], name))
    validate_config(cfg)
    return cfg


def validate_config(cfg: RunConfig):
    d = cfg.data
    if len(d.snr_range_db) != 2 or d.snr_range_db[0] > d.snr_range_db[1]:
        raise ConfigError(f"data.snr_range_db: invalid range {list(d.snr_range_db)}")
    if d.num_train < 1:
        raise ConfigError("data.num_train: must be positive")
    for name in ("num_valid", "num_test"):
        if getattr(d, name) < 0:
            raise ConfigError(f"data.{name}: must be nonnegative")
    try:
        cfg.bbed
    except DomainError as e:
        raise ConfigError(f"sde: {e}") from e
    if cfg.sampler.mode not in ("em", "pc"):
        raise ConfigError(f"sampler.mode: expected em or pc, got {cfg.sampler.mode!r}")
    if cfg.sampler.convention not in ("printed", "upper"):
        raise ConfigError(f"sampler.convention: unknown value {cfg.sampler.convention!r}")
    if cfg.train.batch_size < 1:
        raise ConfigError("train.batch_size: must be at least 1")
    if any(n < 1 for n in cfg.sweep.n_steps):
        raise ConfigError("sweep.n_steps: entries must be at least 1")


def load_config(path) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        raw = json.loads(Path(path).read_text())
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"config {path} is not valid JSON: {e}") from e
    return config_from_dict(raw)


def write_resolved(cfg: RunConfig, out_dir: Path, name="resolved_config.json"):
    (out_dir / name).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))


# --------------------------------------------------------------------------
# data helpers

def _split_offsets(cfg: RunConfig):
    d = cfg.data
    return {"train": 0, "valid": d.num_train, "test": d.num_train + d.num_valid}


def make_split(cfg: RunConfig, split: str):
    """Pairs for one split; index offsets keep the splits' RNG streams disjoint."""
    mix = cfg.mixture(split)
    mix.validate()
    off = _split_offsets(cfg)[split]
    return [spectral.make_pair(mix, off + i) for i in range(mix.num_pairs)]


def load_split(cfg: RunConfig, split: str, data_dir=None):
    if data_dir is not None:
        path = Path(data_dir) / f"{split}_manifest.json"
        if not path.exists():
            raise ConfigError(f"missing dataset manifest {path}")
        return spectral.read_dataset(path)
    return make_split(cfg, split)


def to_arrays(cfg: RunConfig, pairs):
    d = cfg.data
    return spectral.pairs_to_specs(pairs, cfg.stft_meta, d.alpha, d.beta)


def to_testset(cfg: RunConfig, pairs) -> metrics.TestSet:
    x0, y = to_arrays(cfg, pairs)
    return metrics.TestSet([p.clean for p in pairs], x0, y, [p.index for p in pairs],
                           cfg.stft_meta)


# --------------------------------------------------------------------------
# commands

def cmd_generate(cfg: RunConfig, out: Path) -> Path:
    data_dir = out / "data"
    for split in ("train", "valid", "test"):
        mix = cfg.mixture(split)
        if mix.num_pairs == 0:
            continue
        spectral.write_dataset(make_split(cfg, split), data_dir, mix, split)
    write_resolved(cfg, out)
    return data_dir


def _train_config(cfg: RunConfig, stage: str) -> TrainConfig:
    t = cfg.train
    epochs = {"dsm": t.dsm_epochs, "crp": t.crp_epochs, "predictive": t.predictive_epochs}[stage]
    batch = t.crp_batch_size if stage == "crp" and t.crp_batch_size else t.batch_size
    return TrainConfig(stage=stage, batch_size=batch, epochs=epochs,
                       lr=t.crp_lr if stage == "crp" else t.lr,
                       lr_schedule=t.crp_lr_schedule if stage == "crp" else t.lr_schedule,
                       weight_decay=t.weight_decay, ema_decay=t.ema_decay,
                       ema_warmup=t.ema_warmup, widths=tuple(t.widths),
                       time_embed_dim=t.time_embed_dim, precondition=t.precondition, skip=t.skip,
                       data_scale=t.data_scale,
                       crp_n_steps=t.crp_n_steps,
                       crp_stochastic_rollout=t.crp_stochastic_rollout,
                       resume_adam=t.resume_adam, convention=cfg.sampler.convention,
                       validation_every=t.validation_every, n_valid=t.n_valid,
                       seed=cfg.seed)


def write_log_csv(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["step", "epoch", "stage", "loss", "val_metric", "ema_gap"])
        w.writeheader()
        for r in rows:
            w.writerow({k: _cell(v) for k, v in r.items()})


def _cell(v):
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def cmd_train(cfg: RunConfig, out: Path, stage: str, from_ckpt=None, data_dir=None) -> Path:
    if stage == "crp" and from_ckpt is None:
        raise ConfigError("train --stage crp requires --from <stage-1 checkpoint>")
    stage1 = None
    if from_ckpt is not None:
        if not Path(from_ckpt).exists():
            raise ConfigError(f"checkpoint {from_ckpt} does not exist")
        stage1 = Checkpoint.load(from_ckpt)
    train = to_arrays(cfg, load_split(cfg, "train", data_dir))
    valid_pairs = load_split(cfg, "valid", data_dir) if cfg.data.num_valid else None
    valid = to_arrays(cfg, valid_pairs) if valid_pairs else None
    tc = _train_config(cfg, stage)
    rows = []
    p = cfg.bbed
    if stage == "dsm":
        ck = train_dsm(train, tc, valid, p, rows=rows)
    elif stage == "crp":
        ck = train_crp(train, tc, stage1, valid, p, rows=rows)
    else:
        ck = train_predictive(train, tc, valid, p, rows=rows)
    name = f"{stage}_n{tc.crp_n_steps}" if stage == "crp" else stage
    path = out / f"{name}.ckpt.json"
    ck.save(path)
    write_log_csv(rows, out / f"{name}_log.csv")
    write_resolved(cfg, out, f"{name}_resolved_config.json")
    return path


def cmd_enhance(cfg: RunConfig, out: Path, ckpt_path, noisy_wav, n_steps, mode=None) -> dict:
    ck = Checkpoint.load(ckpt_path)
    sig = spectral.read_wav(noisy_wav)
    d = cfg.data
    y = spectral.analyse(sig, cfg.stft_meta, d.alpha, d.beta).values[None]
    p = cfg.bbed
    mode = mode or cfg.sampler.mode
    sched = build_schedule(p.t_rsp, p.t_eps, n_steps)
    t0 = time.perf_counter()
    corr = CorrectorConfig(cfg.sampler.corrector_steps, cfg.sampler.corrector_snr)
    est, nfe = metrics.enhance_batch(ck, y, sched, cfg.seed, mode, p,
                                     cfg.sampler.convention, corr)
    spec = spectral.CompressedSpec(est[0], d.alpha, d.beta, cfg.stft_meta)
    enhanced = spectral.synthesise(spec, len(sig))
    stem = Path(noisy_wav).stem
    spectral.write_wav(out / f"{stem}_enhanced.wav", enhanced)
    report = {"checkpoint": str(ckpt_path), "stage": ck.stage, "nfe": nfe,
              "n_steps": 1 if ck.stage == "predictive" else n_steps,
              "mode": "predictive" if ck.stage == "predictive" else mode,
              "schedule": None if ck.stage == "predictive" else list(sched.times),
              "schedule_match": (ck.schedule is not None and list(sched.times) == list(ck.schedule)),
              "seed": cfg.seed, "runtime_s": time.perf_counter() - t0}
    (out / f"{stem}_report.json").write_text(json.dumps(report, indent=2, sort_keys=True))
    write_resolved(cfg, out)
    return report


def _threads():
    env = os.environ.get("CRP_KIT_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigError(f"CRP_KIT_THREADS must be an integer, got {env!r}")
    return os.cpu_count() or 1


def _warning_record(method, msg):
    return metrics.EvalRecord(-1, method, 0, float("nan"), float("nan"), 0, False, msg)


def run_sweep(cfg: RunConfig, checkpoints: dict, test: metrics.TestSet):
    """Evaluate each method over the NFE grid. Returns ``(records, warnings)``."""
    p = cfg.bbed
    sw = cfg.sweep
    cells, warnings = [], []
    base = checkpoints.get("baseline_dsm")
    if base:
        for n in sw.n_steps:
            cells.append(("baseline_dsm", base, n))
    else:
        warnings.append(_warning_record("baseline_dsm", "checkpoint missing; method skipped"))
    crp = checkpoints.get("crp")
    crp_list = [crp] if isinstance(crp, (str, Path)) else list(crp or [])
    if crp_list:
        for path in crp_list:
            cells.append(("crp", path, None))
    else:
        warnings.append(_warning_record("crp", "checkpoint missing; method skipped"))
    pred = checkpoints.get("predictive")
    if pred:
        cells.append(("predictive", pred, 1))
    else:
        warnings.append(_warning_record("predictive", "checkpoint missing; method skipped"))

    loaded = {}
    for method, path, _ in cells:
        if path in loaded:
            continue
        loaded[path] = Checkpoint.load(path) if Path(path).exists() else None
        if loaded[path] is None:
            warnings.append(_warning_record(method, f"checkpoint {path} not found; skipped"))
    cells = [c for c in cells if loaded[c[1]] is not None]

    def run_cell(cell):
        method, path, n = cell
        ck = loaded[path]
        if method == "crp":
            n = ck.meta.get("n_steps") or len(ck.schedule) - 1
        sched = None if method == "predictive" else build_schedule(p.t_rsp, p.t_eps, n)
        return metrics.evaluate_method(ck, test, sched, "em", sw.seeds, p,
                                       cfg.sampler.convention, method=method)

    with ThreadPoolExecutor(max_workers=_threads()) as pool:
        results = list(pool.map(run_cell, cells))
    records = [r for rs in results for r in rs]
    return records + warnings, warnings


def write_curves_csv(summary, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "nfe", "n", "compressed_mse_mean", "compressed_mse_std",
                    "si_sdr_db_mean", "si_sdr_db_std"])
        for method in sorted(summary):
            for row in summary[method]:
                w.writerow([method, row["nfe"], row["n"]] +
                           [repr(row[k]) for k in ("compressed_mse_mean", "compressed_mse_std",
                                                   "si_sdr_db_mean", "si_sdr_db_std")])


def cmd_sweep(cfg: RunConfig, out: Path, checkpoints: dict | None = None, data_dir=None) -> dict:
    checkpoints = dict(cfg.sweep.checkpoints if checkpoints is None else checkpoints)
    if cfg.data.num_test < 1:
        raise ConfigError("data.num_test: the sweep needs at least one test pair")
    test = to_testset(cfg, load_split(cfg, "test", data_dir))
    records, warnings = run_sweep(cfg, checkpoints, test)
    for w in warnings:
        log.warning("%s: %s", w.method, w.warning)
    metrics.write_records_csv(records, out / "results.csv")
    summary = metrics.summarise([r for r in records if r.pair_id >= 0])
    metrics.write_summary_json(summary, out / "summary.json")
    write_curves_csv(summary, out / "curves.csv")
    resolved = copy.deepcopy(cfg)
    resolved.sweep.checkpoints = {k: (list(map(str, v)) if isinstance(v, (list, tuple)) else str(v))
                                  for k, v in checkpoints.items()}
    write_resolved(resolved, out)
    return summary


def cmd_pipeline(cfg: RunConfig, out: Path) -> dict:
    """generate -> dsm -> crp for each sweep.crp_n_steps -> predictive -> sweep."""
    data_dir = cmd_generate(cfg, out)
    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(exist_ok=True)
    dsm = cmd_train(cfg, ckpt_dir, "dsm", data_dir=data_dir)
    crps = []
    for n in cfg.sweep.crp_n_steps:
        c = copy.deepcopy(cfg)
        c.train.crp_n_steps = n
        crps.append(str(cmd_train(c, ckpt_dir, "crp", from_ckpt=dsm, data_dir=data_dir)))
    pred = cmd_train(cfg, ckpt_dir, "predictive", data_dir=data_dir)
    return cmd_sweep(cfg, out, {"baseline_dsm": str(dsm), "crp": crps, "predictive": str(pred)},
                     data_dir=data_dir)


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# --------------------------------------------------------------------------
# argument parsing

def _parser():
    ap = argparse.ArgumentParser(prog="crp-kit", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", type=Path, default=None, help="JSON run config")
        sp.add_argument("--out", type=Path, required=True, help="output directory")
        sp.add_argument("--seed", type=int, default=None, help="override the config seed")

    common(sub.add_parser("generate", help="write the synthetic WAV corpus"))
    tr = sub.add_parser("train", help="run one training stage")
    common(tr)
    tr.add_argument("--stage", choices=["dsm", "crp", "predictive"], required=True)
    tr.add_argument("--from", dest="from_ckpt", type=Path, default=None,
                    help="stage-1 checkpoint (required for crp)")
    tr.add_argument("--data", type=Path, default=None, help="dataset directory from `generate`")
    tr.add_argument("--n-steps", type=int, default=None, help="CRP schedule length")
    en = sub.add_parser("enhance", help="enhance one noisy WAV")
    common(en)
    en.add_argument("--checkpoint", type=Path, required=True)
    en.add_argument("--input", type=Path, required=True)
    en.add_argument("--n-steps", type=int, default=5)
    en.add_argument("--mode", choices=["em", "pc"], default=None)
    sw = sub.add_parser("sweep", help="NFE sweep over trained checkpoints")
    common(sw)
    sw.add_argument("--data", type=Path, default=None)
    sw.add_argument("--baseline", type=Path, default=None)
    sw.add_argument("--crp", type=Path, nargs="*", default=None)
    sw.add_argument("--predictive", type=Path, default=None)
    common(sub.add_parser("pipeline", help="full toy reproduction: generate, train, sweep"))
    return ap


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        try:
            args.out.mkdir(parents=True, exist_ok=True)
        except OSError as e:
            print(f"error: cannot create output directory {args.out}: {e}", file=sys.stderr)
            return 1
        if not os.access(args.out, os.W_OK):
            print(f"error: output directory {args.out} is not writable", file=sys.stderr)
            return 1
        if args.command == "generate":
            cmd_generate(cfg, args.out)
        elif args.command == "train":
            if args.n_steps is not None:
                cfg.train.crp_n_steps = args.n_steps
            cmd_train(cfg, args.out, args.stage, args.from_ckpt, args.data)
        elif args.command == "enhance":
            if args.n_steps < 1:
                raise ConfigError("--n-steps must be at least 1")
            cmd_enhance(cfg, args.out, args.checkpoint, args.input, args.n_steps, args.mode)
        elif args.command == "sweep":
            ckpts = dict(cfg.sweep.checkpoints)
            if args.baseline is not None:
                ckpts["baseline_dsm"] = str(args.baseline)
            if args.crp is not None:
                ckpts["crp"] = [str(c) for c in args.crp]
            if args.predictive is not None:
                ckpts["predictive"] = str(args.predictive)
            cmd_sweep(cfg, args.out, ckpts, args.data)
        elif args.command == "pipeline":
            cmd_pipeline(cfg, args.out)
    except (ConfigError, spectral.ConfigError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001 - top-level runtime failure
        log.debug("runtime failure", exc_info=True)
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
