"""Command-line driver: ``cadet run|sweep|prepare --config PATH``.

Exit codes: 0 success, 2 configuration/validation error, 3 runtime error.
All data products go to the configured output directory; stdout carries only
progress lines and a final summary line per command.
"""

from __future__ import annotations

import argparse
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import config as config_mod
from .config import RunConfig, with_overrides
from .data import (
    BatchSchedule,
    SplitSpec,
    apply_normalization,
    build_stream,
    fit_normalization,
    load_feature_csv,
    load_idx,
    stratified_split,
    write_feature_csv,
)
from .errors import ConfigError
from .net import encode, train_autoencoder
from .pipeline import InspectionOracle, Sample, run_batches, select_aux_ood
from .reporting import (
    record_and_emit,
    run_sweep,
    sweep_point_configs,
    write_sweep_csv,
)


def _check_paths(cfg: RunConfig, *, need_idx: bool) -> None:
    if cfg.data.feature_csv and not need_idx:
        if not Path(cfg.data.feature_csv).exists():
            raise ConfigError(f"data.feature_csv: file not found: {cfg.data.feature_csv}")
        return
    if not (cfg.data.idx_images and cfg.data.idx_labels):
        raise ConfigError("data: IDX image and label paths are required here")
    for field, path in (
        ("data.idx_images", cfg.data.idx_images),
        ("data.idx_labels", cfg.data.idx_labels),
    ):
        if not Path(path).exists():
            raise ConfigError(f"{field}: file not found: {path}")


def _encode_idx_dataset(cfg: RunConfig):
    """Load IDX data, train the autoencoder on batch-0 classes' training
    split, and return (feature samples in original order, encoder params)."""
    raw = load_idx(cfg.data.idx_images, cfg.data.idx_labels)
    raw_samples = [
        Sample(raw.images[i], int(raw.labels[i]), batch_id=-1, sample_id=i)
        for i in range(raw.images.shape[0])
    ]
    train, _ = stratified_split(
        raw_samples, SplitSpec(cfg.split.train_fraction, cfg.split.seed)
    )
    batch0_classes = set(cfg.schedule.batches[0])
    ae_rows = [s.features for s in train if s.label in batch0_classes]
    if not ae_rows:
        raise ConfigError("schedule.batches[0]: no training samples for these classes")
    enc = train_autoencoder(
        np.stack(ae_rows),
        cfg.autoencoder.latent_dim,
        cfg.autoencoder.epochs,
        cfg.autoencoder.lr,
        cfg.autoencoder.seed,
        hidden=cfg.autoencoder.hidden_widths,
        activation=cfg.autoencoder.activation,
        batch_size=cfg.autoencoder.batch_size,
        center=True,
    )
    features = encode(enc, raw.images)
    samples = [
        Sample(features[i], int(raw.labels[i]), batch_id=-1, sample_id=i)
        for i in range(features.shape[0])
    ]
    return samples, enc


def _load_samples(cfg: RunConfig) -> list[Sample]:
    if cfg.data.feature_csv:
        return load_feature_csv(cfg.data.feature_csv)
    samples, _ = _encode_idx_dataset(cfg)
    return samples


def run_from_config(cfg: RunConfig, progress=None):
    """Everything behind ``cadet run`` except file emission.

    Returns (final state, metrics log, normalization stats).
    """
    samples = _load_samples(cfg)
    schedule = BatchSchedule(cfg.schedule.batches, cfg.schedule.aux_classes)
    train, test = stratified_split(
        samples, SplitSpec(cfg.split.train_fraction, cfg.split.seed)
    )
    # Normalization statistics come from batch-0 classes' training data only,
    # frozen for all later batches so the score scale stays comparable.
    batch0_classes = set(schedule.batches[0])
    base_train = [s for s in train if s.label in batch0_classes]
    stats = fit_normalization(base_train)
    train = apply_normalization(train, stats)
    test = apply_normalization(test, stats)

    aux_samples = None
    if cfg.ood_source.kind == "leave_out":
        train, aux_samples = select_aux_ood(train, schedule.aux_classes)
    else:
        train = [s for s in train if s.label not in set(schedule.aux_classes)]
    scheduled = set().union(*(set(b) for b in schedule.batches))
    test = [s for s in test if s.label in scheduled]

    stream, truth = build_stream(train, schedule)
    oracle = InspectionOracle(truth)
    state, log = run_batches(
        cfg, stream, oracle, test, aux_samples=aux_samples, progress=progress
    )
    return state, log, stats


def _progress_printer():
    def cb(batch_id, epoch, total):
        decile = max(1, total // 10)
        if epoch % decile == 0 or epoch == total:
            print(f"[batch {batch_id}] epoch {epoch}/{total}", flush=True)

    return cb


def cmd_run(config_path, seed=None, out=None) -> int:
    cfg = with_overrides(config_mod.from_file(config_path), seed, out)
    _check_paths(cfg, need_idx=not cfg.data.feature_csv)
    state, log, stats = run_from_config(cfg, progress=_progress_printer())
    paths = record_and_emit(
        log,
        cfg.output_dir,
        extra_summary={
            "normalization": {
                "mean": [float(v) for v in stats.mean],
                "std": [float(v) for v in stats.std],
            }
        },
    )
    print(f"run complete: {len(paths)} files in {cfg.output_dir}", flush=True)
    return 0


def _eval_config_payload(payload: dict):
    """Worker for parallel sweeps; must stay importable at module level."""
    try:
        cfg = config_mod.from_dict(payload)
        _, log, _ = run_from_config(cfg)
        return ("ok", log.final_group_accuracies())
    except Exception:
        return ("failed", None)


class _AccLog:
    """Adapter handing precomputed accuracies to run_sweep."""

    def __init__(self, accs):
        self._accs = accs

    def final_group_accuracies(self):
        return dict(self._accs)


def parse_axis(spec: str) -> tuple[str, list[float]]:
    if "=" not in spec:
        raise ConfigError(f"--axis expects NAME=V1,V2,..., got {spec!r}")
    name, _, values = spec.partition("=")
    name = name.strip()
    items = [v for v in values.split(",") if v.strip() != ""]
    if not items:
        raise ConfigError(f"--axis {name}: empty value list")
    try:
        return name, [float(v) for v in items]
    except ValueError:
        raise ConfigError(f"--axis {name}: values must be numeric") from None


def cmd_sweep(config_path, axis_specs, seed=None, out=None, jobs=1) -> int:
    cfg = with_overrides(config_mod.from_file(config_path), seed, out)
    _check_paths(cfg, need_idx=not cfg.data.feature_csv)
    if not axis_specs:
        raise ConfigError("sweep needs at least one --axis NAME=V1,V2,...")
    grid = [parse_axis(spec) for spec in axis_specs]

    if jobs > 1:
        point_cfgs = sweep_point_configs(cfg, grid)
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(
                pool.map(_eval_config_payload, [c.to_dict() for c in point_cfgs])
            )
        lookup = {c.fingerprint(): o for c, o in zip(point_cfgs, outcomes)}

        def runner(point_cfg):
            status, accs = lookup[point_cfg.fingerprint()]
            if status != "ok":
                raise RuntimeError("sweep point failed")
            return _AccLog(accs)

    else:

        def runner(point_cfg):
            _, log, _ = run_from_config(point_cfg)
            return log

    result = run_sweep(cfg, grid, runner)
    out_dir = Path(cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = write_sweep_csv(result, out_dir / "sweep.csv")
    if result.best is not None:
        best_desc = " ".join(f"{k}={v:g}" for k, v in result.best.values.items())
        print(f"best point: {best_desc} average={result.best.average:.6g}")
    else:
        print("best point: none (all points failed)")
    print(f"sweep complete: {path}", flush=True)
    return 0


def cmd_prepare(config_path, seed=None, out=None) -> int:
    cfg = with_overrides(config_mod.from_file(config_path), seed, out)
    _check_paths(cfg, need_idx=True)
    samples, enc = _encode_idx_dataset(cfg)
    out_dir = Path(cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / "features.csv"
    write_feature_csv(csv_path, samples)
    np.savez(
        out_dir / "encoder.npz",
        values=enc.values,
        layer_widths=np.array(enc.spec.layer_widths),
        activation=np.array(enc.spec.activation),
        latent_dim=np.array(enc.latent_dim),
        bottleneck_layer=np.array(enc.bottleneck_layer),
        init_seed=np.array(enc.spec.init_seed),
        input_mean=(
            enc.input_mean
            if enc.input_mean is not None
            else np.zeros(enc.spec.input_width)
        ),
    )
    print(
        f"prepare complete: {csv_path} "
        f"(reconstruction mse {enc.initial_mse:.6g} -> {enc.final_mse:.6g})",
        flush=True,
    )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cadet",
        description="Continual anomaly detection over class-incremental batches",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("run", "sweep", "prepare"):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, metavar="PATH")
        p.add_argument("--seed", type=int, default=None, metavar="U64")
        p.add_argument("--out", default=None, metavar="DIR")
        if name == "sweep":
            p.add_argument(
                "--axis",
                action="append",
                default=[],
                metavar="NAME=V,...",
                help="sweep axis (repeatable); names: log10_lambda_ood, "
                "log10_lambda_prior, m",
            )
            p.add_argument("--jobs", type=int, default=1, metavar="N")
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code not in (0, None) else 0
    try:
        if args.command == "run":
            return cmd_run(args.config, args.seed, args.out)
        if args.command == "sweep":
            return cmd_sweep(args.config, args.axis, args.seed, args.out, args.jobs)
        return cmd_prepare(args.config, args.seed, args.out)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failures: IO, format, divergence, ...
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3


def console_main() -> None:
    raise SystemExit(main())
