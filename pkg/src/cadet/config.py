"""Run configuration: JSON schema, validation, and fingerprinting.

All science parameters live in one JSON document per run; command-line flags
only pick the subcommand and may override the seed and output directory.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, replace
from pathlib import Path

from . import __version__
from .errors import ConfigError


@dataclass(frozen=True)
class DataCfg:
    feature_csv: str | None = None
    idx_images: str | None = None
    idx_labels: str | None = None


@dataclass(frozen=True)
class ScheduleCfg:
    batches: tuple[tuple[int, ...], ...]
    aux_classes: tuple[int, ...]


@dataclass(frozen=True)
class ModelCfg:
    hidden_widths: tuple[int, ...] = (16,)
    activation: str = "tanh"


@dataclass(frozen=True)
class TrainCfg:
    epochs: int = 40
    lr: float = 0.003
    batch_size: int = 64
    seed: int = 0


@dataclass(frozen=True)
class ContinualCfg:
    lambda_ood: float = 1.0
    lambda_prior: float = 1.0
    eta: float = 80.0
    replay_cap: int = 300
    n_min: int = 0


@dataclass(frozen=True)
class ScoreCfg:
    kind: str = "mahalanobis"
    ridge: float = 1e-6
    temperature_grid: tuple[float, ...] = (1.0, 10.0, 100.0, 1000.0)
    epsilon_grid: tuple[float, ...] = (0.0, 0.0005, 0.001, 0.002, 0.005)


@dataclass(frozen=True)
class OodSourceCfg:
    kind: str = "leave_out"
    epsilon: float = 0.5
    steps: int = 5
    step_size: float = 0.2


@dataclass(frozen=True)
class SplitCfg:
    train_fraction: float = 0.8
    seed: int = 0


@dataclass(frozen=True)
class AutoencoderCfg:
    latent_dim: int = 4
    hidden_widths: tuple[int, ...] = (32,)
    # one name, or one per hidden layer of the full autoencoder
    activation: str | tuple[str, ...] = ("tanh", "linear", "tanh")
    epochs: int = 250
    lr: float = 0.002
    batch_size: int = 32
    seed: int = 0


@dataclass(frozen=True)
class RunConfig:
    data: DataCfg
    schedule: ScheduleCfg
    model: ModelCfg
    train: TrainCfg
    continual: ContinualCfg
    score: ScoreCfg
    ood_source: OodSourceCfg
    split: SplitCfg
    autoencoder: AutoencoderCfg
    output_dir: str = "out"

    def to_dict(self) -> dict:
        return asdict(self)

    def fingerprint(self) -> str:
        payload = json.dumps(
            {"config": self.to_dict(), "version": __version__},
            sort_keys=True,
            default=list,
        )
        return hashlib.sha256(payload.encode()).hexdigest()


def _require(condition: bool, field: str, message: str) -> None:
    if not condition:
        raise ConfigError(f"{field}: {message}")


def validate(cfg: RunConfig) -> RunConfig:
    _require(
        bool(cfg.data.feature_csv) or bool(cfg.data.idx_images and cfg.data.idx_labels),
        "data",
        "needs either feature_csv or both idx_images and idx_labels",
    )
    _require(len(cfg.schedule.batches) >= 1, "schedule.batches", "needs >= 1 batch")
    seen: set[int] = set()
    for i, classes in enumerate(cfg.schedule.batches):
        _require(len(classes) >= 1, f"schedule.batches[{i}]", "must list classes")
        _require(
            not (seen & set(classes)),
            f"schedule.batches[{i}]",
            "class lists must be pairwise disjoint",
        )
        seen.update(classes)
    _require(
        not (seen & set(cfg.schedule.aux_classes)),
        "schedule.aux_classes",
        "must be disjoint from all batches",
    )
    _require(len(cfg.model.hidden_widths) >= 0, "model.hidden_widths", "invalid")
    _require(cfg.train.epochs >= 1, "train.epochs", "must be >= 1")
    _require(cfg.train.lr > 0, "train.lr", "must be > 0")
    _require(cfg.train.batch_size >= 1, "train.batch_size", "must be >= 1")
    _require(cfg.continual.lambda_ood >= 0, "continual.lambda_ood", "must be >= 0")
    _require(cfg.continual.lambda_prior >= 0, "continual.lambda_prior", "must be >= 0")
    _require(0 < cfg.continual.eta <= 100, "continual.eta", "must be in (0, 100]")
    _require(cfg.continual.replay_cap >= 0, "continual.replay_cap", "must be >= 0")
    _require(cfg.continual.n_min >= 0, "continual.n_min", "must be >= 0")
    _require(
        cfg.score.kind in ("mahalanobis", "odin", "max_softmax"),
        "score.kind",
        "must be one of mahalanobis, odin, max_softmax",
    )
    _require(cfg.score.ridge >= 0, "score.ridge", "must be >= 0")
    _require(
        cfg.ood_source.kind in ("leave_out", "adversarial"),
        "ood_source.kind",
        "must be leave_out or adversarial",
    )
    _require(cfg.ood_source.epsilon >= 0, "ood_source.epsilon", "must be >= 0")
    _require(cfg.ood_source.steps >= 1, "ood_source.steps", "must be >= 1")
    _require(
        0 < cfg.split.train_fraction < 1, "split.train_fraction", "must be in (0, 1)"
    )
    _require(cfg.autoencoder.latent_dim >= 1, "autoencoder.latent_dim", "must be >= 1")
    _require(cfg.autoencoder.epochs >= 1, "autoencoder.epochs", "must be >= 1")
    _require(cfg.autoencoder.lr > 0, "autoencoder.lr", "must be > 0")
    if cfg.ood_source.kind == "leave_out":
        _require(
            len(cfg.schedule.aux_classes) >= 1,
            "schedule.aux_classes",
            "leave_out OOD source needs held-out classes",
        )
    return cfg


# list-valued config keys and their element converters
_TUPLE_FIELDS = {
    "hidden_widths": int,
    "temperature_grid": float,
    "epsilon_grid": float,
}


def _build(section_cls, payload: dict, field: str):
    if not isinstance(payload, dict):
        raise ConfigError(f"{field}: expected an object")
    names = set(section_cls.__dataclass_fields__)
    unknown = set(payload) - names
    if unknown:
        raise ConfigError(f"{field}: unknown key(s) {sorted(unknown)}")
    kwargs = dict(payload)
    for name, conv in _TUPLE_FIELDS.items():
        if name in kwargs and kwargs[name] is not None:
            kwargs[name] = tuple(conv(v) for v in kwargs[name])
    if isinstance(kwargs.get("activation"), list):
        kwargs["activation"] = tuple(str(v) for v in kwargs["activation"])
    try:
        return section_cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{field}: {exc}") from None


def from_dict(payload: dict) -> RunConfig:
    if not isinstance(payload, dict):
        raise ConfigError("config root must be an object")
    known = {
        "data", "schedule", "model", "train", "continual", "score",
        "ood_source", "split", "autoencoder", "output_dir",
    }
    unknown = set(payload) - known
    if unknown:
        raise ConfigError(f"unknown top-level key(s) {sorted(unknown)}")
    if "schedule" not in payload:
        raise ConfigError("schedule: section is required")
    if "data" not in payload:
        raise ConfigError("data: section is required")
    schedule_raw = payload["schedule"]
    if not isinstance(schedule_raw, dict) or "batches" not in schedule_raw:
        raise ConfigError("schedule.batches: required")
    schedule = ScheduleCfg(
        batches=tuple(tuple(int(c) for c in b) for b in schedule_raw["batches"]),
        aux_classes=tuple(int(c) for c in schedule_raw.get("aux_classes", ())),
    )
    cfg = RunConfig(
        data=_build(DataCfg, payload.get("data", {}), "data"),
        schedule=schedule,
        model=_build(ModelCfg, payload.get("model", {}), "model"),
        train=_build(TrainCfg, payload.get("train", {}), "train"),
        continual=_build(ContinualCfg, payload.get("continual", {}), "continual"),
        score=_build(ScoreCfg, payload.get("score", {}), "score"),
        ood_source=_build(OodSourceCfg, payload.get("ood_source", {}), "ood_source"),
        split=_build(SplitCfg, payload.get("split", {}), "split"),
        autoencoder=_build(AutoencoderCfg, payload.get("autoencoder", {}), "autoencoder"),
        output_dir=str(payload.get("output_dir", "out")),
    )
    return validate(cfg)


def from_file(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        payload = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return from_dict(payload)


def with_overrides(cfg: RunConfig, seed=None, out=None) -> RunConfig:
    if seed is not None:
        cfg = replace(cfg, train=replace(cfg.train, seed=int(seed)))
    if out is not None:
        cfg = replace(cfg, output_dir=str(out))
    return cfg
