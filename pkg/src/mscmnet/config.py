"""Run configuration: defaults, flat key=value files, flag overrides.

Config files are line-oriented `section.key = value` text. `#` starts a
comment. Values are coerced by the declared type of each key; unknown keys
are errors. CLI flags override file values, which override defaults.
"""

from dataclasses import dataclass, field

from .data.augment import AugmentConfig
from .data.sampler import SamplerConfig
from .errors import ConfigError
from .losses import LossConfig
from .model import ModelConfig


@dataclass
class OptimizerConfig:
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4

    def validate(self):
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")
        return self


@dataclass
class ScheduleConfig:
    milestones: tuple = (12, 17)
    factor: float = 0.1

    def validate(self):
        ms = tuple(self.milestones)
        if any(b <= a for a, b in zip(ms, ms[1:])):
            raise ConfigError(f"milestones must be strictly increasing, got {ms}")
        if not 0.0 < self.factor < 1.0:
            raise ConfigError(f"factor must be in (0, 1), got {self.factor}")
        return self

    def lr_at(self, base_lr, epoch):
        drops = sum(1 for m in self.milestones if epoch >= m)
        return base_lr * (self.factor ** drops)


@dataclass
class TrainConfig:
    epochs: int = 20
    checkpoint_every: int = 5
    train_ids: int = 32

    def validate(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.checkpoint_every < 1:
            raise ConfigError(f"checkpoint_every must be >= 1, got {self.checkpoint_every}")
        if self.train_ids < 2:
            raise ConfigError(f"train_ids must be >= 2, got {self.train_ids}")
        return self


@dataclass
class EvalConfig:
    direction: str = "t2v"  # t2v | v2t | both
    trials: int = 10
    max_rank: int = 20
    batch_size: int = 64
    workers: int = 1

    def validate(self):
        if self.direction not in ("t2v", "v2t", "both"):
            raise ConfigError(f"direction must be t2v, v2t, or both, got {self.direction}")
        if self.trials < 1 or self.max_rank < 1 or self.batch_size < 1 or self.workers < 1:
            raise ConfigError("trials, max_rank, batch_size, workers must be >= 1")
        return self


@dataclass
class PathsConfig:
    dataset_dir: str = "data/desk"
    checkpoint_dir: str = "runs/desk"
    report_path: str = "runs/desk/report.txt"


@dataclass
class RunConfig:
    seed: int = 7
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def validate(self):
        self.model.validate()
        self.loss.validate()
        self.sampler.validate()
        self.augment.validate()
        self.optimizer.validate()
        self.schedule.validate()
        self.train.validate()
        self.eval.validate()
        return self


def _to_bool(raw):
    lowered = raw.strip().lower()
    if lowered in ("true", "1", "yes", "on"):
        return True
    if lowered in ("false", "0", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {raw!r}")


def _to_int_tuple(raw):
    parts = [p.strip() for p in raw.split(",") if p.strip()]
    if not parts:
        raise ConfigError(f"expected comma-separated integers, got {raw!r}")
    return tuple(int(p) for p in parts)


def _to_float_pair(raw):
    parts = [p.strip() for p in raw.split(",") if p.strip()]
    if len(parts) != 2:
        raise ConfigError(f"expected two comma-separated floats, got {raw!r}")
    return (float(parts[0]), float(parts[1]))


# key -> (section object getter, attribute, coercion)
_SCHEMA = {
    "seed": ("", "seed", int),
    "model.stage_channels": ("model", "stage_channels", _to_int_tuple),
    "model.stage_strides": ("model", "stage_strides", _to_int_tuple),
    "model.num_alb": ("model", "num_alb", int),
    "model.attn_dim": ("model", "attn_dim", int),
    "model.attn_heads": ("model", "attn_heads", int),
    "model.token_grid": ("model", "token_grid", _to_int_tuple),
    "model.fusion_alpha": ("model", "fusion_alpha", float),
    "model.alb_mix_alpha": ("model", "alb_mix_alpha", float),
    "model.embed_dim": ("model", "embed_dim", int),
    "model.qfe_mode": ("model", "qfe_mode", str),
    "model.mimb": ("model", "mimb", _to_bool),
    "model.multiscale": ("model", "multiscale", _to_bool),
    "model.final_stage": ("model", "final_stage", _to_bool),
    "model.alb_injection_order": ("model", "alb_injection_order", str),
    "loss.qc_alpha": ("loss", "qc_alpha", float),
    "loss.margin_rho": ("loss", "margin_rho", float),
    "loss.distance_mode": ("loss", "distance_mode", str),
    "loss.id_loss_weight": ("loss", "id_loss_weight", float),
    "loss.nm_anchor": ("loss", "nm_anchor", str),
    "loss.normalize": ("loss", "normalize", _to_bool),
    "sampler.num_ids": ("sampler", "num_ids", int),
    "sampler.num_v": ("sampler", "num_v", int),
    "sampler.num_t": ("sampler", "num_t", int),
    "sampler.rounds": ("sampler", "rounds", int),
    "augment.p_flip": ("augment", "p_flip", float),
    "augment.p_erase": ("augment", "p_erase", float),
    "augment.erase_area": ("augment", "erase_area", _to_float_pair),
    "augment.exchange_mode": ("augment", "exchange_mode", str),
    "augment.tg_jitter": ("augment", "tg_jitter", float),
    "augment.tc_jitter": ("augment", "tc_jitter", float),
    "augment.enabled": ("augment", "enabled", _to_bool),
    "optimizer.lr": ("optimizer", "lr", float),
    "optimizer.momentum": ("optimizer", "momentum", float),
    "optimizer.weight_decay": ("optimizer", "weight_decay", float),
    "schedule.milestones": ("schedule", "milestones", _to_int_tuple),
    "schedule.factor": ("schedule", "factor", float),
    "train.epochs": ("train", "epochs", int),
    "train.checkpoint_every": ("train", "checkpoint_every", int),
    "train.train_ids": ("train", "train_ids", int),
    "eval.direction": ("eval", "direction", str),
    "eval.trials": ("eval", "trials", int),
    "eval.max_rank": ("eval", "max_rank", int),
    "eval.batch_size": ("eval", "batch_size", int),
    "eval.workers": ("eval", "workers", int),
    "paths.dataset_dir": ("paths", "dataset_dir", str),
    "paths.checkpoint_dir": ("paths", "checkpoint_dir", str),
    "paths.report_path": ("paths", "report_path", str),
}


def parse_config_text(text, path="<config>"):
    """Flat key = value lines -> {key: raw string}."""
    mapping = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, _, value = body.partition("=")
        key = key.strip()
        value = value.strip()
        if not key or not value:
            raise ConfigError(f"{path}:{lineno}: empty key or value")
        if key in mapping:
            raise ConfigError(f"{path}:{lineno}: duplicate key {key}")
        mapping[key] = value
    return mapping


def apply_overrides(cfg, mapping, source="<config>"):
    """Apply {key: raw string} onto a RunConfig in place."""
    for key, raw in mapping.items():
        if key not in _SCHEMA:
            raise ConfigError(f"{source}: unknown config key {key!r}")
        section, attr, coerce = _SCHEMA[key]
        target = cfg if section == "" else getattr(cfg, section)
        try:
            setattr(target, attr, coerce(raw))
        except (ValueError, ConfigError) as exc:
            raise ConfigError(f"{source}: bad value for {key}: {exc}") from exc
    return cfg


def load_config(path=None, overrides=None):
    """Defaults <- config file <- explicit overrides, then validate."""
    cfg = RunConfig()
    if path is not None:
        try:
            with open(path) as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        apply_overrides(cfg, parse_config_text(text, path), path)
    if overrides:
        apply_overrides(cfg, overrides, "<flags>")
    cfg.validate()
    return cfg


def config_text(cfg):
    """Render the effective config as a parse-able key = value file."""
    lines = []
    for key, (section, attr, _) in _SCHEMA.items():
        target = cfg if section == "" else getattr(cfg, section)
        value = getattr(target, attr)
        if isinstance(value, bool):
            rendered = "true" if value else "false"
        elif isinstance(value, tuple):
            rendered = ",".join(str(v) for v in value)
        else:
            rendered = str(value)
        lines.append(f"{key} = {rendered}")
    return "\n".join(lines) + "\n"
