"""Run configuration: a flat ``key = value`` text file with ``#`` comments.

Every key has a default. Values given on the command line override the file,
and the fully resolved configuration can be written back out verbatim so a
run directory documents itself.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .nn import TrainConfig

DISTANCE_MODES = ("mahalanobis", "euclidean")


@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    relu_embedding: bool = False
    pca_variance_target: float = 0.95
    ece_bins: int = 15
    hist_bins: int = 20
    distance_mode: str = "mahalanobis"
    use_pca: bool = True
    use_triplet: bool = True
    use_clustering: bool = True
    split_fractions: tuple[float, float, float] = (0.8, 0.1, 0.1)
    train_data: str = ""
    val_data: str = ""
    test_data: str = ""
    ood_data: tuple[str, ...] = ()
    out_dir: str = "out"

    def __post_init__(self):
        if self.distance_mode not in DISTANCE_MODES:
            raise ConfigError(f"distance_mode must be one of {DISTANCE_MODES}, got {self.distance_mode!r}")
        if not 0.0 < self.pca_variance_target <= 1.0:
            raise ConfigError("pca_variance_target must lie in (0, 1]")
        if self.ece_bins < 1 or self.hist_bins < 1:
            raise ConfigError("bin counts must be positive")
        if len(self.split_fractions) != 3:
            raise ConfigError("split_fractions needs three values (train, val, test)")

    @property
    def seed(self) -> int:
        return self.train.seed

    def effective_train(self) -> TrainConfig:
        """Training settings after the ablation flags are applied."""
        if self.use_triplet:
            return self.train
        return dataclasses.replace(self.train, triplet_weight=0.0)

    def replace(self, **overrides) -> "RunConfig":
        return parse_config_lines([f"{k} = {_format(v)}" for k, v in overrides.items()], base=self)

    def to_text(self) -> str:
        lines = [f"{k} = {_format(v)}" for k, v in self.flat().items()]
        return "\n".join(lines) + "\n"

    def flat(self) -> dict:
        out = {f.name: getattr(self.train, f.name) for f in dataclasses.fields(TrainConfig)}
        for f in dataclasses.fields(self):
            if f.name != "train":
                out[f.name] = getattr(self, f.name)
        return out


_TRAIN_KEYS = {f.name: f for f in dataclasses.fields(TrainConfig)}
_RUN_KEYS = {f.name: f for f in dataclasses.fields(RunConfig) if f.name != "train"}
# friendly aliases for the three relabelling hyperparameters
_ALIASES = {"t": "fnr_threshold", "p": "validation_period", "epochs": "max_epochs", "lr": "learning_rate"}


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ",".join(_format(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse_bool(raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def _coerce(key: str, raw: str, default):
    raw = raw.strip()
    if isinstance(default, bool):
        return _parse_bool(raw)
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, tuple):
        items = [s.strip() for s in raw.split(",") if s.strip()]
        if key == "hidden_dims":
            return tuple(int(s) for s in items)
        if key == "split_fractions":
            return tuple(float(s) for s in items)
        return tuple(items)
    return raw


def parse_config_lines(lines, base: RunConfig | None = None) -> RunConfig:
    base = base or RunConfig()
    train_vals = dataclasses.asdict(base.train)
    run_vals = {k: getattr(base, k) for k in _RUN_KEYS}
    for lineno, line in enumerate(lines, 1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        if "=" not in text:
            raise ConfigError(f"config line {lineno}: expected key = value, got {line.strip()!r}")
        key, raw = (s.strip() for s in text.split("=", 1))
        key = _ALIASES.get(key, key)
        try:
            if key in _TRAIN_KEYS:
                train_vals[key] = _coerce(key, raw, getattr(TrainConfig(), key))
            elif key in _RUN_KEYS:
                run_vals[key] = _coerce(key, raw, getattr(RunConfig(), key))
            else:
                raise ConfigError(f"config line {lineno}: unknown key {key!r}")
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"config line {lineno}: bad value for {key}: {exc}") from None
    return RunConfig(train=TrainConfig(**train_vals), **run_vals)


def load_config(path=None, overrides=()) -> RunConfig:
    """Defaults, then the file at ``path`` (if any), then ``key=value`` overrides."""
    cfg = RunConfig()
    if path:
        try:
            lines = Path(path).read_text().splitlines()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        cfg = parse_config_lines(lines, cfg)
    return parse_config_lines(list(overrides), cfg)
