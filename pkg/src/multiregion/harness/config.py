"""Experiment configuration as a flat ``key = value`` text file.

Blank lines and ``#`` comments are ignored. Every key has a default; the
resolved configuration (defaults plus file plus command-line overrides)
is what gets hashed and embedded in run outputs.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Iterable, Optional

from ..errors import ConfigError, InvalidArgumentError
from ..evaluation import EvalConfig
from ..featmap import DEFAULT_SCALES
from ..geometry import RegionKind, RegionSpec, region_by_name
from ..localization import LocalizationConfig
from ..optim import SGDConfig
from ..recognition.svm import SVMConfig

ENV_CONFIG = "MULTIREGION_CONFIG"
# settings that change how a run executes but never what it writes
EXECUTION_KEYS = frozenset({"workers"})


def _bool(v: str) -> bool:
    s = v.strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _grid(v: str) -> tuple:
    parts = v.lower().replace(" ", "").split("x")
    if len(parts) != 2:
        raise ValueError(f"grid must look like 7x7, got {v!r}")
    return int(parts[0]), int(parts[1])


def _ints(v: str) -> tuple:
    return tuple(int(p) for p in v.split(",") if p.strip())


def parse_region(token: str) -> RegionSpec:
    """``a``..``j`` or ``rect:S``, ``half_left:S`` (etc.), ``ring:INNER:OUTER``."""
    token = token.strip()
    if ":" not in token:
        return region_by_name(token)
    kind, *nums = token.split(":")
    try:
        kind = RegionKind(kind)
        values = [float(n) for n in nums]
    except ValueError as exc:
        raise InvalidArgumentError(f"bad region spec {token!r}") from exc
    if kind is RegionKind.RING:
        if len(values) != 2:
            raise InvalidArgumentError(f"ring needs inner and outer scale: {token!r}")
        return RegionSpec(kind, values[1], values[0], name=token)
    if len(values) != 1:
        raise InvalidArgumentError(f"{kind.value} needs one scale: {token!r}")
    return RegionSpec(kind, values[0], name=token)


def parse_regions(v: str) -> tuple:
    specs = tuple(parse_region(t) for t in v.split(",") if t.strip())
    if not specs:
        raise ValueError("at least one region is required")
    return specs


_GRID_FMT = lambda g: f"{g[0]}x{g[1]}"  # noqa: E731
_INTS_FMT = lambda t: ",".join(str(i) for i in t)  # noqa: E731


@dataclass
class ExperimentConfig:
    seed: int = 0
    workers: int = 1
    # data generation
    n_images: int = 80
    train_fraction: float = 0.5
    image_width: int = 640
    image_height: int = 480
    objects_min: int = 1
    objects_max: int = 3
    proposals_per_image: int = 120
    clutter: float = 0.3
    distractors: int = 2
    noise: float = 0.06
    # features and regions
    regions: str = "a,b,c,d,e,f,g,h,i,j"
    grid: tuple = (7, 7)
    scales: tuple = DEFAULT_SCALES
    stride: int = 16
    target_side: float = 224.0
    use_semantic: bool = True
    semantic_grid: tuple = (9, 9)
    semantic_target_side: float = 288.0
    # localization
    iterations: int = 2
    tau_s: float = -2.1
    nms_iou: float = 0.3
    vote_iou: float = 0.5
    regression_scale: float = 1.3
    regression_grid: tuple = (7, 7)
    rescore: bool = False
    # training
    train_heads: bool = True
    softmax_lr: float = 0.001
    softmax_momentum: float = 0.9
    softmax_batch: int = 128
    softmax_epochs: int = 30
    softmax_lr_step: int = 30000
    svm_c: float = 0.01
    svm_max_rounds: int = 10
    svm_initial_negatives: int = 2000
    svm_tol: float = 1e-2
    regressor_lr: float = 0.01
    regressor_momentum: float = 0.9
    regressor_batch: int = 128
    regressor_epochs: int = 60
    regressor_lr_step: int = 30000
    regressor_weight_decay: float = 0.001
    regressor_hidden: int = 0
    foreground_lr: float = 0.01
    foreground_epochs: int = 10
    # evaluation
    iou: float = 0.5
    ap_variant: str = "all_point"
    correlation: str = "pearson"

    def __post_init__(self):
        if isinstance(self.regions, (list, tuple)):
            self.regions = ",".join(self.regions)
        try:
            parse_regions(self.regions)
            self.localization()
            self.evaluation()
        except (InvalidArgumentError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        if self.n_images < 1:
            raise ConfigError("n_images must be >= 1")
        if not 0 <= self.clutter <= 1:
            raise ConfigError("clutter must lie in [0, 1]")
        if not 0 < self.train_fraction < 1:
            raise ConfigError("train_fraction must lie in (0, 1)")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if not 1 <= self.objects_min <= self.objects_max:
            raise ConfigError("need 1 <= objects_min <= objects_max")

    # -- derived views -----------------------------------------------------

    @property
    def region_specs(self) -> tuple:
        return parse_regions(self.regions)

    def localization(self) -> LocalizationConfig:
        return LocalizationConfig(self.iterations, self.tau_s, self.nms_iou, self.vote_iou,
                                  self.regression_scale, self.rescore)

    def evaluation(self, similarity_groups: Optional[dict] = None) -> EvalConfig:
        return EvalConfig(self.iou, self.ap_variant, dict(similarity_groups or {}), self.correlation)

    def softmax(self) -> SGDConfig:
        return SGDConfig(self.softmax_lr, self.softmax_momentum, self.softmax_batch, self.softmax_epochs,
                         self.softmax_lr_step)

    def regressor(self) -> SGDConfig:
        return SGDConfig(self.regressor_lr, self.regressor_momentum, self.regressor_batch, self.regressor_epochs,
                         self.regressor_lr_step, weight_decay=self.regressor_weight_decay)

    def foreground(self) -> SGDConfig:
        return SGDConfig(self.foreground_lr, 0.9, 256, self.foreground_epochs, 30000)

    def svm(self) -> SVMConfig:
        return SVMConfig(c=self.svm_c, max_rounds=self.svm_max_rounds,
                         initial_negatives=self.svm_initial_negatives, tol=self.svm_tol)

    # -- serialization -----------------------------------------------------

    def to_dict(self) -> dict:
        """Result-affecting keys as strings; execution-only keys are left out."""
        return {f.name: _format(f.name, getattr(self, f.name)) for f in fields(self) if f.name not in EXECUTION_KEYS}

    def to_text(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in sorted(self.to_dict().items()))

    def hash(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()

    def replace(self, **kw) -> "ExperimentConfig":
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d.update(kw)
        return ExperimentConfig(**d)


def _format(key: str, v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if key in _GRID_KEYS:
        return _GRID_FMT(v)
    if key in _INTS_KEYS:
        return _INTS_FMT(v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


_GRID_KEYS = {"grid", "semantic_grid", "regression_grid"}
_INTS_KEYS = {"scales"}


def _parse_value(key: str, raw: str, current):
    if key in _GRID_KEYS:
        return _grid(raw)
    if key in _INTS_KEYS:
        return _ints(raw)
    if isinstance(current, bool):
        return _bool(raw)
    if isinstance(current, int):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    return raw.strip()


def parse_pairs(pairs: Iterable[tuple[str, str, str]], base: Optional[ExperimentConfig] = None) -> ExperimentConfig:
    """Apply ``(key, value, where)`` triples on top of ``base``; ``where`` labels errors."""
    base = base or ExperimentConfig()
    values = {f.name: getattr(base, f.name) for f in fields(base)}
    for key, raw, where in pairs:
        key = key.strip().replace("-", "_").replace(".", "_")
        if key not in values:
            raise ConfigError(f"{where}: unknown config key {key!r}")
        try:
            values[key] = _parse_value(key, raw, values[key])
        except ValueError as exc:
            raise ConfigError(f"{where}: bad value for {key}: {exc}") from exc
    return ExperimentConfig(**values)


def parse_config_text(text: str, source: str = "<config>", base: Optional[ExperimentConfig] = None) -> ExperimentConfig:
    pairs = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value")
        k, v = line.split("=", 1)
        pairs.append((k, v.strip(), f"{source}:{lineno}"))
    return parse_pairs(pairs, base)


def load_config(path, overrides: Iterable[str] = ()) -> ExperimentConfig:
    """Defaults, then the file at ``path`` (if any), then ``key=value`` overrides."""
    cfg = ExperimentConfig()
    if path:
        p = Path(path)
        try:
            text = p.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {p}: {exc}") from exc
        cfg = parse_config_text(text, str(p), cfg)
    pairs = []
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        k, v = item.split("=", 1)
        pairs.append((k, v, "command line"))
    return parse_pairs(pairs, cfg)


@dataclass(frozen=True)
class RunManifest:
    command: str
    config_hash: str
    seed: int
    versions: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"command": self.command, "config_hash": self.config_hash, "seed": self.seed,
                "versions": dict(sorted(self.versions.items()))}
