"""Experiment configuration: an INI-style key-value file with typed sections.

Example::

    [experiment]
    seed = 7
    [data]
    path = ratings.dat
    format = movielens_dat
    [model]
    d = 20
    use_side = 1
    precision = truncated
    lo = 0.5
    hi = 2
    [prior]
    map_driven_w0 = true

Every key has a default; unknown sections or keys are configuration errors.
"""
from __future__ import annotations

import configparser
import dataclasses
import hashlib
import os
from dataclasses import dataclass, field

from .data import FORMATS, ConfigError, SplitSpec
from .gibbs import GibbsConfig
from .map_estimator import MapConfig
from .model import PrecisionMode
from .vi import ViConfig


@dataclass
class DataSection:
    path: str = ""
    format: str = "movielens_dat"
    scale_lo: float = 1.0
    scale_hi: float = 5.0


@dataclass
class SplitSection:
    train_fraction: float = 0.70
    validation_fraction: float = 0.05
    min_item_ratings: int = 0
    require_coverage: bool = True


@dataclass
class ModelSection:
    d: int = 20
    use_user: int = 1
    use_side: int = 0
    precision: str = "constant"
    lo: float = 0.5
    hi: float = 2.0


@dataclass
class PriorSection:
    beta0: float = 1.0
    nu0: float = -1.0          # negative means d + 1
    w0_scale: float = 1.0      # W0 = w0_scale * I unless map_driven_w0
    map_driven_w0: bool = False
    a_user: float = 2.0
    b_user: float = 2.0
    a_item: float = 2.0
    b_item: float = 2.0
    a_tau: float = 2.0
    b_tau: float = 2.0
    mu_gamma: float = 0.0
    lambda_gamma: float = 1.0
    mu_eta: str = "mean"       # a number, or "mean" for the training mean rating
    lambda_eta: float = 1.0
    hyper_dof_offset: float = 1.0


@dataclass
class OutputSection:
    dir: str = "out"
    record_timing: bool = True


@dataclass
class ExperimentConfig:
    seed: int = 0
    threads: int = 1
    data: DataSection = field(default_factory=DataSection)
    split: SplitSection = field(default_factory=SplitSection)
    model: ModelSection = field(default_factory=ModelSection)
    prior: PriorSection = field(default_factory=PriorSection)
    map: MapConfig = field(default_factory=MapConfig)
    gibbs: GibbsConfig = field(default_factory=lambda: GibbsConfig(num_samples=300))
    vi: ViConfig = field(default_factory=ViConfig)
    output: OutputSection = field(default_factory=OutputSection)

    SECTIONS = ("data", "split", "model", "prior", "map", "gibbs", "vi", "output")

    def split_spec(self) -> SplitSpec:
        s = self.split
        return SplitSpec(s.train_fraction, s.validation_fraction, self.seed,
                         s.min_item_ratings, s.require_coverage)

    def validate(self):
        if self.data.format not in FORMATS:
            raise ConfigError(f"data.format must be one of {FORMATS}")
        try:
            mode = PrecisionMode(self.model.precision)
        except ValueError:
            raise ConfigError(f"unknown precision mode {self.model.precision!r}") from None
        if mode == PrecisionMode.TRUNCATED and not 0 < self.model.lo < self.model.hi:
            raise ConfigError("truncation bounds must satisfy 0 < lo < hi")
        if self.model.d < 1:
            raise ConfigError("model.d must be positive")
        if self.model.use_user not in (0, 1) or self.model.use_side not in (0, 1):
            raise ConfigError("model flags must be 0 or 1")
        if self.prior.mu_eta != "mean":
            try:
                float(self.prior.mu_eta)
            except ValueError:
                raise ConfigError("prior.mu_eta must be a number or 'mean'") from None
        nu0 = self.prior.nu0 if self.prior.nu0 >= 0 else self.model.d + 1
        if nu0 < self.model.d:
            raise ConfigError("prior.nu0 must be >= d")
        for name in ("beta0", "a_user", "b_user", "a_item", "b_item", "a_tau", "b_tau",
                     "lambda_gamma", "lambda_eta", "w0_scale"):
            if getattr(self.prior, name) <= 0:
                raise ConfigError(f"prior.{name} must be positive")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")
        try:
            SplitSpec(self.split.train_fraction, self.split.validation_fraction)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        return self

    def to_text(self) -> str:
        lines = ["[experiment]", f"seed = {self.seed}", f"threads = {self.threads}"]
        for sec in self.SECTIONS:
            lines.append(f"[{sec}]")
            for f in dataclasses.fields(getattr(self, sec)):
                lines.append(f"{f.name} = {getattr(getattr(self, sec), f.name)}")
        return "\n".join(lines) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:16]


def _coerce(value: str, current):
    if isinstance(current, bool):
        v = value.strip().lower()
        if v in ("1", "true", "yes", "on"):
            return True
        if v in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"expected a boolean, got {value!r}")
    try:
        if isinstance(current, int):
            return int(value)
        if isinstance(current, float):
            return float(value)
    except ValueError:
        raise ConfigError(f"expected a number, got {value!r}") from None
    return value.strip()


def set_value(cfg: ExperimentConfig, section: str, key: str, value: str):
    if section == "experiment":
        if key not in ("seed", "threads"):
            raise ConfigError(f"unknown key experiment.{key}")
        setattr(cfg, key, _coerce(value, 0))
        return
    if section not in ExperimentConfig.SECTIONS:
        raise ConfigError(f"unknown config section [{section}]")
    sec = getattr(cfg, section)
    names = {f.name for f in dataclasses.fields(sec)}
    if key not in names:
        raise ConfigError(f"unknown key {section}.{key}")
    coerced = _coerce(value, getattr(sec, key))
    if section in ("map", "gibbs", "vi"):
        # engine configs validate themselves on construction
        try:
            setattr(cfg, section, dataclasses.replace(sec, **{key: coerced}))
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
    else:
        setattr(sec, key, coerced)


def load_config(path=None, overrides=()) -> ExperimentConfig:
    """Read a config file (optional), apply ``section.key=value`` overrides and
    the BCPMF_SEED environment variable, then validate."""
    cfg = ExperimentConfig()
    if path is not None:
        parser = configparser.ConfigParser()
        try:
            with open(path) as fh:
                parser.read_file(fh)
        except configparser.Error as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from None
        for section in parser.sections():
            for key, value in parser.items(section):
                set_value(cfg, section, key, value)
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override must look like section.key=value, got {item!r}")
        lhs, value = item.split("=", 1)
        section, key = lhs.strip().split(".", 1)
        set_value(cfg, section, key, value)
    env_seed = os.environ.get("BCPMF_SEED")
    if env_seed:
        try:
            cfg.seed = int(env_seed)
        except ValueError:
            raise ConfigError("BCPMF_SEED must be an integer") from None
    return cfg.validate()
