"""Run configuration: sectioned key=value files plus dotted overrides.

Example::

    [model]
    variant = w
    g_hidden = 32,32

    [replay]
    enabled = true

Any key can be overridden with ``section.key=value``.
"""
import configparser
import dataclasses
from dataclasses import dataclass, field


class ConfigError(ValueError):
    """Unknown key, bad value, or unreadable config file."""


@dataclass
class ModelConfig:
    variant: str = "w"
    z_dim: int = 8
    g_hidden: tuple = (48, 48)
    d_hidden: tuple = (64, 64)
    g_out: str = "auto"
    dtype: str = "float64"


@dataclass
class MaskConfig:
    s_max: float = 200.0
    lambda_ru: float = 2.0
    grad_clamp: float = 50.0
    lr_embedding: float = 0.0
    gate_current: bool = True


@dataclass
class LossConfig:
    lambda_gp: float = 10.0
    n_critic: int = 5
    gp_point: str = "interpolate"
    lr_g: float = 1e-3
    lr_d: float = 1e-3
    beta1: float = 0.5
    beta2: float = 0.9


@dataclass
class DataConfig:
    source: str = "gaussian"
    num_tasks: int = 5
    classes_per_task: int = 2
    samples_per_class: int = 250
    order_seed: int = -1
    per_class_cap: int = 0
    downsample: bool = True
    path: str = ""


@dataclass
class ScheduleConfig:
    epochs: int = 10
    batch_size: int = 64
    steps_per_epoch: int = 0
    epochs_growth: float = 1.0
    eval_every_epoch: bool = False


@dataclass
class ReplayConfig:
    enabled: bool = True
    batch_size: int = 0


@dataclass
class ExpansionConfig:
    enabled: bool = True


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    masks: MaskConfig = field(default_factory=MaskConfig)
    losses: LossConfig = field(default_factory=LossConfig)
    data: DataConfig = field(default_factory=DataConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    replay: ReplayConfig = field(default_factory=ReplayConfig)
    expansion: ExpansionConfig = field(default_factory=ExpansionConfig)
    seed: int = 0

    SECTIONS = ("model", "masks", "losses", "data", "schedule", "replay", "expansion")

    def to_dict(self):
        return dataclasses.asdict(self)

    def set(self, dotted, value):
        """Apply one ``section.key=value`` override, coercing the type."""
        if dotted == "seed":
            self.seed = _coerce("seed", value, int)
            return
        section, _, key = dotted.partition(".")
        if section not in self.SECTIONS or not key:
            raise ConfigError(f"unknown config key {dotted!r}")
        sub = getattr(self, section)
        names = {f.name: f for f in dataclasses.fields(sub)}
        if key not in names:
            raise ConfigError(f"unknown config key {dotted!r}")
        setattr(sub, key, _coerce(dotted, value, type(getattr(sub, key))))

    def validate(self):
        if self.model.variant not in ("a", "w"):
            raise ConfigError(f"model.variant must be 'a' or 'w', got {self.model.variant!r}")
        if self.model.g_out not in ("auto", "tanh", "identity"):
            raise ConfigError(f"model.g_out must be auto, tanh or identity, got {self.model.g_out!r}")
        if self.model.dtype not in ("float64", "float32"):
            raise ConfigError(f"model.dtype must be float64 or float32, got {self.model.dtype!r}")
        if self.losses.gp_point not in ("interpolate", "fake"):
            raise ConfigError(f"losses.gp_point must be interpolate or fake, got {self.losses.gp_point!r}")
        if self.data.source not in ("gaussian", "mnist"):
            raise ConfigError(f"data.source must be gaussian or mnist, got {self.data.source!r}")
        if self.masks.s_max <= 1:
            raise ConfigError("masks.s_max must exceed 1")
        if self.schedule.epochs < 1 or self.schedule.batch_size < 1:
            raise ConfigError("schedule.epochs and schedule.batch_size must be positive")
        if self.losses.n_critic < 1:
            raise ConfigError("losses.n_critic must be positive")
        return self


def _coerce(key, value, typ):
    if not isinstance(value, str):
        return value
    v = value.strip()
    try:
        if typ is bool:
            low = v.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(v)
        if typ is tuple:
            return tuple(int(p) for p in v.replace(" ", "").split(",") if p)
        return typ(v)
    except ValueError:
        raise ConfigError(f"bad value {value!r} for {key}") from None


def load_config(path=None, overrides=(), seed=None):
    """Build a RunConfig from an optional file and ``k=v`` overrides."""
    cfg = RunConfig()
    if path is not None:
        parser = configparser.ConfigParser()
        try:
            with open(path, encoding="utf-8") as fh:
                parser.read_file(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        except configparser.Error as exc:
            raise ConfigError(f"malformed config {path}: {exc}") from None
        for key, value in parser.defaults().items():
            cfg.set(key, value)
        for section in parser.sections():
            if section not in RunConfig.SECTIONS and section != "run":
                raise ConfigError(f"unknown config section [{section}]")
            for key, value in parser.items(section, raw=True):
                if key in parser.defaults():
                    continue
                cfg.set(key if section == "run" else f"{section}.{key}", value)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, value = item.split("=", 1)
        cfg.set(key.strip(), value)
    if seed is not None:
        cfg.seed = int(seed)
    return cfg.validate()


def from_dict(d):
    cfg = RunConfig()
    for section, values in d.items():
        if section == "seed":
            cfg.seed = int(values)
            continue
        for key, value in values.items():
            if isinstance(value, list):
                value = tuple(value)
            cfg.set(f"{section}.{key}", value)
    return cfg.validate()
