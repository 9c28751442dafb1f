"""Experiment configuration: sectioned key/value files with dotted overrides.

File format is INI (``[section]`` then ``key = value``); every key has a
default and unknown sections or keys are rejected.
"""
import configparser
import dataclasses
from dataclasses import dataclass, field

from .errors import ConfigurationError, InputError

METHODS = ("PL", "UDA", "FM", "BAM-PL", "BAM-UDA", "BAM-FM", "PAWS", "BAM-PAWS")


@dataclass
class ExperimentSection:
    method: str = "BAM-UDA"
    seed: int = 0
    out_dir: str = "runs/default"
    epochs: int = 100
    eval_every: int = 1


@dataclass
class DataSection:
    source: str = "blobs"  # blobs | moons | csv
    csv_path: str = ""
    label_column: str = "label"
    normalize: bool = True
    K: int = 4
    n_per_class: int = 754
    d: int = 2
    separation: float = 2.0
    blob_std: float = 1.0
    moons_noise: float = 0.1
    labels_per_class: int = 4
    label_fraction: float = 0.0  # used instead of labels_per_class when > 0
    test_fraction: float = 0.0  # used instead of test_per_class when > 0
    long_tail_alpha: float = 1.0  # > 1 switches to long-tailed curation
    n_max: int = 500
    test_per_class: int = 250


@dataclass
class ModelSection:
    hidden: str = "64,64"
    activation: str = "relu"
    embed_dim: int = 16  # encoder output width for PAWS
    rho_init: float = -3.0


@dataclass
class OptimSection:
    lr: float = 0.03
    momentum: float = 0.9
    nesterov: bool = True
    weight_decay: float = 5e-4
    schedule: str = "cosine"  # cosine | constant
    batch_size: int = 16
    mu: int = 0  # 0 takes the method preset's value
    bayes_lr: float = 0.01


@dataclass
class SSLSection:
    lam: float = -1.0  # negative values take the preset
    tau: float = -1.0
    t: float = -1.0
    confidence_floor: float = -1.0  # >= 0 adds a max-prob floor to variance selection


@dataclass
class AugmentSection:
    weak_sigma: float = 0.05
    strong_sigma: float = 0.2
    scale_range: float = 0.2
    dropout: float = 0.1


@dataclass
class BamSection:
    M: int = 10
    eval_M: int = 20
    Q: float = 0.95
    q_start: float = 0.1
    q_warmup_epochs: float = 10.0
    kl_ramp_epochs: float = 0.0  # 0 keeps the KL weight at 1 from the start
    bound_delta: float = 0.05
    bound_s2: float = 1.0


@dataclass
class PawsSection:
    tau_p: float = 0.1
    t: float = 0.25
    me_max_weight: float = 1.0
    support_per_class: int = 4
    batch_size: int = 64
    aggregation: str = "off"  # off | swa | ema
    T_swa: int = -1  # negative means half of the epochs
    swa_update_every: str = "iteration"  # iteration | epoch
    gamma_schedule: str = "linear_warmup"
    gamma_max: float = 0.996
    gamma_warmup_epochs: float = 50.0
    gamma_start_gap: float = 0.05
    kl_ramp_epochs: float = 50.0


@dataclass
class ExperimentConfig:
    experiment: ExperimentSection = field(default_factory=ExperimentSection)
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    optim: OptimSection = field(default_factory=OptimSection)
    ssl: SSLSection = field(default_factory=SSLSection)
    augment: AugmentSection = field(default_factory=AugmentSection)
    bam: BamSection = field(default_factory=BamSection)
    paws: PawsSection = field(default_factory=PawsSection)

    def set(self, dotted, value):
        """Assign ``section.key`` from a string (or an already-typed value)."""
        try:
            section, key = dotted.split(".")
        except ValueError:
            raise ConfigurationError(f"override {dotted!r} must look like section.key") from None
        sec = getattr(self, section, None)
        if sec is None or not dataclasses.is_dataclass(sec):
            raise ConfigurationError(f"unknown config section {section!r}")
        types = {f.name: f.type for f in dataclasses.fields(sec)}
        if key not in types:
            raise ConfigurationError(f"unknown config key {section}.{key}")
        setattr(sec, key, _coerce(types[key], value, dotted))

    def to_dict(self):
        return dataclasses.asdict(self)

    def to_ini(self):
        lines = []
        for name, sec in self.to_dict().items():
            lines.append(f"[{name}]")
            lines += [f"{k} = {_fmt(v)}" for k, v in sec.items()]
            lines.append("")
        return "\n".join(lines)

    @property
    def hidden_sizes(self):
        text = self.model.hidden.strip()
        if not text:
            return []
        try:
            return [int(h) for h in text.split(",")]
        except ValueError:
            raise ConfigurationError(f"bad hidden sizes {text!r}") from None

    def validate(self):
        e, d, o = self.experiment, self.data, self.optim
        if e.method not in METHODS:
            raise ConfigurationError(f"unknown method {e.method!r}; choose from {', '.join(METHODS)}")
        if e.epochs < 0 or e.eval_every < 1:
            raise ConfigurationError("epochs must be >= 0 and eval_every >= 1")
        if d.source not in ("blobs", "moons", "csv"):
            raise ConfigurationError(f"unknown data source {d.source!r}")
        if d.source == "csv" and not d.csv_path:
            raise ConfigurationError("data.csv_path is required for csv source")
        if d.long_tail_alpha < 1:
            raise ConfigurationError("data.long_tail_alpha must be >= 1")
        if o.lr <= 0 or o.bayes_lr <= 0:
            raise ConfigurationError("learning rates must be positive")
        if o.schedule not in ("cosine", "constant"):
            raise ConfigurationError(f"unknown lr schedule {o.schedule!r}")
        if o.batch_size < 1 or o.mu < 0:
            raise ConfigurationError("batch_size must be >= 1 and mu >= 0")
        if self.bam.M < 2 or self.bam.eval_M < 2:
            raise ConfigurationError("bam.M and bam.eval_M must be >= 2")
        if not 0 < self.bam.Q <= 1 or self.bam.Q < self.bam.q_start:
            raise ConfigurationError("bam.Q must lie in [q_start, 1]")
        p = self.paws
        if p.aggregation not in ("off", "swa", "ema"):
            raise ConfigurationError(f"unknown aggregation {p.aggregation!r}")
        if p.swa_update_every not in ("iteration", "epoch"):
            raise ConfigurationError("paws.swa_update_every must be iteration or epoch")
        if p.gamma_schedule not in ("linear_warmup", "one_minus_cosine", "constant"):
            raise ConfigurationError(f"unknown gamma schedule {p.gamma_schedule!r}")
        if p.tau_p <= 0 or not 0 < p.t <= 1:
            raise ConfigurationError("paws.tau_p must be > 0 and paws.t in (0, 1]")
        if self.model.activation not in ("relu", "tanh"):
            raise ConfigurationError(f"unknown activation {self.model.activation!r}")
        if any(h < 1 for h in self.hidden_sizes):
            raise ConfigurationError("hidden sizes must be positive")
        return self


def _fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def _coerce(kind, value, where):
    if not isinstance(value, str):
        value = str(value) if not isinstance(value, bool) else ("true" if value else "false")
    text = value.strip()
    try:
        if kind in (bool, "bool"):
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if kind in (int, "int"):
            return int(text)
        if kind in (float, "float"):
            return float(text)
    except ValueError:
        raise ConfigurationError(f"{where}: cannot parse {value!r} as {getattr(kind, '__name__', kind)}") from None
    return text


def load_config(path=None, overrides=()):
    """Read an INI config (or start from defaults) and apply ``section.key=value`` overrides."""
    cfg = ExperimentConfig()
    if path is not None:
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        try:
            with open(path) as fh:
                parser.read_file(fh)
        except FileNotFoundError:
            raise InputError(f"config file not found: {path}") from None
        except configparser.Error as exc:
            raise InputError(f"cannot parse {path}: {exc}") from None
        for section in parser.sections():
            for key, value in parser.items(section):
                cfg.set(f"{section}.{key}", value)
    for item in overrides:
        if "=" not in item:
            raise ConfigurationError(f"override {item!r} must be key=value")
        key, value = item.split("=", 1)
        cfg.set(key.strip(), value)
    return cfg.validate()
