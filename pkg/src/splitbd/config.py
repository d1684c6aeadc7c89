"""Experiment configuration.

One flat INI file drives a whole experiment. Parsing is strict — an unknown
section or key is a hard error — and serialization is canonical, so
save(parse(text)) is lossless and two configs can be compared by fingerprint.
The fingerprint deliberately excludes the transport choice: runs that differ
only in how bytes move between the parties are the same experiment.
"""

import configparser
import hashlib
import io
from dataclasses import dataclass, field

from .data import CORNERS, NoiseSpec, TriggerSpec, dataset_names, num_classes_for
from .errors import ConfigurationError
from .nn.core import OptimizerConfig
from .nn.zoo import arch_names, surrogate_arch_names
from .protocol import SessionConfig
from .attack.surrogate import SurrogateConfig
from .attack.inject import InjectionConfig

IN_SHAPES = {
    "mnist": (1, 28, 28),
    "fmnist": (1, 28, 28),
    "digits28": (1, 28, 28),
    "cifar10": (3, 32, 32),
}


@dataclass
class SessionSettings:
    epochs: int = 5
    batch_size: int = 64
    optimizer: str = "adam"
    lr: float = 1e-3
    momentum: float = 0.0
    transport: str = "inproc"
    stealth_check: bool = True


@dataclass
class TriggerSettings:
    size: int = 4
    corner: str = "br"
    margin: int = 0
    value: float = 1.0
    width: int = 50  # embedding positions carried by the trigger
    target_class: int = 0


@dataclass
class SurrogateSettings:
    arch: str = "same-as-client"
    epochs: int = 200
    lr: float = 2e-4
    batch_size: int = 64


@dataclass
class ClusterSettings:
    max_iters: int = 100
    tol: float = 1e-4
    n_init: int = 10


@dataclass
class InjectionSettings:
    epochs: int = 10
    lambda_fid: float = 1.3
    lambda_bd: float = 1.0
    lr: float = 1.5e-3
    depth: int = 0
    window: tuple = (6, 10)
    overlay: str = "overwrite"


@dataclass
class ExperimentConfig:
    seed: int = 0
    dataset: str = "digits28"
    data_root: str = "data"
    arch: str = "smallcnn"
    split: tuple = (2, 3, 1)
    aux_count: int = 1000  # 0 = derive from aux_fraction
    aux_fraction: float = 0.1
    session: SessionSettings = field(default_factory=SessionSettings)
    trigger: TriggerSettings = field(default_factory=TriggerSettings)
    surrogate: SurrogateSettings = field(default_factory=SurrogateSettings)
    cluster: ClusterSettings = field(default_factory=ClusterSettings)
    injection: InjectionSettings = field(default_factory=InjectionSettings)
    sigma: float = 0.0  # defense noise; 0 disables

    # -- derived views ------------------------------------------------------

    @property
    def num_classes(self):
        return num_classes_for(self.dataset)

    @property
    def in_shape(self):
        return IN_SHAPES[self.dataset]

    def trigger_spec(self):
        t = self.trigger
        return TriggerSpec(size=t.size, corner=t.corner, margin=t.margin, value=t.value)

    def noise_spec(self):
        if self.sigma <= 0.0:
            return None
        return NoiseSpec(sigma=self.sigma, seed=derive_seed(self.seed, "noise"))

    def session_config(self):
        s = self.session
        return SessionConfig(
            epochs=s.epochs,
            batch_size=s.batch_size,
            optimizer=OptimizerConfig(kind=s.optimizer, lr=s.lr, momentum=s.momentum),
            seed=derive_seed(self.seed, "session"),
            record_last_epoch=True,
            transport=s.transport,
        )

    def surrogate_config(self):
        s = self.surrogate
        return SurrogateConfig(
            arch=s.arch,
            epochs=s.epochs,
            lr=s.lr,
            batch_size=s.batch_size,
            seed=derive_seed(self.seed, "surrogate"),
        )

    def injection_config(self):
        i = self.injection
        return InjectionConfig(
            epochs=i.epochs,
            lambda_fid=i.lambda_fid,
            lambda_bd=i.lambda_bd,
            lr=i.lr,
            depth=i.depth,
            window=tuple(i.window),
            overlay=i.overlay,
        )


def derive_seed(base, name):
    """Stable per-stage sub-seed from the experiment seed."""
    h = hashlib.sha256(f"{base}:{name}".encode()).digest()
    return int.from_bytes(h[:4], "little")


def _fmt(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


def _parse_bool(s):
    if s.lower() in ("true", "1", "yes"):
        return True
    if s.lower() in ("false", "0", "no"):
        return False
    raise ConfigurationError(f"expected a boolean, got {s!r}")


def _parse_ints(n):
    def parse(s):
        parts = [p.strip() for p in s.split(",")]
        if len(parts) != n:
            raise ConfigurationError(f"expected {n} comma-separated integers, got {s!r}")
        return tuple(int(p) for p in parts)

    return parse


# (section, key) -> (parser, attribute path)
_SCHEMA = {
    ("experiment", "seed"): (int, ("seed",)),
    ("experiment", "dataset"): (str, ("dataset",)),
    ("experiment", "data_root"): (str, ("data_root",)),
    ("experiment", "arch"): (str, ("arch",)),
    ("experiment", "split"): (_parse_ints(3), ("split",)),
    ("experiment", "aux_count"): (int, ("aux_count",)),
    ("experiment", "aux_fraction"): (float, ("aux_fraction",)),
    ("session", "epochs"): (int, ("session", "epochs")),
    ("session", "batch_size"): (int, ("session", "batch_size")),
    ("session", "optimizer"): (str, ("session", "optimizer")),
    ("session", "lr"): (float, ("session", "lr")),
    ("session", "momentum"): (float, ("session", "momentum")),
    ("session", "transport"): (str, ("session", "transport")),
    ("session", "stealth_check"): (_parse_bool, ("session", "stealth_check")),
    ("trigger", "size"): (int, ("trigger", "size")),
    ("trigger", "corner"): (str, ("trigger", "corner")),
    ("trigger", "margin"): (int, ("trigger", "margin")),
    ("trigger", "value"): (float, ("trigger", "value")),
    ("trigger", "width"): (int, ("trigger", "width")),
    ("trigger", "target_class"): (int, ("trigger", "target_class")),
    ("surrogate", "arch"): (str, ("surrogate", "arch")),
    ("surrogate", "epochs"): (int, ("surrogate", "epochs")),
    ("surrogate", "lr"): (float, ("surrogate", "lr")),
    ("surrogate", "batch_size"): (int, ("surrogate", "batch_size")),
    ("cluster", "max_iters"): (int, ("cluster", "max_iters")),
    ("cluster", "tol"): (float, ("cluster", "tol")),
    ("cluster", "n_init"): (int, ("cluster", "n_init")),
    ("injection", "epochs"): (int, ("injection", "epochs")),
    ("injection", "lambda_fid"): (float, ("injection", "lambda_fid")),
    ("injection", "lambda_bd"): (float, ("injection", "lambda_bd")),
    ("injection", "lr"): (float, ("injection", "lr")),
    ("injection", "depth"): (int, ("injection", "depth")),
    ("injection", "window"): (_parse_ints(2), ("injection", "window")),
    ("injection", "overlay"): (str, ("injection", "overlay")),
    ("defense", "sigma"): (float, ("sigma",)),
}

# fields whose value must not alter the experiment identity
_FINGERPRINT_EXCLUDE = {("session", "transport")}


def _get(cfg, path):
    obj = cfg
    for name in path:
        obj = getattr(obj, name)
    return obj


def _set(cfg, path, value):
    obj = cfg
    for name in path[:-1]:
        obj = getattr(obj, name)
    setattr(obj, path[-1], value)


def _canonical_items(cfg):
    for (section, key), (_, path) in _SCHEMA.items():
        yield section, key, _fmt(_get(cfg, path))


def to_ini(cfg):
    """Canonical INI text for a config (full schema, fixed order)."""
    out = io.StringIO()
    out.write("# splitbd experiment configuration (desk-scale defaults)\n")
    current = None
    for section, key, value in _canonical_items(cfg):
        if section != current:
            if current is not None:
                out.write("\n")
            out.write(f"[{section}]\n")
            current = section
        out.write(f"{key} = {value}\n")
    return out.getvalue()


def from_ini(text):
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as e:
        raise ConfigurationError(f"cannot parse config: {e}")
    cfg = ExperimentConfig()
    for section in parser.sections():
        for key, raw in parser.items(section):
            spec = _SCHEMA.get((section, key))
            if spec is None:
                raise ConfigurationError(f"unknown config key [{section}] {key}")
            parse, path = spec
            try:
                _set(cfg, path, parse(raw))
            except (ValueError, ConfigurationError) as e:
                raise ConfigurationError(f"bad value for [{section}] {key}: {e}")
    validate_config(cfg)
    return cfg


def load_config(path):
    try:
        text = open(path).read()
    except OSError as e:
        raise ConfigurationError(f"cannot read config {path}: {e}")
    return from_ini(text)


def save_config(cfg, path):
    with open(path, "w") as f:
        f.write(to_ini(cfg))


def fingerprint(cfg):
    """sha256 over the canonical key/value lines, minus transport choice."""
    lines = [
        f"{section}.{key}={value}"
        for section, key, value in _canonical_items(cfg)
        if (section, key) not in _FINGERPRINT_EXCLUDE
    ]
    return hashlib.sha256("\n".join(lines).encode()).hexdigest()


def validate_config(cfg):
    if cfg.dataset not in dataset_names():
        raise ConfigurationError(f"unknown dataset {cfg.dataset!r}; known: {dataset_names()}")
    if cfg.arch not in arch_names():
        raise ConfigurationError(f"unknown architecture {cfg.arch!r}; known: {arch_names()}")
    if cfg.surrogate.arch not in surrogate_arch_names():
        raise ConfigurationError(
            f"unknown surrogate {cfg.surrogate.arch!r}; known: {surrogate_arch_names()}"
        )
    if cfg.session.optimizer not in ("sgd", "adam"):
        raise ConfigurationError(f"unknown optimizer {cfg.session.optimizer!r}")
    if cfg.session.transport not in ("inproc", "tcp"):
        raise ConfigurationError(f"unknown transport {cfg.session.transport!r}")
    if cfg.trigger.corner not in CORNERS:
        raise ConfigurationError(f"trigger corner must be one of {CORNERS}")
    if not 0 <= cfg.trigger.target_class < cfg.num_classes:
        raise ConfigurationError(
            f"target class {cfg.trigger.target_class} out of range for {cfg.dataset}"
        )
    if cfg.trigger.width < 1:
        raise ConfigurationError("trigger width must be >= 1")
    if cfg.aux_count < 0 or cfg.aux_fraction < 0:
        raise ConfigurationError("aux sizes cannot be negative")
    if cfg.sigma < 0:
        raise ConfigurationError("noise sigma cannot be negative")
    for name, value in (
        ("session.epochs", cfg.session.epochs),
        ("session.batch_size", cfg.session.batch_size),
        ("surrogate.epochs", cfg.surrogate.epochs),
        ("injection.epochs", cfg.injection.epochs),
        ("cluster.max_iters", cfg.cluster.max_iters),
        ("cluster.n_init", cfg.cluster.n_init),
    ):
        if value < 0 or (value == 0 and name not in ("surrogate.epochs",)):
            raise ConfigurationError(f"{name} must be positive, got {value}")
    lo, hi = cfg.injection.window
    if not (1 <= lo <= hi <= cfg.injection.epochs):
        raise ConfigurationError(
            f"snapshot window {cfg.injection.window} must sit inside "
            f"1..{cfg.injection.epochs}"
        )
    if cfg.injection.depth < 0:
        raise ConfigurationError("injection depth cannot be negative")
    if cfg.injection.overlay not in ("overwrite", "additive"):
        raise ConfigurationError(f"unknown overlay mode {cfg.injection.overlay!r}")
    return cfg
