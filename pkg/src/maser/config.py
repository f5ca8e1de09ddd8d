"""Experiment configuration.

Files are INI-style (``[section]`` headers, ``key = value`` lines, ``#`` or
``;`` comments) or JSON objects with the same section/key nesting. Unknown
sections and keys are rejected. Environment variables named
``MASER_<SECTION>_<KEY>`` (upper case) override file values.

Sections and keys::

    [experiment]  m, rounds, kappa, seed, partition (iid|dirichlet), alpha,
                  allow_malicious_majority
    [data]        source (synthetic|idx), images, labels, test_images,
                  test_labels, train_size, test_size, samples, features,
                  classes, separation, noise
    [model]       hidden (comma-separated widths, may be empty), bias
    [train]       lr, local_epochs, batch_size, mu, optimizer
    [scheme]      n, q, delta_bits, sigma_err, sigma_flood
    [transport]   kind (sim|tcp), host, port, timeout, max_frame
    [malicious]   <client id> = random_mask | all_ones_mask | inverted_mask
"""

from __future__ import annotations

import configparser
import dataclasses
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

from . import mkhe, ring
from .errors import ConfigError, ParameterError
from .model import Architecture, TrainConfig
from .protocol.messages import DEFAULT_MAX_FRAME

BEHAVIORS = ("random_mask", "all_ones_mask", "inverted_mask")


@dataclass(frozen=True)
class DataConfig:
    source: str = "synthetic"
    images: str = ""
    labels: str = ""
    test_images: str = ""
    test_labels: str = ""
    train_size: int = 0
    test_size: int = 1000
    samples: int = 1000
    features: int = 20
    classes: int = 2
    separation: float = 3.0
    noise: float = 1.0


@dataclass(frozen=True)
class SchemeConfig:
    n: int = 8192
    q: int = ring.DEFAULT_Q
    delta_bits: int = 40
    sigma_err: float = ring.DEFAULT_SIGMA_ERR
    sigma_flood: float = ring.DEFAULT_SIGMA_ERR * ring.DEFAULT_FLOOD_FACTOR

    def reference(self, seed: int) -> mkhe.CommonReference:
        return mkhe.setup(self.n, self.q, 2**self.delta_bits, self.sigma_err, self.sigma_flood, seed)


@dataclass(frozen=True)
class TransportConfig:
    kind: str = "sim"
    host: str = "127.0.0.1"
    port: int = 7878
    timeout: float = 300.0
    max_frame: int = DEFAULT_MAX_FRAME


@dataclass(frozen=True)
class ExperimentConfig:
    m: int = 5
    rounds: int = 25
    kappa: float = 0.1
    seed: int = 0
    partition: str = "iid"
    alpha: float = 1.0
    allow_malicious_majority: bool = False
    hidden: tuple = (64,)
    bias: bool = True
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    scheme: SchemeConfig = field(default_factory=SchemeConfig)
    transport: TransportConfig = field(default_factory=TransportConfig)
    malicious: tuple = ()  # (client id, behavior) pairs, sorted by id

    def __post_init__(self):
        validate(self)

    def architecture(self, features: int, classes: int) -> Architecture:
        return Architecture((features, *self.hidden, classes), bias=self.bias)

    def behavior_of(self, cid: int) -> str | None:
        return dict(self.malicious).get(cid)

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)


# --------------------------------------------------------------------------
# validation
# --------------------------------------------------------------------------


def validate(cfg: ExperimentConfig) -> None:
    if cfg.m < 1:
        raise ConfigError("experiment.m", "need at least one client")
    if cfg.rounds < 1:
        raise ConfigError("experiment.rounds", "need at least one round")
    if not 0 < cfg.kappa <= 1:
        raise ConfigError("experiment.kappa", f"must be in (0, 1], got {cfg.kappa}")
    if cfg.partition not in ("iid", "dirichlet"):
        raise ConfigError("experiment.partition", f"unknown mode {cfg.partition!r}")
    if not cfg.alpha > 0:
        raise ConfigError("experiment.alpha", "must be > 0")
    if any(h < 1 for h in cfg.hidden):
        raise ConfigError("model.hidden", "layer widths must be positive")
    d = cfg.data
    if d.source not in ("synthetic", "idx"):
        raise ConfigError("data.source", f"unknown source {d.source!r}")
    if d.source == "idx" and not (d.images and d.labels):
        raise ConfigError("data.images", "idx source needs images and labels paths")
    if bool(d.test_images) != bool(d.test_labels):
        raise ConfigError("data.test_images", "test_images and test_labels go together")
    if d.train_size < 0 or d.test_size < 0:
        raise ConfigError("data.train_size", "sizes must be >= 0")
    if d.classes < 2 or d.features < 1 or d.samples < 1:
        raise ConfigError("data.classes", "synthetic data needs >= 2 classes, >= 1 feature and sample")
    try:
        _check_scheme(cfg.scheme)
    except ParameterError as exc:
        raise ConfigError("scheme", str(exc)) from exc
    t = cfg.transport
    if t.kind not in ("sim", "tcp"):
        raise ConfigError("transport.kind", f"unknown transport {t.kind!r}")
    if not 0 <= t.port < 65536:
        raise ConfigError("transport.port", "out of range")
    if not t.timeout > 0:
        raise ConfigError("transport.timeout", "must be > 0")
    ids = [cid for cid, _ in cfg.malicious]
    if len(set(ids)) != len(ids):
        raise ConfigError("malicious", "client listed twice")
    for cid, behavior in cfg.malicious:
        if not 0 <= cid < cfg.m:
            raise ConfigError(f"malicious.{cid}", f"client id outside [0, {cfg.m})")
        if behavior not in BEHAVIORS:
            raise ConfigError(f"malicious.{cid}", f"unknown behavior {behavior!r}")
    if len(ids) >= math.ceil(cfg.m / 2) and not cfg.allow_malicious_majority:
        raise ConfigError(
            "malicious",
            f"{len(ids)} malicious of {cfg.m} clients is not an honest majority "
            "(set experiment.allow_malicious_majority to override)",
        )


def _check_scheme(s: SchemeConfig) -> None:
    rp = ring.RingParams(n=s.n, q=s.q, sigma_err=s.sigma_err, sigma_flood=s.sigma_flood)
    mkhe.SchemeParams(ring=rp, delta=2**s.delta_bits)


# --------------------------------------------------------------------------
# parsing
# --------------------------------------------------------------------------


def _bool(text: str) -> bool:
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _int(text) -> int:
    if isinstance(text, bool):
        raise ValueError("boolean where an integer was expected")
    if isinstance(text, int):
        return text
    return int(str(text).strip(), 0)


def _hidden(text) -> tuple:
    if isinstance(text, (list, tuple)):
        return tuple(_int(v) for v in text)
    parts = [p.strip() for p in str(text).split(",")]
    return tuple(int(p) for p in parts if p)


_SCHEMA = {
    "experiment": {
        "m": _int,
        "rounds": _int,
        "kappa": float,
        "seed": _int,
        "partition": str,
        "alpha": float,
        "allow_malicious_majority": _bool,
    },
    "data": {
        "source": str,
        "images": str,
        "labels": str,
        "test_images": str,
        "test_labels": str,
        "train_size": _int,
        "test_size": _int,
        "samples": _int,
        "features": _int,
        "classes": _int,
        "separation": float,
        "noise": float,
    },
    "model": {"hidden": _hidden, "bias": _bool},
    "train": {"lr": float, "local_epochs": _int, "batch_size": _int, "mu": float, "optimizer": str},
    "scheme": {"n": _int, "q": _int, "delta_bits": _int, "sigma_err": float, "sigma_flood": float},
    "transport": {"kind": str, "host": str, "port": _int, "timeout": float, "max_frame": _int},
}


def _raw_sections(path: Path) -> dict[str, dict[str, object]]:
    text = path.read_text()
    if path.suffix.lower() == ".json" or text.lstrip().startswith("{"):
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError("<file>", f"invalid JSON: {exc}") from exc
        if not isinstance(data, dict) or not all(isinstance(v, dict) for v in data.values()):
            raise ConfigError("<file>", "JSON config must map section names to objects")
        return {s: dict(v) for s, v in data.items()}
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(text, source=str(path))
    except configparser.Error as exc:
        raise ConfigError("<file>", f"parse error: {exc}") from exc
    return {s: dict(parser.items(s)) for s in parser.sections()}


def _env_overrides(sections: dict, environ) -> None:
    for name, value in environ.items():
        if not name.startswith("MASER_"):
            continue
        rest = name[len("MASER_"):].lower()
        for section in list(_SCHEMA) + ["malicious"]:
            if rest.startswith(section + "_"):
                sections.setdefault(section, {})[rest[len(section) + 1 :]] = value
                break


def build_config(sections: dict[str, dict[str, object]]) -> ExperimentConfig:
    """Validate raw ``{section: {key: value}}`` data into an ExperimentConfig."""
    converted: dict[str, dict] = {}
    for section, items in sections.items():
        if section == "malicious":
            continue
        if section not in _SCHEMA:
            raise ConfigError(section, "unknown section")
        for key, raw in items.items():
            if key not in _SCHEMA[section]:
                raise ConfigError(f"{section}.{key}", "unknown key")
            try:
                converted.setdefault(section, {})[key] = _SCHEMA[section][key](raw)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"{section}.{key}", f"bad value {raw!r}: {exc}") from exc

    malicious = []
    for key, raw in sections.get("malicious", {}).items():
        try:
            cid = int(key)
        except ValueError:
            raise ConfigError(f"malicious.{key}", "key must be a client id") from None
        malicious.append((cid, str(raw).strip()))

    top = dict(converted.get("experiment", {}))
    top.update(converted.get("model", {}))
    try:
        return ExperimentConfig(
            **top,
            data=DataConfig(**converted.get("data", {})),
            train=TrainConfig(**converted.get("train", {})),
            scheme=SchemeConfig(**converted.get("scheme", {})),
            transport=TransportConfig(**converted.get("transport", {})),
            malicious=tuple(sorted(malicious)),
        )
    except ConfigError:
        raise
    except ParameterError as exc:
        raise ConfigError("scheme", str(exc)) from exc


def parse_config(path, environ=None) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError("<file>", f"{path} does not exist")
    sections = _raw_sections(path)
    _env_overrides(sections, os.environ if environ is None else environ)
    return build_config(sections)


def config_items(cfg: ExperimentConfig) -> list[tuple[str, str]]:
    """Every accepted setting as (dotted key, text) pairs, for report headers."""
    out = []
    for key in _SCHEMA["experiment"]:
        out.append((f"experiment.{key}", str(getattr(cfg, key))))
    out.append(("model.hidden", ",".join(str(h) for h in cfg.hidden)))
    out.append(("model.bias", str(cfg.bias)))
    for section, obj in (("data", cfg.data), ("train", cfg.train), ("scheme", cfg.scheme), ("transport", cfg.transport)):
        for key in _SCHEMA[section]:
            out.append((f"{section}.{key}", str(getattr(obj, key))))
    for cid, behavior in cfg.malicious:
        out.append((f"malicious.{cid}", behavior))
    return out
