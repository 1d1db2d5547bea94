"""Experiment configuration: INI files plus dotted-key overrides.

Sections: [run] mode/seed/out_dir, [data] interaction and feature paths
plus split knobs, [graph] construction knobs, [train] optimization knobs,
[eval] report knobs. Every value has a default, so an empty file is a
valid configuration.
"""

from __future__ import annotations

import configparser
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .graphs import GraphConfig
from .training import TrainConfig


class ConfigError(ValueError):
    """Unreadable configuration or an unknown key."""


def _parse_bool(raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {raw!r}")


def _parse_features(raw: str) -> dict[str, str]:
    """Comma-separated modality=path pairs."""
    out: dict[str, str] = {}
    for part in raw.split(","):
        part = part.strip()
        if not part:
            continue
        if "=" not in part:
            raise ConfigError(f"feature spec {part!r} is not modality=path")
        mod, path = part.split("=", 1)
        mod, path = mod.strip(), path.strip()
        if not mod or not path:
            raise ConfigError(f"feature spec {part!r} is not modality=path")
        if mod in out:
            raise ConfigError(f"duplicate modality {mod!r} in features")
        out[mod] = path
    return out


def _parse_floats(raw: str) -> tuple[float, ...]:
    try:
        return tuple(float(x) for x in raw.split(",") if x.strip())
    except ValueError as e:
        raise ConfigError(f"expected comma-separated floats, got {raw!r}") from e


def _parse_ints(raw: str) -> tuple[int, ...]:
    try:
        return tuple(int(x) for x in raw.split(",") if x.strip())
    except ValueError as e:
        raise ConfigError(f"expected comma-separated ints, got {raw!r}") from e


@dataclass
class ExperimentConfig:
    """Everything one experiment run needs, with defaults throughout."""

    mode: str = "full"  # or "mf"
    seed: int = 0
    out_dir: str = "runs/exp"
    interactions: str = ""
    interactions_format: str = "csv"
    features: dict[str, str] = field(default_factory=dict)
    ratios: tuple[float, float, float] = (0.8, 0.1, 0.1)
    min_train_count: int = 0  # 0 keeps cold flags empty
    max_missing: int = 0
    graph: GraphConfig = field(default_factory=GraphConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    ks: tuple[int, ...] = (5, 10, 15)
    eval_which: str = "test"

    def __post_init__(self):
        if self.mode not in ("full", "mf"):
            raise ConfigError(f"mode must be full|mf, got {self.mode!r}")
        if self.interactions_format not in ("csv", "event_log"):
            raise ConfigError(
                f"interactions_format must be csv|event_log, got {self.interactions_format!r}"
            )
        if self.eval_which not in ("test", "validation"):
            raise ConfigError(f"eval_which must be test|validation, got {self.eval_which!r}")
        if len(self.ratios) != 3:
            raise ConfigError(f"ratios must be three values, got {self.ratios}")
        if not self.ks or any(k < 1 for k in self.ks):
            raise ConfigError(f"ks must be positive ints, got {self.ks}")
        if self.min_train_count < 0 or self.max_missing < 0:
            raise ConfigError("min_train_count and max_missing must be >= 0")

    def to_dict(self) -> dict:
        return {
            "run": {"mode": self.mode, "seed": self.seed, "out_dir": self.out_dir},
            "data": {
                "interactions": self.interactions,
                "format": self.interactions_format,
                "features": dict(self.features),
                "ratios": list(self.ratios),
                "min_train_count": self.min_train_count,
                "max_missing": self.max_missing,
            },
            "graph": {
                "k": self.graph.k,
                "sigma": self.graph.sigma,
                "chunk_rows": self.graph.chunk_rows,
                "learned_graph": self.graph.learned_graph,
                "relearn_every": self.graph.relearn_every,
                "rounds": self.graph.rounds,
            },
            "train": {
                "embedding_dim": self.train.embedding_dim,
                "transform_dim": self.train.transform_dim,
                "n_layers": self.train.n_layers,
                "learning_rate": self.train.learning_rate,
                "batch_size": self.train.batch_size,
                "epochs": self.train.epochs,
                "l2_reg": self.train.l2_reg,
                "seed": self.train.seed,
                "negatives_per_positive": self.train.negatives_per_positive,
                "optimizer": self.train.optimizer,
                "patience": self.train.patience,
                "val_k": self.train.val_k,
            },
            "eval": {"ks": list(self.ks), "which": self.eval_which},
        }

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()


_PARSERS = {
    ("run", "mode"): str,
    ("run", "seed"): int,
    ("run", "out_dir"): str,
    ("data", "interactions"): str,
    ("data", "format"): str,
    ("data", "features"): _parse_features,
    ("data", "ratios"): _parse_floats,
    ("data", "min_train_count"): int,
    ("data", "max_missing"): int,
    ("graph", "k"): int,
    ("graph", "sigma"): float,
    ("graph", "chunk_rows"): int,
    ("graph", "learned_graph"): _parse_bool,
    ("graph", "relearn_every"): int,
    ("graph", "rounds"): int,
    ("train", "embedding_dim"): int,
    ("train", "transform_dim"): int,
    ("train", "n_layers"): int,
    ("train", "learning_rate"): float,
    ("train", "batch_size"): int,
    ("train", "epochs"): int,
    ("train", "l2_reg"): float,
    ("train", "seed"): int,
    ("train", "negatives_per_positive"): int,
    ("train", "optimizer"): str,
    ("train", "patience"): int,
    ("train", "val_k"): int,
    ("eval", "ks"): _parse_ints,
    ("eval", "which"): str,
}


def load_config(
    path: str | Path | None = None, overrides: list[str] | None = None
) -> ExperimentConfig:
    """Build an ExperimentConfig from an INI file and section.key=value
    overrides; overrides win. Unknown sections or keys are errors."""
    values: dict[tuple[str, str], object] = {}
    if path is not None:
        parser = configparser.ConfigParser()
        try:
            with open(path, encoding="utf-8") as fh:
                parser.read_file(fh)
        except OSError as e:
            raise ConfigError(f"{path}: cannot read config ({e})") from e
        except configparser.Error as e:
            raise ConfigError(f"{path}: invalid INI ({e})") from e
        for section in parser.sections():
            for key, raw in parser.items(section):
                values[(section, key)] = _convert(section, key, raw)
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not section.key=value")
        dotted, raw = item.split("=", 1)
        if "." not in dotted:
            raise ConfigError(f"override {item!r} is not section.key=value")
        section, key = dotted.split(".", 1)
        values[(section.strip(), key.strip())] = _convert(section.strip(), key.strip(), raw)
    return _build(values)


def _convert(section: str, key: str, raw: str) -> object:
    parser = _PARSERS.get((section, key))
    if parser is None:
        raise ConfigError(f"unknown config key [{section}] {key}")
    try:
        return parser(raw)
    except ConfigError:
        raise
    except ValueError as e:
        raise ConfigError(f"bad value for [{section}] {key}: {raw!r}") from e


def _build(values: dict[tuple[str, str], object]) -> ExperimentConfig:
    def take(section: str, key: str, default):
        return values.get((section, key), default)

    try:
        graph = GraphConfig(
            k=take("graph", "k", 10),
            sigma=take("graph", "sigma", 0.7),
            chunk_rows=take("graph", "chunk_rows", 1024),
            learned_graph=take("graph", "learned_graph", True),
            relearn_every=take("graph", "relearn_every", 1),
            rounds=take("graph", "rounds", 1),
        )
        train = TrainConfig(
            embedding_dim=take("train", "embedding_dim", 64),
            transform_dim=take("train", "transform_dim", 64),
            n_layers=take("train", "n_layers", 2),
            learning_rate=take("train", "learning_rate", 1e-3),
            batch_size=take("train", "batch_size", 512),
            epochs=take("train", "epochs", 100),
            l2_reg=take("train", "l2_reg", 1e-4),
            seed=take("train", "seed", take("run", "seed", 0)),
            negatives_per_positive=take("train", "negatives_per_positive", 1),
            optimizer=take("train", "optimizer", "adaptive-moment"),
            patience=take("train", "patience", 10),
            val_k=take("train", "val_k", 20),
        )
        ratios = tuple(take("data", "ratios", (0.8, 0.1, 0.1)))
        if len(ratios) != 3:
            raise ConfigError(f"ratios must be three values, got {ratios}")
        return ExperimentConfig(
            mode=take("run", "mode", "full"),
            seed=take("run", "seed", 0),
            out_dir=take("run", "out_dir", "runs/exp"),
            interactions=take("data", "interactions", ""),
            interactions_format=take("data", "format", "csv"),
            features=dict(take("data", "features", {})),
            ratios=ratios,  # type: ignore[arg-type]
            min_train_count=take("data", "min_train_count", 0),
            max_missing=take("data", "max_missing", 0),
            graph=graph,
            train=train,
            ks=tuple(take("eval", "ks", (5, 10, 15))),
            eval_which=take("eval", "which", "test"),
        )
    except ConfigError:
        raise
    except ValueError as e:
        raise ConfigError(str(e)) from e
