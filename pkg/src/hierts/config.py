"""Run configuration: key=value sections, defaults, and overrides.

The config file is INI-style. Every key has a default, unknown sections
or keys are rejected, and any key can be overridden on the command line
with `--set section.key=value`. `dump` emits the canonical document, so
dump -> load -> dump is the identity.
"""

from __future__ import annotations

import configparser
import io
from pathlib import Path
from typing import Callable

from .forecaster import ModelConfig
from .reconciler import LossWeights
from .selector import AnnealSchedule
from .training import TrainConfig


def _parse_bool(s: str) -> bool:
    low = s.strip().lower()
    if low in ("true", "1", "yes"):
        return True
    if low in ("false", "0", "no"):
        return False
    raise ValueError(f"expected a boolean, got {s!r}")


def _parse_floats(s: str) -> tuple[float, ...]:
    return tuple(float(v) for v in s.split(",") if v.strip())


def _parse_ints(s: str) -> tuple[int, ...]:
    return tuple(int(v) for v in s.split(",") if v.strip())


def _parse_sizes(s: str) -> tuple:
    out = []
    for item in s.split(","):
        item = item.strip()
        if not item:
            continue
        out.append("auto" if item == "auto" else int(item))
    if not out:
        raise ValueError("hierarchy level_sizes cannot be empty")
    return tuple(out)


# section -> key -> (default string, parser)
SCHEMA: dict[str, dict[str, tuple[str, Callable]]] = {
    "dataset": {
        "path": ("", str),
    },
    "hierarchy": {
        "level_sizes": ("auto,20,1", _parse_sizes),
    },
    "model": {
        "window": ("12", int),
        "horizon": ("4", int),
        "hidden_size": ("32", int),
        "embed_size": ("16", int),
        "mp_layers": ("2", int),
        "scheme": ("gconv", str),
        "diffusion_order": ("2", int),
        "share_encoders": ("false", _parse_bool),
        "intra_level_base_only": ("true", _parse_bool),
        "mu_residual": ("false", _parse_bool),
        "decoder_hidden_layers": ("1", int),
    },
    "training": {
        "batch_size": ("64", int),
        "max_epochs": ("200", int),
        "batches_per_epoch": ("300", int),
        "lr": ("0.003", float),
        "lr_decay_factor": ("0.25", float),
        "lr_decay_every": ("50", int),
        "patience": ("20", int),
        "seed": ("0", int),
        "split": ("0.7,0.1,0.2", _parse_floats),
        "standardize": ("true", _parse_bool),
        "mae_steps": ("", _parse_ints),
    },
    "loss": {
        "p": ("1", int),
        "lambda": ("0.25", float),
        "mincut_weight": ("1.0", float),
        "mode": ("auto", str),
    },
    "selector": {
        "tau0": ("1.0", float),
        "anneal_rate": ("0.999", float),
        "tau_floor": ("0.05", float),
    },
    "output": {
        "dir": ("runs/latest", str),
    },
}


class ConfigError(ValueError):
    pass


class RunConfig:
    """Validated configuration document with typed accessors."""

    def __init__(self, raw: dict[str, dict[str, str]] | None = None):
        self.raw = {section: {key: default for key, (default, _) in keys.items()}
                    for section, keys in SCHEMA.items()}
        if raw:
            for section, keys in raw.items():
                for key, value in keys.items():
                    self.set(section, key, value)

    @classmethod
    def load(cls, path) -> "RunConfig":
        parser = configparser.ConfigParser()
        parser.optionxform = str
        read = parser.read(str(path))
        if not read:
            raise ConfigError(f"cannot read config file {path}")
        raw = {s: dict(parser.items(s)) for s in parser.sections()}
        return cls(raw)

    def set(self, section: str, key: str, value: str) -> None:
        if section not in SCHEMA:
            raise ConfigError(f"unknown config section [{section}]")
        if key not in SCHEMA[section]:
            raise ConfigError(f"unknown key {key!r} in section [{section}]")
        _, parse = SCHEMA[section][key]
        try:
            parse(str(value))
        except ValueError as exc:
            raise ConfigError(f"bad value for {section}.{key}: {exc}") from None
        self.raw[section][key] = str(value)

    def apply_overrides(self, overrides) -> None:
        """Apply `section.key=value` strings."""
        for item in overrides:
            if "=" not in item or "." not in item.split("=", 1)[0]:
                raise ConfigError(f"override must look like section.key=value, got {item!r}")
            dotted, value = item.split("=", 1)
            section, key = dotted.split(".", 1)
            self.set(section.strip(), key.strip(), value.strip())

    def get(self, section: str, key: str):
        _, parse = SCHEMA[section][key]
        return parse(self.raw[section][key])

    def dump(self) -> str:
        buf = io.StringIO()
        for i, (section, keys) in enumerate(SCHEMA.items()):
            if i:
                buf.write("\n")
            buf.write(f"[{section}]\n")
            for key in keys:
                buf.write(f"{key} = {self.raw[section][key]}\n")
        return buf.getvalue()

    def save(self, path) -> None:
        Path(path).write_text(self.dump())

    # typed views over the document
    def level_sizes(self, n_nodes: int) -> list[int]:
        sizes = [n_nodes if s == "auto" else int(s) for s in self.get("hierarchy", "level_sizes")]
        if sizes[0] != n_nodes:
            raise ConfigError(f"hierarchy bottom size {sizes[0]} != dataset node count {n_nodes}")
        return sizes

    def model_config(self, n_nodes: int) -> ModelConfig:
        m = self.raw["model"]
        return ModelConfig(
            window=self.get("model", "window"),
            horizon=self.get("model", "horizon"),
            levels=len(self.level_sizes(n_nodes)) - 1,
            hidden_size=self.get("model", "hidden_size"),
            embed_size=self.get("model", "embed_size"),
            mp_layers=self.get("model", "mp_layers"),
            scheme=m["scheme"],
            diffusion_order=self.get("model", "diffusion_order"),
            share_encoders=self.get("model", "share_encoders"),
            intra_level_base_only=self.get("model", "intra_level_base_only"),
            mu_residual=self.get("model", "mu_residual"),
            decoder_hidden_layers=self.get("model", "decoder_hidden_layers"),
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            batch_size=self.get("training", "batch_size"),
            max_epochs=self.get("training", "max_epochs"),
            batches_per_epoch=self.get("training", "batches_per_epoch"),
            lr=self.get("training", "lr"),
            lr_decay_factor=self.get("training", "lr_decay_factor"),
            lr_decay_every=self.get("training", "lr_decay_every"),
            patience=self.get("training", "patience"),
            seed=self.get("training", "seed"),
            split=self.get("training", "split"),
            standardize=self.get("training", "standardize"),
            mae_steps=self.get("training", "mae_steps"),
        )

    def loss_weights(self) -> LossWeights:
        return LossWeights(
            lam=self.get("loss", "lambda"),
            p=self.get("loss", "p"),
            mincut_weight=self.get("loss", "mincut_weight"),
            mode=self.raw["loss"]["mode"],
        )

    def anneal(self) -> AnnealSchedule:
        return AnnealSchedule(
            tau0=self.get("selector", "tau0"),
            rate=self.get("selector", "anneal_rate"),
            floor=self.get("selector", "tau_floor"),
        )


def default_config() -> RunConfig:
    return RunConfig()
