"""Experiment configuration files.

Grammar: ``[section]`` headers and ``key = value`` lines; ``#`` starts a
comment. Sections and keys (defaults in parentheses)::

    [network]   dimensionality (3), num_classes (0 = take from manifest),
                base_channels (16), num_levels (4), variant (priornet),
                seed (0), csam_gate (raw), norm (instance)
    [train]     epochs (60), batch_size (2), lr_start (0.02), lr_end (1e-6),
                beta1 (0.9), beta2 (0.999), adam_eps (1e-8), seed (0),
                dice_eps (1e-5), dice_background (true), grad_clip (0),
                checkpoint_every (0), ablation_seeds (0, 1, 2), out_dir (runs)
    [data]      manifest (none), preprocess (none; comma list of truncate,
                zscore), window (-200, 250), crop (none), template_seed (0)
    [synthetic] any SyntheticSpec field, e.g. num_volumes, shape, noise_std

Relative paths are resolved against the config file's directory.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, fields
from pathlib import Path

from .data import Preprocessing, SyntheticSpec
from .errors import ConfigError
from .network import NetworkConfig
from .training import TrainConfig


def _bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _tuple(item):
    def parse(text: str):
        text = text.strip()
        if text.lower() in ("", "none"):
            return ()
        return tuple(item(x.strip()) for x in text.split(","))
    return parse


def _optional_str(text: str):
    return None if text.lower() in ("", "none") else text


def _schema_from(cls, overrides=None):
    out = {}
    for f in fields(cls):
        default = f.default
        if isinstance(default, bool):
            out[f.name] = (_bool, default)
        elif isinstance(default, int):
            out[f.name] = (int, default)
        elif isinstance(default, float):
            out[f.name] = (float, default)
        elif isinstance(default, str):
            out[f.name] = (str, default)
    out.update(overrides or {})
    return out


SCHEMA = {
    "network": _schema_from(NetworkConfig, {"num_classes": (int, 0)}),
    "train": _schema_from(TrainConfig, {
        "ablation_seeds": (_tuple(int), (0, 1, 2)),
        "out_dir": (str, "runs"),
    }),
    "data": {
        "manifest": (_optional_str, None),
        "preprocess": (_tuple(str), ()),
        "window": (_tuple(float), (-200.0, 250.0)),
        "crop": (_tuple(int), ()),
        "template_seed": (int, 0),
    },
    "synthetic": _schema_from(SyntheticSpec, {
        "shape": (_tuple(int), (32, 32, 32)),
        "class_means": (_tuple(float), ()),
        "class_stds": (_tuple(float), ()),
        "blobs_per_class": (_tuple(int), (1, 1)),
        "radius_range": (_tuple(float), (3.0, 5.5)),
    }),
}


@dataclass
class RunConfig:
    network: dict
    train: dict
    data: dict
    synthetic: dict
    source: Path | None = None
    present: set = field(default_factory=set)

    @property
    def base_dir(self) -> Path:
        return self.source.parent if self.source else Path.cwd()

    def resolve(self, path) -> Path:
        p = Path(path)
        return p if p.is_absolute() else Path(os.path.normpath(self.base_dir / p))

    def network_config(self, num_classes: int | None = None, **overrides) -> NetworkConfig:
        values = dict(self.network)
        if values["num_classes"] == 0:
            if num_classes is None:
                raise ConfigError("[network] num_classes is 0 and no manifest supplies it")
            values["num_classes"] = num_classes
        values.update(overrides)
        return NetworkConfig(**values)

    def train_config(self, **overrides) -> TrainConfig:
        values = {k: v for k, v in self.train.items() if k not in ("ablation_seeds", "out_dir")}
        values.update(overrides)
        return TrainConfig(**values)

    def preprocessing(self) -> Preprocessing:
        steps = tuple(s for s in self.data["preprocess"] if s != "none")
        window = self.data["window"]
        if len(window) != 2:
            raise ConfigError("[data] window needs two values: lo, hi")
        return Preprocessing(steps, tuple(window), self.data["crop"])

    def synthetic_spec(self, **overrides) -> SyntheticSpec:
        values = dict(self.synthetic)
        values.update(overrides)
        return SyntheticSpec(**values)

    def manifest_path(self) -> Path:
        if not self.data["manifest"]:
            raise ConfigError("[data] manifest is not set")
        return self.resolve(self.data["manifest"])

    def echo(self) -> str:
        """Fully resolved configuration in the same grammar."""
        lines = []
        for section in ("network", "train", "data", "synthetic"):
            if section == "synthetic" and not any(k.startswith("synthetic.") for k in self.present):
                continue
            lines.append(f"[{section}]")
            for key, value in getattr(self, section).items():
                if isinstance(value, tuple):
                    text = ", ".join(str(v) for v in value)
                elif isinstance(value, bool):
                    text = str(value).lower()
                else:
                    text = "none" if value is None else str(value)
                lines.append(f"{key} = {text}")
            lines.append("")
        return "\n".join(lines)


def parse_config_text(text: str, source: Path | None = None) -> RunConfig:
    where = str(source) if source else "<config>"
    values = {s: {k: d for k, (_, d) in keys.items()} for s, keys in SCHEMA.items()}
    present = set()
    section = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if section not in SCHEMA:
                raise ConfigError(f"{where}:{lineno}: unknown section [{section}]")
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep:
            raise ConfigError(f"{where}:{lineno}: expected 'key = value'")
        if section is None:
            raise ConfigError(f"{where}:{lineno}: key {key!r} outside of any section")
        if key not in SCHEMA[section]:
            raise ConfigError(f"{where}:{lineno}: unknown key {key!r} in [{section}]")
        parse, _ = SCHEMA[section][key]
        try:
            values[section][key] = parse(value)
        except ValueError as exc:
            raise ConfigError(f"{where}:{lineno}: bad value for {key}: {exc}") from None
        present.add(f"{section}.{key}")
    cfg = RunConfig(values["network"], values["train"], values["data"], values["synthetic"], source, present)
    # validate eagerly so errors point at the file
    net = dict(cfg.network)
    net["num_classes"] = net["num_classes"] or 1
    try:
        NetworkConfig(**net)
        cfg.train_config()
        cfg.preprocessing()
        if any(k.startswith("synthetic.") for k in present):
            cfg.synthetic_spec()
    except ConfigError as exc:
        line = _line_of(text, exc)
        raise ConfigError(f"{where}:{line}: {exc}" if line else f"{where}: {exc}") from None
    return cfg


def _line_of(text: str, exc: Exception) -> int | None:
    # best effort: the line whose key or value is named in the message
    message = str(exc)
    for lineno, raw in enumerate(text.splitlines(), start=1):
        key, sep, value = raw.split("#", 1)[0].partition("=")
        if sep and (value.strip() and value.strip() in message or key.strip() in message):
            return lineno
    return None


def parse_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    return parse_config_text(text, path)
