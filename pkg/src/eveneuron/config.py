"""Plain-text (INI) run and sweep configuration.

Sections mirror the config dataclasses: ``[data]``, ``[layer]``, ``[control]``,
``[ar]``, ``[optim]``, ``[train]`` and, for sweeps, ``[sweep]``. Every key is
optional; unknown sections or keys are errors that name the offending line.
"""
from __future__ import annotations

import configparser
import re
from dataclasses import MISSING, dataclass, field, fields
from pathlib import Path

import numpy as np

from .control import ControlConfig
from .data import (Dataset, load_csv, series_dataset, standardize, synth_ar_sequence,
                   synth_tabular, tabular_dataset)
from .layer import LayerConfig
from .numkernel import Rng
from .temporal import ARConfig
from .trainer import OptimConfig, TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataSpec:
    source: str = "synthetic_tabular"  # synthetic_tabular | synthetic_ar | csv_tabular | csv_series
    path: str = ""
    target: str = ""  # column name or 0-based index; default last column
    header: bool = True
    name: str = ""
    seed: int = 0
    standardize: bool = True
    n: int = 512
    d: int = 8
    noise: float = 0.1
    noise_kind: str = "homoscedastic"
    T: int = 2000
    phi_true: float = 0.8
    seq_len: int = 24
    stride: int = 1
    lags: int = 4


@dataclass
class SweepSpec:
    k_values: list = field(default_factory=lambda: [1, 2, 4, 8, 16])
    regimes: list = field(default_factory=lambda: ["homeo", "projOFF", "projON"])
    ar_flags: list = field(default_factory=lambda: [False])
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    base_seed: int = 0

    def __post_init__(self):
        if not (self.k_values and self.regimes and self.ar_flags and self.seeds):
            raise ValueError("sweep lists must be non-empty")


@dataclass
class RunSpec:
    train: TrainConfig
    data: DataSpec
    sweep: SweepSpec | None = None
    layer_values: dict = field(default_factory=dict)  # [layer] keys, applied once d is known


_SECTIONS = {
    "data": DataSpec, "layer": LayerConfig, "control": ControlConfig, "ar": ARConfig,
    "optim": OptimConfig, "train": TrainConfig, "sweep": SweepSpec,
}
_NESTED = {"layer", "control", "ar", "optim"}
_LIST_ITEM = {"seeds": int, "k_values": int, "regimes": str, "ar_flags": "bool"}


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _default(f):
    if f.default is not MISSING:
        return f.default
    if f.default_factory is not MISSING:
        return f.default_factory()
    return None


def _convert(name: str, default, text: str):
    text = text.strip()
    if name in _LIST_ITEM:
        item = _LIST_ITEM[name]
        parts = [p for p in re.split(r"[,\s]+", text) if p]
        return [_parse_bool(p) if item == "bool" else item(p) for p in parts]
    if isinstance(default, bool):
        return _parse_bool(text)
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    if default is None:
        return None if text.lower() in ("", "none", "auto") else float(text)
    return text


def _line_index(text: str) -> dict:
    where, section = {}, None
    for no, line in enumerate(text.splitlines(), start=1):
        s = line.strip()
        m = re.match(r"^\[([^\]]+)\]$", s)
        if m:
            section = m.group(1).strip()
            where[(section, None)] = no
            continue
        m = re.match(r"^([^=:#;\s][^=:]*?)\s*[=:]", s)
        if m and section is not None:
            where[(section, m.group(1).strip())] = no
    return where


def parse_config(text: str, source: str = "<config>") -> RunSpec:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from None
    lines = _line_index(text)
    values: dict[str, dict] = {}
    for section in cp.sections():
        if section not in _SECTIONS:
            raise ConfigError(f"{source}: unknown section [{section}] (line {lines.get((section, None), '?')})")
        known = {f.name: f for f in fields(_SECTIONS[section]) if f.name not in _NESTED}
        values[section] = {}
        for key, raw in cp.items(section):
            line = lines.get((section, key), "?")
            if key not in known:
                raise ConfigError(f"{source}: unknown key '{key}' in [{section}] (line {line})")
            try:
                values[section][key] = _convert(key, _default(known[key]), raw)
            except ValueError as exc:
                raise ConfigError(f"{source}: bad value for '{key}' in [{section}] (line {line}): {exc}") from None

    def build(section, **extra):
        try:
            return _SECTIONS[section](**values.get(section, {}), **extra)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{source}: invalid [{section}] settings: {exc}") from None

    layer_vals = values.get("layer", {})
    # d comes from the dataset unless given; validate the rest now
    build("layer", **({} if "d" in layer_vals else {"d": 1}))
    train = build("train", layer=LayerConfig(), control=build("control"), ar=build("ar"),
                  optim=build("optim"))
    sweep = build("sweep") if "sweep" in values else None
    return RunSpec(train=train, data=build("data"), sweep=sweep, layer_values=layer_vals)


def load_config(path) -> RunSpec:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_config(path.read_text(), str(path))


def resolve_layer(spec: RunSpec, d: int, **overrides) -> TrainConfig:
    """TrainConfig whose layer takes its input width from the dataset."""
    from dataclasses import replace
    vals = dict(spec.layer_values, **overrides)
    if vals.get("d", d) != d:
        raise ConfigError(f"[layer] d = {vals['d']} but the dataset has {d} features")
    vals["d"] = d
    try:
        layer = LayerConfig(**vals)
    except ValueError as exc:
        raise ConfigError(f"invalid [layer] settings: {exc}") from None
    return replace(spec.train, layer=layer)


def build_dataset(spec: DataSpec) -> Dataset:
    rng = Rng(spec.seed)
    if spec.source == "synthetic_tabular":
        X, y, _ = synth_tabular(rng.derive("data"), spec.n, spec.d, spec.noise_kind, spec.noise)
        ds = tabular_dataset(X, y, rng.derive("split"), name=spec.name or "synthetic_tabular")
    elif spec.source == "synthetic_ar":
        s, _ = synth_ar_sequence(rng.derive("data"), spec.T, spec.phi_true, spec.noise)
        ds = series_dataset(s, 0, spec.seq_len, spec.stride, spec.lags,
                            name=spec.name or "synthetic_ar")
    elif spec.source in ("csv_tabular", "csv_series"):
        if not spec.path:
            raise ConfigError("[data] path is required for CSV sources")
        target = spec.target or None
        X, y, fnames, tnames = load_csv(spec.path, target, spec.header)
        if y.ndim != 1:
            raise ConfigError("exactly one target column is supported")
        name = spec.name or Path(spec.path).stem
        if spec.source == "csv_tabular":
            ds = tabular_dataset(X, y, rng.derive("split"), name=name, columns=fnames)
        else:
            values = np.column_stack([X, y])
            ds = series_dataset(values, -1, spec.seq_len, spec.stride, spec.lags, name=name,
                                columns=tuple(fnames) + tuple(tnames))
    else:
        raise ConfigError(f"unknown data source {spec.source!r}")
    return standardize(ds) if spec.standardize else ds
