"""Flat ``key = value`` run configuration with dotted section prefixes.

Lines look like ``train.alpha_x = 1.0``; ``#`` starts a comment. Lists are
comma separated. Every key must appear in :data:`SCHEMA`; anything else is a
:class:`ConfigError`.
"""
from __future__ import annotations

import dataclasses
from pathlib import Path
from typing import Callable, Mapping

from .training import SEARCH_GRID, TrainConfig


class ConfigError(ValueError):
    pass


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _floats(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x.strip()]


def _ints(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x.strip()]


def _str(text: str) -> str:
    return text.strip()


def _choice(*options: str) -> Callable[[str], str]:
    def parse(text: str) -> str:
        value = text.strip()
        if value not in options:
            raise ValueError(f"expected one of {', '.join(options)}; got {value!r}")
        return value
    return parse


def _scalar_for(default) -> Callable[[str], object]:
    if isinstance(default, bool):
        return _bool
    if isinstance(default, int):
        return int
    if isinstance(default, float):
        return float
    return _str


_TRAIN = {f"train.{f.name}": _scalar_for(f.default) for f in dataclasses.fields(TrainConfig)
          if f.name not in ("variant", "seed")}
_TRAIN["train.kl_mode"] = _choice("routed", "all")
_TRAIN["train.head"] = _choice("gaussian", "bernoulli")

SCHEMA: dict[str, Callable[[str], object]] = {
    "seed": int,
    "variant": _choice("rnf", "vrnf-kf", "vrnf-nn"),
    "out": _str,
    **_TRAIN,
    "data.train": _str,
    "data.valid": _str,
    "data.test": _str,
    "data.path": _str,
    "data.format": _choice("trajectory", "electricity", "quotes"),
    "data.split": _floats,
    "data.normalize": _choice("none", "zscore", "minmax", "ewm"),
    "model.checkpoint": _str,
    "eval.tau": _ints,
    "eval.input_mode": _choice("known", "unknown", "both"),
    "eval.level": float,
    "eval.predictions": _str,
    "search.iterations": int,
    "lgssm.state_dim": int,
    "lgssm.input_dim": int,
    "lgssm.obs_dim": int,
    "lgssm.T": int,
    **{f"lgssm.{k}": _floats for k in ("A", "B", "H", "Q", "R", "c", "D", "x0_mean", "x0_cov")},
    **{f"search.grid.{k}": _floats for k in SEARCH_GRID},
}

DEFAULTS: dict[str, str] = {
    "seed": "0",
    "variant": "rnf",
    "out": ".",
    "data.format": "trajectory",
    "data.split": "0.6, 0.2, 0.2",
    "data.normalize": "none",
    "eval.tau": "1",
    "eval.input_mode": "both",
    "eval.level": "0.9",
    "search.iterations": "50",
}


def parse_text(text: str, source: str = "<config>") -> dict[str, str]:
    """Raw ``key -> text`` pairs; later duplicates are an error."""
    raw: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in raw:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        raw[key] = value
    return raw


class RunConfig:
    """Resolved settings: defaults, then the file, then command-line overrides."""

    def __init__(self, raw: Mapping[str, str] | None = None):
        self.raw = dict(DEFAULTS)
        self.values: dict[str, object] = {}
        self.update(raw or {})

    @classmethod
    def load(cls, path: str | Path | None, overrides: Mapping[str, str] | None = None) -> "RunConfig":
        raw = {}
        if path is not None:
            try:
                text = Path(path).read_text()
            except OSError as exc:
                raise ConfigError(f"cannot read config {path}: {exc}") from exc
            raw = parse_text(text, str(path))
        cfg = cls(raw)
        cfg.update(overrides or {})
        return cfg

    def update(self, raw: Mapping[str, str]) -> None:
        for key, text in raw.items():
            if key not in SCHEMA:
                raise ConfigError(f"unknown key {key!r}")
            try:
                self.values[key] = SCHEMA[key](text)
            except ValueError as exc:
                raise ConfigError(f"{key}: {exc}") from exc
            self.raw[key] = str(text)
        for key, text in self.raw.items():
            if key not in self.values:
                self.values[key] = SCHEMA[key](text)

    def get(self, key: str, default=None):
        return self.values.get(key, default)

    def __contains__(self, key: str) -> bool:
        return key in self.values

    def require(self, key: str):
        if key not in self.values:
            raise ConfigError(f"missing required key {key!r}")
        return self.values[key]

    def section(self, prefix: str) -> dict[str, object]:
        n = len(prefix) + 1
        return {k[n:]: v for k, v in self.values.items() if k.startswith(prefix + ".")}

    def train_config(self) -> TrainConfig:
        kwargs = self.section("train")
        kwargs["variant"] = self.values["variant"]
        kwargs["seed"] = self.values["seed"]
        try:
            return TrainConfig(**kwargs)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def search_grid(self) -> dict[str, list]:
        grid = {k: list(v) for k, v in SEARCH_GRID.items()}
        for name, values in self.section("search.grid").items():
            cast = type(SEARCH_GRID[name][0])
            grid[name] = [cast(v) for v in values]
        return grid

    def render(self) -> str:
        """Every resolved key, sorted, in the same syntax the parser reads."""
        return "".join(f"{k} = {self.raw[k]}\n" for k in sorted(self.raw))

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.render())
