"""Sectioned ``key = value`` run configuration with ``#`` comments.

::

    [env]
    target_bitrate = 150000   # bits per second
    lambda = 20
    task = roi

    [train]
    gamma = 0.99
    total_frames = 100000

    [run]
    seed = 7

``seed`` may appear in any section; it seeds both the environment and the
trainer. ``[benchmark]`` controls the synthetic train/test split.
"""

from __future__ import annotations

import configparser
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional, Union

from .env import EnvConfig
from .rl.train import TrainConfig


class ConfigError(ValueError):
    pass


# file key -> EnvConfig field
ENV_KEYS = {
    "target_bitrate": "target_bitrate",
    "fps": "fps",
    "lambda": "lam",
    "delta_max": "delta_max",
    "coarsen": "coarsen",
    "gop": "gop",
    "task": "task",
    "start_qp": "start_qp",
    "kp": "kp",
    "ki": "ki",
    "rc_window": "rc_window",
    "lookahead": "lookahead",
    "beta": "beta",
    "search_radius": "search_radius",
    "det_threshold": "det_threshold",
}
TRAIN_KEYS = tuple(f.name for f in fields(TrainConfig) if f.name != "seed")
BENCH_KEYS = ("train_seeds", "test_seeds", "n_frames", "dims", "targets")
SECTIONS = {"env": tuple(ENV_KEYS), "train": TRAIN_KEYS, "benchmark": BENCH_KEYS, "run": ()}


@dataclass
class BenchSettings:
    train_seeds: tuple = tuple(range(8))
    test_seeds: tuple = (1000, 1001, 1002, 1003)
    n_frames: int = 300
    dims: tuple = (128, 128)
    targets: tuple = (100_000.0, 150_000.0, 225_000.0, 340_000.0)


@dataclass
class RunConfig:
    env: EnvConfig = field(default_factory=EnvConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    bench: BenchSettings = field(default_factory=BenchSettings)
    seed: Optional[int] = None
    source: Optional[str] = None

    def with_seed(self, seed: int) -> "RunConfig":
        return replace(self, seed=int(seed), env=self.env.replace(seed=int(seed)), train=replace(self.train, seed=int(seed)))

    def to_text(self) -> str:
        """Canonical config file text; parsing it gives back an equal RunConfig."""
        env = asdict(self.env)
        lines = ["[env]"]
        lines += [f"{k} = {env[f]}" for k, f in ENV_KEYS.items()]
        lines += ["", "[train]"]
        tr = asdict(self.train)
        lines += [f"{k} = {_fmt(tr[k])}" for k in TRAIN_KEYS]
        lines += ["", "[benchmark]"]
        b = asdict(self.bench)
        lines += [f"{k} = {_fmt(b[k])}" for k in BENCH_KEYS]
        lines += ["", "[run]", f"seed = {'auto' if self.seed is None else self.seed}"]
        return "\n".join(lines) + "\n"


def _fmt(v) -> str:
    if isinstance(v, (tuple, list)):
        return ", ".join(str(x) for x in v)
    return str(v)


def _scalar(kind, raw: str, key: str):
    try:
        if kind is bool:
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError
            return low in ("true", "1", "yes")
        if kind is int:
            f = float(raw)
            if f != int(f):
                raise ValueError
            return int(f)
        return kind(raw)
    except ValueError:
        raise ConfigError(f"key {key!r}: cannot parse {raw!r} as {kind.__name__}") from None


def _tuple(raw: str, kind, key: str) -> tuple:
    items = [x for x in raw.replace("x", ",").split(",") if x.strip()] if key == "dims" else [x for x in raw.split(",") if x.strip()]
    if not items:
        raise ConfigError(f"key {key!r}: empty list")
    return tuple(_scalar(kind, x.strip(), key) for x in items)


def _typed(dc_default, name: str, raw: str, key: str):
    cur = getattr(dc_default, name)
    if isinstance(cur, tuple):
        kind = type(cur[0]) if cur else float
        return _tuple(raw, kind, key)
    if isinstance(cur, bool):
        return _scalar(bool, raw, key)
    if isinstance(cur, int):
        return _scalar(int, raw, key)
    if isinstance(cur, float):
        return _scalar(float, raw, key)
    return raw


def parse_config(text: str, source: Optional[str] = None) -> RunConfig:
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",), comment_prefixes=("#",), interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text, source=source or "<config>")
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    env_kw, train_kw, bench_kw = {}, {}, {}
    seed = None
    env0, train0, bench0 = EnvConfig(), TrainConfig(), BenchSettings()
    for section in parser.sections():
        name = section.strip().lower()
        if name not in SECTIONS:
            raise ConfigError(f"unknown section [{section}]; expected one of {sorted(SECTIONS)}")
        for key, raw in parser.items(section):
            key = key.strip().lower()
            if key == "seed":
                seed = None if raw.strip().lower() == "auto" else _scalar(int, raw, key)
            elif key not in SECTIONS[name]:
                raise ConfigError(f"unknown key {key!r} in section [{section}]")
            elif name == "env":
                env_kw[ENV_KEYS[key]] = _typed(env0, ENV_KEYS[key], raw, key)
            elif name == "train":
                train_kw[key] = _typed(train0, key, raw, key)
            else:
                bench_kw[key] = _typed(bench0, key, raw, key)
    if "targets" not in bench_kw and env_kw.get("task") == "detect":
        from .benchmark import TASK_TARGETS

        bench_kw["targets"] = TASK_TARGETS["detect"]
    try:
        cfg = RunConfig(EnvConfig(**env_kw), TrainConfig(**train_kw), BenchSettings(**bench_kw), None, source)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg if seed is None else cfg.with_seed(seed)


def load_config(path: Union[str, os.PathLike]) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, str(path))
