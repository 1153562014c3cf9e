"""Output directory layout, run manifest and CSV tables."""

from __future__ import annotations

import csv
import datetime as _dt
import os
import platform
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence, Union

import numpy as np

SUBDIRS = ("checkpoints", "curves", "plots", "logs")
MANIFEST = "manifest.txt"

RD_COLUMNS = ("stream", "arm", "target", "measured_rate", "metric", "value")
BD_COLUMNS = ("arm", "metric", "bd_rate_mean", "bd_rate_se", "n_streams")
BD_STREAM_COLUMNS = ("arm", "metric", "stream", "bd_rate")


def code_version() -> str:
    try:
        from importlib.metadata import version

        return version("artifact")
    except Exception:  # noqa: BLE001 - running from a source tree
        return "0+unknown"


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


@dataclass
class OutputLayout:
    root: Path

    def __post_init__(self):
        self.root = Path(self.root)

    def create(self) -> "OutputLayout":
        self.root.mkdir(parents=True, exist_ok=True)
        for d in SUBDIRS:
            (self.root / d).mkdir(exist_ok=True)
        return self

    @property
    def manifest(self) -> Path:
        return self.root / MANIFEST

    def __getattr__(self, name: str) -> Path:
        if name in SUBDIRS:
            return self.root / name
        raise AttributeError(name)


@dataclass
class RunManifest:
    """Plain-text run record.

    The header (command, config echo, seed, code version, start time, planned
    outputs) is written once before any work starts. Afterwards the file is
    only appended to: each produced artifact, then the end timestamp.
    """

    path: Path
    command: str
    seed: int
    config_text: str
    started: str = field(default_factory=_now)
    outputs: list[str] = field(default_factory=list)
    _closed: bool = False

    def write(self, planned: Sequence[Union[str, Path]] = ()) -> "RunManifest":
        if Path(self.path).exists():
            raise FileExistsError(f"{self.path} already exists; use a fresh --out directory")
        lines = [
            "# run manifest",
            f"command = {self.command}",
            f"seed = {self.seed}",
            f"code_version = {code_version()}",
            f"python = {platform.python_version()}",
            f"numpy = {np.__version__}",
            f"threads = {os.environ.get('QPRL_THREADS', '1')}",
            f"started = {self.started}",
        ]
        lines += [f"planned = {p}" for p in planned]
        lines += ["", "[config]", self.config_text.rstrip("\n"), "", "[artifacts]"]
        Path(self.path).write_text("\n".join(lines) + "\n", encoding="utf-8")
        return self

    def _append(self, line: str) -> None:
        if self._closed:
            raise RuntimeError("manifest is closed")
        with open(self.path, "a", encoding="utf-8") as fh:
            fh.write(line + "\n")

    def record(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        rel = os.path.relpath(path, Path(self.path).parent)
        self.outputs.append(rel)
        self._append(f"artifact = {rel}")
        return path

    def close(self, status: str = "ok") -> None:
        self._append("")
        self._append("[end]")
        self._append(f"status = {status}")
        self._append(f"finished = {_now()}")
        self._closed = True


def read_manifest(path: Union[str, Path]) -> dict:
    """Parse a manifest into {key: value or list of values}, plus the config text."""
    text = Path(path).read_text(encoding="utf-8")
    out: dict = {"artifact": [], "planned": []}
    section = None
    config_lines = []
    for line in text.splitlines():
        s = line.strip()
        if s in ("[config]", "[artifacts]", "[end]"):
            section = s[1:-1]
            continue
        if section == "config":
            config_lines.append(line)
            continue
        if not s or s.startswith("#") or "=" not in s:
            continue
        k, v = (x.strip() for x in s.split("=", 1))
        if k in ("artifact", "planned"):
            out[k].append(v)
        else:
            out[k] = v
    out["config"] = "\n".join(config_lines).strip() + "\n"
    return out


def _cell(v) -> str:
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (np.floating,)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return str(int(v))
    return str(v)


def write_csv(path: Union[str, Path], rows: Iterable[Mapping], columns: Sequence[str]) -> Path:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for r in rows:
            w.writerow([_cell(r[c]) for c in columns])
    return path


def read_csv(path: Union[str, Path]) -> list[dict]:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        for k, v in r.items():
            try:
                r[k] = float(v)
            except (TypeError, ValueError):
                pass
    return rows


def rd_rows(curves_by_stream: Mapping[str, Mapping[str, object]]) -> list[dict]:
    """Long-format RD table rows from {stream: {metric: RdCurve}}."""
    rows = []
    for stream, by_metric in curves_by_stream.items():
        for metric, c in by_metric.items():
            for p, t in zip(c.points, c.targets):
                rows.append(
                    {"stream": stream, "arm": c.arm, "target": float(t), "measured_rate": p.rate, "metric": metric, "value": p.quality}
                )
    return rows


def qp_map_rows(qp_maps: Sequence[np.ndarray]) -> list[dict]:
    rows = []
    for t, q in enumerate(qp_maps):
        for (r, c), v in np.ndenumerate(q):
            rows.append({"frame": t, "mb_row": r, "mb_col": c, "qp": int(v)})
    return rows


QP_MAP_COLUMNS = ("frame", "mb_row", "mb_col", "qp")

