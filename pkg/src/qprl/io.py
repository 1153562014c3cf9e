"""Frame ingestion and export: binary PGM, headerless Y-only files, template banks."""

from __future__ import annotations

import os
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .codec import MB, Frame
from .synth import GENERATORS, Stream, synth_scene

PathLike = Union[str, os.PathLike]


class StreamError(ValueError):
    """Raised when a stream source cannot be resolved or decoded."""


_PGM_TOKEN = re.compile(rb"(?:\s|#[^\n]*\n?)*(\S+)")


def _pgm_header(data: bytes, path) -> tuple[int, int, int, int]:
    pos = 0
    tokens = []
    for _ in range(4):
        m = _PGM_TOKEN.match(data, pos)
        if m is None:
            raise StreamError(f"{path}: truncated PGM header")
        tokens.append(m.group(1))
        pos = m.end()
    if tokens[0] != b"P5":
        raise StreamError(f"{path}: not a binary PGM (magic {tokens[0][:8]!r}, expected b'P5')")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise StreamError(f"{path}: malformed PGM header") from None
    # exactly one whitespace byte separates the header from the raster
    return width, height, maxval, pos + 1


def read_pgm(path: PathLike) -> np.ndarray:
    """Read an 8-bit binary PGM (P5) as a (H, W) uint8 array."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise StreamError(f"cannot read {path}: {exc.strerror}") from exc
    width, height, maxval, start = _pgm_header(data, path)
    if not 0 < maxval < 256:
        raise StreamError(f"{path}: only 8-bit PGM is supported (maxval {maxval})")
    need = width * height
    body = data[start : start + need]
    if len(body) != need:
        raise StreamError(f"{path}: raster has {len(body)} bytes, header declares {width}x{height} = {need}")
    return np.frombuffer(body, dtype=np.uint8).reshape(height, width).copy()


def write_pgm(path: PathLike, image: np.ndarray) -> Path:
    img = np.asarray(image)
    if img.ndim != 2:
        raise ValueError(f"PGM needs a 2-D array, got shape {img.shape}")
    if img.dtype != np.uint8:
        if np.any(img < 0) or np.any(img > 255) or np.any(img != np.round(img)):
            raise ValueError("PGM samples must be integers in [0, 255]")
        img = img.astype(np.uint8)
    path = Path(path)
    h, w = img.shape
    path.write_bytes(b"P5\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(img).tobytes())
    return path


def pgm_files(directory: PathLike) -> list[Path]:
    directory = Path(directory)
    if not directory.is_dir():
        raise StreamError(f"{directory}: not a directory")
    files = sorted(p for p in directory.iterdir() if p.suffix.lower() == ".pgm")
    if not files:
        raise StreamError(f"{directory}: contains no .pgm files")
    return files


def read_pgm_dir(directory: PathLike) -> np.ndarray:
    """All PGM frames of a directory, in lexicographic order, as (T, H, W) uint8."""
    images = [read_pgm(p) for p in pgm_files(directory)]
    shapes = {im.shape for im in images}
    if len(shapes) != 1:
        raise StreamError(f"{directory}: frames have differing dimensions {sorted(shapes)}")
    return np.stack(images)


def read_raw_y(path: PathLike, width: int, height: int) -> np.ndarray:
    """Headerless 8-bit planar luma file as (T, H, W) uint8."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise StreamError(f"cannot read {path}: {exc.strerror}") from exc
    frame_bytes = int(width) * int(height)
    if frame_bytes <= 0:
        raise StreamError(f"invalid raw dimensions {width}x{height}")
    if len(data) == 0 or len(data) % frame_bytes:
        raise StreamError(
            f"{path}: size {len(data)} bytes is not a multiple of the {width}x{height} frame size ({frame_bytes} bytes)"
        )
    return np.frombuffer(data, dtype=np.uint8).reshape(-1, height, width).copy()


def write_raw_y(path: PathLike, frames: Sequence[np.ndarray]) -> Path:
    path = Path(path)
    with path.open("wb") as fh:
        for f in frames:
            fh.write(np.ascontiguousarray(f, dtype=np.uint8).tobytes())
    return path


def write_pgm_sequence(directory: PathLike, frames: Sequence[np.ndarray], prefix: str = "frame") -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    return [write_pgm(directory / f"{prefix}_{i:05d}.pgm", f) for i, f in enumerate(frames)]


def load_templates(directory: PathLike) -> list[np.ndarray]:
    """Template bank: every PGM patch in a directory, as float arrays."""
    return [read_pgm(p).astype(np.float64) for p in pgm_files(directory)]


def parse_dims(text: str) -> tuple[int, int]:
    """Parse ``WxH`` into (height, width)."""
    m = re.fullmatch(r"\s*(\d+)\s*[xX]\s*(\d+)\s*", str(text))
    if not m:
        raise StreamError(f"dimensions {text!r} must look like WIDTHxHEIGHT")
    return int(m.group(2)), int(m.group(1))


@dataclass
class StreamSpec:
    """Where a stream comes from.

    ``kind`` is ``raw`` (``path`` + ``dims``), ``pgm`` (``path`` to a directory)
    or ``synthetic`` (``generator``, ``seed``, ``n_frames``, ``dims``).
    ``dims`` is (height, width). Saliency may be a PGM directory or a raw file
    of the stream's dimensions.
    """

    kind: str
    path: Optional[str] = None
    dims: Optional[tuple[int, int]] = None
    generator: Optional[str] = None
    seed: int = 0
    n_frames: int = 0
    fps: float = 30.0
    saliency: Optional[str] = None
    templates: Optional[str] = None
    max_frames: Optional[int] = None

    def __post_init__(self):
        if self.kind not in ("raw", "pgm", "synthetic"):
            raise StreamError(f"unknown stream kind {self.kind!r}; expected raw, pgm or synthetic")
        if self.kind in ("raw", "pgm") and not self.path:
            raise StreamError(f"{self.kind} stream needs a path")
        if self.kind == "raw" and self.dims is None:
            raise StreamError("raw stream needs dims (height, width)")
        if self.kind == "synthetic":
            if self.generator not in GENERATORS:
                raise StreamError(f"unknown generator {self.generator!r}; expected one of {sorted(GENERATORS)}")
            if self.n_frames < 1:
                raise StreamError("synthetic stream needs n_frames >= 1")
        if self.fps <= 0:
            raise StreamError("fps must be positive")


def _check_mb_dims(shape, what) -> None:
    h, w = shape[-2:]
    if h % MB or w % MB:
        raise StreamError(f"{what} dimensions {w}x{h} are not multiples of {MB}")


def _load_saliency(source: str, shape) -> np.ndarray:
    p = Path(source)
    sal = read_pgm_dir(p) if p.is_dir() else read_raw_y(p, shape[2], shape[1])
    if sal.shape[1:] != shape[1:]:
        raise StreamError(
            f"saliency dimensions {sal.shape[2]}x{sal.shape[1]} differ from frames {shape[2]}x{shape[1]}"
        )
    if len(sal) != shape[0]:
        raise StreamError(f"saliency has {len(sal)} maps but the stream has {shape[0]} frames")
    return sal.astype(np.float64)


def load_stream(spec: StreamSpec) -> Stream:
    """Resolve a StreamSpec into frames (plus aligned saliency and templates)."""
    if spec.kind == "synthetic":
        dims = tuple(spec.dims) if spec.dims is not None else (128, 128)
        _check_mb_dims(dims, "synthetic")
        stream = synth_scene(spec.generator, spec.seed, spec.n_frames, dims)
        stream.fps = float(spec.fps)
        return stream
    if spec.kind == "raw":
        h, w = spec.dims
        _check_mb_dims((h, w), "raw")
        samples = read_raw_y(spec.path, w, h)
    else:
        samples = read_pgm_dir(spec.path)
        _check_mb_dims(samples.shape, str(spec.path))
    saliency = _load_saliency(spec.saliency, samples.shape) if spec.saliency else None
    if spec.max_frames:
        samples = samples[: spec.max_frames]
        saliency = None if saliency is None else saliency[: spec.max_frames]
    templates = load_templates(spec.templates) if spec.templates else None
    frames = [Frame(s, i) for i, s in enumerate(samples)]
    return Stream(frames, fps=float(spec.fps), saliency=saliency, templates=templates, name=Path(spec.path).stem)
