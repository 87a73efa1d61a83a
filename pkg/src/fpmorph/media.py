"""Image <-> density conversion, frame sinks and run logs.

Images are ``(height, width)`` arrays with row 0 at the top.  Density grids
are ``(n_cols, n_rows)`` with ``j`` increasing upward, so
``density[i, j] == image[height - 1 - j, i]``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol

import numpy as np
from PIL import Image

DEFAULT_EPS_FLOOR = 1e-3
RGB = ("R", "G", "B")


@dataclass
class ImageField:
    """Pixel data in ``[0, 1]``, shape ``(height, width, channels)`` with 1 or 3 channels."""

    data: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.data, dtype=np.float64)
        if d.ndim == 2:
            d = d[:, :, None]
        if d.ndim != 3 or d.shape[2] not in (1, 3):
            raise ValueError("image data must be (height, width) or (height, width, 1|3)")
        if d.shape[0] == 0 or d.shape[1] == 0:
            raise ValueError("empty image")
        if np.any(d < 0) or np.any(d > 1) or not np.all(np.isfinite(d)):
            raise ValueError("pixel values must lie in [0, 1]")
        self.data = d

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def n_channels(self) -> int:
        return self.data.shape[2]

    @property
    def channel_names(self) -> list[str]:
        return ["gray"] if self.n_channels == 1 else list(RGB)


def read_png(path) -> ImageField:
    with Image.open(path) as im:
        gray = im.mode in ("1", "L", "LA")
        arr = np.asarray(im.convert("L" if gray else "RGB"), dtype=np.float64) / 255.0
    return ImageField(arr)


def write_png(img: ImageField, path) -> None:
    q = np.rint(img.data * 255.0).astype(np.uint8)
    if img.n_channels == 1:
        Image.fromarray(q[:, :, 0], mode="L").save(path, format="PNG")
    else:
        Image.fromarray(q, mode="RGB").save(path, format="PNG")


def image_to_density(img: ImageField, eps_floor: float = DEFAULT_EPS_FLOOR) -> dict[str, np.ndarray]:
    """Per-channel density grids ``max(v, eps_floor)``; always strictly positive."""
    if not 0 < eps_floor < 0.5:
        raise ValueError("eps_floor must lie in (0, 0.5)")
    out = {}
    for c, name in enumerate(img.channel_names):
        ch = np.maximum(img.data[:, :, c], eps_floor)
        out[name] = np.ascontiguousarray(np.flipud(ch).T)
    return out


def density_to_image(fields: dict[str, np.ndarray], clip: bool = True) -> ImageField:
    names = list(fields)
    if names not in (["gray"], list(RGB)):
        raise ValueError(f"expected a 'gray' channel or R, G, B channels, got {names}")
    shapes = {np.shape(f) for f in fields.values()}
    if len(shapes) != 1 or len(next(iter(shapes))) != 2:
        raise ValueError("all channels must be 2-D arrays of one shape")
    planes = [np.flipud(np.asarray(fields[n], dtype=np.float64).T) for n in names]
    data = np.stack(planes, axis=2)
    if clip:
        data = np.clip(data, 0.0, 1.0)
    return ImageField(data)


class FrameSink(Protocol):
    def emit(self, step: int, time: float, fields: dict[str, np.ndarray]) -> None: ...


class MemorySink:
    """Keeps every emitted frame; handy in tests and notebooks."""

    def __init__(self):
        self.frames: list[tuple[int, float, dict[str, np.ndarray]]] = []

    def emit(self, step, time, fields):
        self.frames.append((step, time, fields))

    @property
    def steps(self) -> list[int]:
        return [f[0] for f in self.frames]


class PNGFrameSink:
    """Writes ``frame_<step>.png`` for grid densities (clipped to [0, 1])."""

    def __init__(self, outdir, digits: int = 6, prefix: str = "frame_"):
        self.outdir = Path(outdir)
        self.outdir.mkdir(parents=True, exist_ok=True)
        self.digits = digits
        self.prefix = prefix
        self.written: list[Path] = []

    def emit(self, step, time, fields):
        path = self.outdir / f"{self.prefix}{step:0{self.digits}d}.png"
        write_png(density_to_image(fields), path)
        self.written.append(path)


class CloudFrameSink:
    """Writes ``frame_<step>.csv`` with one ``cell,value`` row per Voronoi cell."""

    def __init__(self, outdir, digits: int = 6, prefix: str = "frame_"):
        self.outdir = Path(outdir)
        self.outdir.mkdir(parents=True, exist_ok=True)
        self.digits = digits
        self.prefix = prefix
        self.written: list[Path] = []

    def emit(self, step, time, fields):
        path = self.outdir / f"{self.prefix}{step:0{self.digits}d}.csv"
        (values,) = fields.values()
        with open(path, "w", newline="") as fh:
            fh.write("cell,value\n")
            for k, v in enumerate(values):
                fh.write(f"{k},{float(v)!r}\n")
        self.written.append(path)


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def write_error_log(report, path) -> None:
    """CSV ``step,time,channel,rel_rms_error``; step-major, channels in report order."""
    try:
        with open(path, "w", newline="") as fh:
            fh.write("step,time,channel,rel_rms_error\n")
            for k, (step, t) in enumerate(zip(report.steps, report.times)):
                for ch in report.channels:
                    fh.write(f"{step},{_fmt(t)},{ch},{_fmt(report.errors[ch][k])}\n")
    except OSError as exc:
        raise RuntimeError(f"could not write error log {path}: {exc}") from exc


def read_error_log(path) -> dict[str, list[tuple[int, float, float]]]:
    """Parse an error log back into ``{channel: [(step, time, error), ...]}``."""
    out: dict[str, list[tuple[int, float, float]]] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["step", "time", "channel", "rel_rms_error"]:
            raise ValueError(f"unexpected header {reader.fieldnames}")
        for row in reader:
            out.setdefault(row["channel"], []).append(
                (int(row["step"]), float(row["time"]), float(row["rel_rms_error"]))
            )
    return out


def write_keyvalue(path, items) -> None:
    try:
        with open(path, "w") as fh:
            for k, v in items:
                fh.write(f"{k}={v}\n")
    except OSError as exc:
        raise RuntimeError(f"could not write {path}: {exc}") from exc


def read_keyvalue(path) -> dict[str, str]:
    out = {}
    with open(path) as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            k, _, v = line.partition("=")
            out[k.strip()] = v.strip()
    return out
