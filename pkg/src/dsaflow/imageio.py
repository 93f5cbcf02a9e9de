"""Reading, trimming, cropping and writing angiography image series.

Frames are held as a single ``(d, h, w)`` float64 array with intensities in
``[0, 1]``. Files on disk are single-channel PNG/PGM, 8 or 16 bit.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image

FRAME_SUFFIXES = (".png", ".pgm")
SIDECAR_NAME = "series.json"
DEFAULT_FPS = 3.0
MIN_ROI_SIZE = 8


class SeriesError(ValueError):
    """Raised for malformed series input or invalid series operations."""


class Polarity(str, Enum):
    DARK = "dark"
    BRIGHT = "bright"

    @property
    def flipped(self) -> "Polarity":
        return Polarity.BRIGHT if self is Polarity.DARK else Polarity.DARK


@dataclass(frozen=True)
class RoiRect:
    x0: int
    y0: int
    width: int
    height: int

    @classmethod
    def parse(cls, text: str) -> "RoiRect":
        """Parse ``"x0,y0,w,h"``."""
        try:
            x0, y0, w, h = (int(v) for v in text.split(","))
        except ValueError as exc:
            raise SeriesError(f"roi must be 'x0,y0,w,h', got {text!r}") from exc
        return cls(x0, y0, w, h)

    def to_list(self) -> list[int]:
        return [self.x0, self.y0, self.width, self.height]

    def check_inside(self, h: int, w: int) -> None:
        if self.width < MIN_ROI_SIZE or self.height < MIN_ROI_SIZE:
            raise SeriesError(
                f"roi {self.width}x{self.height} below minimum size {MIN_ROI_SIZE}"
            )
        if (
            self.x0 < 0
            or self.y0 < 0
            or self.x0 + self.width > w
            or self.y0 + self.height > h
        ):
            raise SeriesError(f"roi {self.to_list()} outside {h}x{w} frame")


@dataclass(frozen=True, eq=False)
class ImageSeries:
    """A time series of ``d`` grayscale frames.

    ``frames`` has shape ``(d, h, w)``. ``roi`` is an optional crop hint
    carried over from the sidecar; it is not applied automatically.
    """

    frames: np.ndarray
    fps: float = DEFAULT_FPS
    polarity: Polarity = Polarity.DARK
    roi: Optional[RoiRect] = None
    # set by invert_polarity so that a double inversion is bit-exact
    _inverse: Optional["ImageSeries"] = field(default=None, init=False, repr=False)

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.float64)
        if frames.ndim != 3 or frames.shape[0] < 1:
            raise SeriesError(f"frames must have shape (d>=1, h, w), got {frames.shape}")
        if not np.all(np.isfinite(frames)):
            raise SeriesError("frames contain non-finite values")
        if frames.min() < 0.0 or frames.max() > 1.0:
            raise SeriesError("intensities must lie in [0, 1]")
        if not self.fps > 0:
            raise SeriesError(f"fps must be positive, got {self.fps}")
        if frames is self.frames:
            frames = frames.copy()
        frames.setflags(write=False)
        object.__setattr__(self, "frames", frames)
        object.__setattr__(self, "polarity", Polarity(self.polarity))

    @property
    def d(self) -> int:
        return self.frames.shape[0]

    @property
    def height(self) -> int:
        return self.frames.shape[1]

    @property
    def width(self) -> int:
        return self.frames.shape[2]

    @property
    def shape(self) -> tuple[int, int]:
        return self.frames.shape[1], self.frames.shape[2]

    def __len__(self) -> int:
        return self.d


def read_frame(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            mode = im.mode
            arr = np.asarray(im)
    except (OSError, ValueError) as exc:
        raise SeriesError(f"cannot read {path}: {exc}") from exc
    if mode == "1":
        return arr.astype(np.float64)
    if mode == "L":
        return arr.astype(np.float64) / 255.0
    if mode.startswith("I;16") or mode == "I":
        arr = arr.astype(np.float64)
        if arr.min() < 0 or arr.max() > 65535:
            raise SeriesError(f"{path}: 32-bit integer frames are not supported")
        return arr / 65535.0
    raise SeriesError(f"{path}: expected a single-channel image, got mode {mode!r}")


def read_sidecar(path: Path) -> dict:
    try:
        with open(path) as fh:
            meta = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise SeriesError(f"cannot read sidecar {path}: {exc}") from exc
    if not isinstance(meta, dict):
        raise SeriesError(f"sidecar {path} must hold a JSON object")
    return meta


def load_series(directory, sidecar_path=None) -> ImageSeries:
    """Load every frame in ``directory`` as one series.

    Frames are sorted by filename unless the sidecar lists them under
    ``"frames"``. ``series.json`` in the directory is used as sidecar when
    ``sidecar_path`` is not given.
    """
    directory = Path(directory)
    if not directory.is_dir():
        raise SeriesError(f"{directory} is not a directory")
    if sidecar_path is None and (directory / SIDECAR_NAME).is_file():
        sidecar_path = directory / SIDECAR_NAME
    meta = read_sidecar(Path(sidecar_path)) if sidecar_path is not None else {}

    if "frames" in meta:
        paths = [directory / name for name in meta["frames"]]
        missing = [p.name for p in paths if not p.is_file()]
        if missing:
            raise SeriesError(f"sidecar lists missing frames: {missing}")
    else:
        paths = sorted(
            p for p in directory.iterdir()
            if p.is_file() and p.suffix.lower() in FRAME_SUFFIXES
        )
    if not paths:
        raise SeriesError(f"no frames found in {directory}")

    frames = [read_frame(p) for p in paths]
    shapes = {f.shape for f in frames}
    if len(shapes) != 1:
        raise SeriesError(f"mixed frame dimensions in {directory}: {sorted(shapes)}")

    polarity = meta.get("polarity", "dark")
    if polarity not in ("dark", "bright"):
        raise SeriesError(f"polarity must be 'dark' or 'bright', got {polarity!r}")
    roi = RoiRect(*meta["roi"]) if meta.get("roi") is not None else None
    return ImageSeries(
        np.stack(frames),
        fps=float(meta.get("fps", DEFAULT_FPS)),
        polarity=Polarity(polarity),
        roi=roi,
    )


def trim(series: ImageSeries, start_index: int, end_index: int) -> ImageSeries:
    """Keep frames ``[start_index, end_index)``."""
    if not 0 <= start_index <= series.d or not 0 <= end_index <= series.d:
        raise SeriesError(
            f"trim indices ({start_index}, {end_index}) out of bounds for d={series.d}"
        )
    if start_index >= end_index:
        raise SeriesError(f"empty trim range [{start_index}, {end_index})")
    return replace(series, frames=series.frames[start_index:end_index].copy())


def crop_roi(series: ImageSeries, roi: RoiRect) -> ImageSeries:
    roi.check_inside(series.height, series.width)
    sub = series.frames[:, roi.y0:roi.y0 + roi.height, roi.x0:roi.x0 + roi.width]
    return replace(series, frames=sub.copy(), roi=None)


def invert_polarity(series: ImageSeries) -> ImageSeries:
    """Map every intensity ``i`` to ``1 - i`` and flip the polarity flag."""
    if series._inverse is not None:
        return series._inverse
    out = replace(series, frames=1.0 - series.frames, polarity=series.polarity.flipped)
    object.__setattr__(out, "_inverse", series)
    return out


def signal_positive(series: ImageSeries) -> ImageSeries:
    """Return the series with contrast-filled vessels bright."""
    if series.polarity is Polarity.DARK:
        return invert_polarity(series)
    return series


def _frame_name(i: int) -> str:
    return f"frame_{i:04d}.png"


def _quantize(img: np.ndarray, bit_depth: int) -> np.ndarray:
    top = 255 if bit_depth == 8 else 65535
    q = np.rint(np.clip(img, 0.0, 1.0) * top)
    return q.astype(np.uint8 if bit_depth == 8 else np.uint16)


def _prepare_dir(directory) -> Path:
    directory = Path(directory)
    try:
        directory.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise SeriesError(f"cannot create {directory}: {exc}") from exc
    if not os.access(directory, os.W_OK):
        raise SeriesError(f"{directory} is not writable")
    return directory


def write_gray_image(img: np.ndarray, path, bit_depth: int = 8) -> None:
    if bit_depth not in (8, 16):
        raise SeriesError(f"bit_depth must be 8 or 16, got {bit_depth}")
    q = _quantize(np.asarray(img, dtype=np.float64), bit_depth)
    Image.fromarray(q).save(path)


def write_gray_series(series, directory, bit_depth: int = 8) -> list[Path]:
    """Write frames as ``frame_0000.png`` ... and return the paths written.

    ``series`` may be an :class:`ImageSeries` or a ``(d, h, w)`` array.
    """
    frames = series.frames if isinstance(series, ImageSeries) else np.asarray(series)
    if frames.ndim != 3 or frames.shape[0] == 0:
        raise SeriesError("cannot write an empty series")
    directory = _prepare_dir(directory)
    paths = []
    for i, frame in enumerate(frames):
        path = directory / _frame_name(i)
        write_gray_image(frame, path, bit_depth)
        paths.append(path)
    return paths


def write_rgb_series(frames: Sequence[np.ndarray], directory) -> list[Path]:
    """Write ``(h, w, 3)`` float frames in ``[0, 1]`` as 8-bit RGB PNGs."""
    frames = list(frames)
    if not frames:
        raise SeriesError("cannot write an empty series")
    directory = _prepare_dir(directory)
    paths = []
    for i, frame in enumerate(frames):
        frame = np.asarray(frame)
        if frame.ndim != 3 or frame.shape[2] != 3:
            raise SeriesError(f"RGB frame {i} has shape {frame.shape}")
        path = directory / _frame_name(i)
        Image.fromarray(_quantize(frame, 8)).save(path)
        paths.append(path)
    return paths


def write_sidecar(series: ImageSeries, directory, frame_names: Optional[list[str]] = None):
    meta = {"fps": series.fps, "polarity": series.polarity.value}
    if series.roi is not None:
        meta["roi"] = series.roi.to_list()
    if frame_names is not None:
        meta["frames"] = frame_names
    path = Path(directory) / SIDECAR_NAME
    with open(path, "w") as fh:
        json.dump(meta, fh, indent=2)
    return path
