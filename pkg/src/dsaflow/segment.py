"""Vessel probability maps, binary masks and entropy-ranked patches.

A multiscale Hessian vesselness filter provides the per-pixel vessel
probability; a mask produced by any external segmentation model can be
loaded instead through :func:`load_external_mask`.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from .imageio import ImageSeries, SeriesError, signal_positive, write_gray_image, read_frame

DEFAULT_SCALES = (1.0, 2.0, 4.0)
BETA = 0.5
MIN_SIGMA = 0.5
ENTROPY_BINS = 64
OTSU_BINS = 256
DEFAULT_QUANTILE = 0.9
# Hessian energies below this are treated as flat (float round-off on constant input)
STRUCTURE_FLOOR = 1e-9


class SegmentationError(ValueError):
    pass


class EmptyMaskWarning(UserWarning):
    pass


@dataclass(frozen=True, eq=False)
class ProbabilityMap:
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise SegmentationError(f"probability map must be 2-D, got {v.shape}")
        if not np.all(np.isfinite(v)) or v.min() < 0 or v.max() > 1:
            raise SegmentationError("probability map values must be finite and in [0, 1]")
        object.__setattr__(self, "values", v)

    @property
    def shape(self):
        return self.values.shape


@dataclass(frozen=True, eq=False)
class VesselMask:
    values: np.ndarray
    source: str = "vesselness"  # "vesselness" | "external"
    threshold: Optional[float] = None

    def __post_init__(self):
        object.__setattr__(self, "values", np.asarray(self.values, dtype=bool))

    @property
    def shape(self):
        return self.values.shape


@dataclass(frozen=True, eq=False)
class Patch:
    pixels: np.ndarray
    origin: tuple[int, int, int]  # (frame, row, col)
    entropy: float


def hessian_eigenvalues(image: np.ndarray, sigma: float):
    """Scale-normalized Hessian eigenvalues ordered so that ``|l1| <= |l2|``."""
    # the truncated second-derivative kernel does not sum to zero; remove its DC part
    dc = ndimage.gaussian_filter1d(np.ones(1), sigma, order=2, mode="reflect")[0]
    smooth = ndimage.gaussian_filter(image, sigma, mode="reflect")
    hrr = (ndimage.gaussian_filter(image, sigma, order=(2, 0), mode="reflect") - dc * smooth) * sigma ** 2
    hcc = (ndimage.gaussian_filter(image, sigma, order=(0, 2), mode="reflect") - dc * smooth) * sigma ** 2
    hrc = ndimage.gaussian_filter(image, sigma, order=(1, 1), mode="reflect") * sigma ** 2
    trace = hrr + hcc
    disc = np.sqrt((hrr - hcc) ** 2 + 4.0 * hrc ** 2)
    mu1 = 0.5 * (trace + disc)
    mu2 = 0.5 * (trace - disc)
    swap = np.abs(mu1) > np.abs(mu2)
    l1 = np.where(swap, mu2, mu1)
    l2 = np.where(swap, mu1, mu2)
    return l1, l2


def _tubularness(image: np.ndarray, sigma: float) -> np.ndarray:
    l1, l2 = hessian_eigenvalues(image, sigma)
    energy = np.sqrt(l1 ** 2 + l2 ** 2)
    gamma = 0.5 * energy.max()
    if gamma < STRUCTURE_FLOOR:
        return np.zeros_like(image)
    ratio = np.divide(l1, l2, out=np.zeros_like(l1), where=l2 != 0)
    response = np.exp(-ratio ** 2 / (2 * BETA ** 2)) * (1.0 - np.exp(-energy ** 2 / (2 * gamma ** 2)))
    response[(l2 > 0) | (energy < STRUCTURE_FLOOR)] = 0.0
    return response


def vesselness(frame, scales: Sequence[float] = DEFAULT_SCALES) -> ProbabilityMap:
    """Multiscale bright-tube vesselness, rescaled to ``[0, 1]``.

    ``frame`` must be signal-positive (vessels brighter than background).
    """
    scales = list(scales)
    if not scales:
        raise SegmentationError("at least one scale is required")
    if min(scales) < MIN_SIGMA:
        raise SegmentationError(f"scales must be >= {MIN_SIGMA} px, got {min(scales)}")
    image = np.asarray(frame, dtype=np.float64)
    response = np.zeros_like(image)
    for sigma in scales:
        response = np.maximum(response, _tubularness(image, float(sigma)))
    top = response.max()
    if top > 0:
        response = response / top
    return ProbabilityMap(np.clip(response, 0.0, 1.0))


def parse_method(method):
    """Normalize a threshold method to ``("otsu", None)`` or ``("quantile", q)``.

    Accepts ``"otsu"``, ``"quantile"``, ``"quantile:0.8"`` or such a tuple.
    """
    if isinstance(method, tuple):
        name, q = method
    else:
        name, _, q = str(method).partition(":")
        q = float(q) if q else None
    if name == "otsu":
        return "otsu", None
    if name == "quantile":
        q = DEFAULT_QUANTILE if q is None else float(q)
        if not 0 <= q <= 1:
            raise SegmentationError(f"quantile must be in [0, 1], got {q}")
        return "quantile", q
    raise SegmentationError(f"unknown threshold method {method!r}")


def otsu_threshold(values: np.ndarray, bins: int = OTSU_BINS) -> Optional[float]:
    """Otsu threshold over a ``bins``-bin histogram spanning the data range.

    Returns the upper edge of the last bin of the lower class, so that
    ``values > threshold`` selects the upper class. ``None`` for constant data.
    """
    values = np.asarray(values, dtype=np.float64).ravel()
    lo, hi = values.min(), values.max()
    if not hi > lo:
        return None
    counts, edges = np.histogram(values, bins=bins, range=(lo, hi))
    centers = 0.5 * (edges[:-1] + edges[1:])
    w0 = np.cumsum(counts)[:-1].astype(np.float64)
    w1 = values.size - w0
    m0 = np.cumsum(counts * centers)[:-1]
    total = (counts * centers).sum()
    with np.errstate(divide="ignore", invalid="ignore"):
        between = w0 * w1 * (m0 / w0 - (total - m0) / w1) ** 2
    between = np.where((w0 > 0) & (w1 > 0), between, -1.0)
    k = int(np.argmax(between))
    return float(edges[k + 1])


def threshold_values(values: np.ndarray, method="otsu"):
    """Binarize arbitrary real data; returns ``(mask, threshold)``."""
    name, q = parse_method(method)
    values = np.asarray(values, dtype=np.float64)
    if name == "otsu":
        t = otsu_threshold(values)
        if t is None:
            warnings.warn("constant input has no Otsu threshold; mask is empty",
                          EmptyMaskWarning, stacklevel=3)
            return np.zeros(values.shape, dtype=bool), float(values.flat[0])
    else:
        t = float(np.quantile(values, q))
    return values > t, t


def binarize(pmap: ProbabilityMap, method="otsu") -> VesselMask:
    mask, t = threshold_values(pmap.values, method)
    return VesselMask(mask, source="vesselness", threshold=t)


def temporal_union(masks: Sequence[VesselMask]) -> VesselMask:
    masks = list(masks)
    if not masks:
        raise SegmentationError("no masks to combine")
    shape = masks[0].shape
    if any(m.shape != shape for m in masks):
        raise SegmentationError("mask dimensions differ")
    out = np.zeros(shape, dtype=bool)
    for m in masks:
        out |= m.values
    sources = {m.source for m in masks}
    return VesselMask(out, source=sources.pop() if len(sources) == 1 else "vesselness")


def load_external_mask(path, h: int, w: int) -> VesselMask:
    """Load a single-channel mask image; any nonzero pixel is vessel."""
    try:
        img = read_frame(Path(path))
    except SeriesError as exc:
        raise SegmentationError(str(exc)) from exc
    if img.shape != (h, w):
        raise SegmentationError(f"mask {path} is {img.shape[0]}x{img.shape[1]}, series is {h}x{w}")
    return VesselMask(img > 0, source="external")


def segment_series(series: ImageSeries, scales=DEFAULT_SCALES, method="otsu", per_frame=False):
    """Vessel probability map and mask for a whole series.

    By default the filter runs once on the temporal maximum-intensity
    projection of the signal-positive series. With ``per_frame`` every
    frame is segmented and the masks are OR-ed.
    """
    frames = signal_positive(series).frames
    if per_frame:
        maps = [vesselness(f, scales) for f in frames]
        mask = temporal_union([binarize(m, method) for m in maps])
        pmap = ProbabilityMap(np.max(np.stack([m.values for m in maps]), axis=0))
        return pmap, mask
    pmap = vesselness(frames.max(axis=0), scales)
    return pmap, binarize(pmap, method)


def range_entropy(pixels) -> float:
    """Shannon entropy in bits of the 64-bin histogram of ``pixels`` on [0, 1]."""
    pixels = np.asarray(pixels, dtype=np.float64).ravel()
    if pixels.size == 0:
        raise SegmentationError("empty patch")
    counts, _ = np.histogram(np.clip(pixels, 0.0, 1.0), bins=ENTROPY_BINS, range=(0.0, 1.0))
    prob = counts[counts > 0] / pixels.size
    h = -np.sum(prob * np.log2(prob))
    return float(max(h, 0.0))


def extract_patches(series: ImageSeries, size: int = 256, stride: Optional[int] = None,
                    min_entropy: float = 0.0) -> list[Patch]:
    """Sliding-window patches with entropy >= ``min_entropy``, highest first.

    ``stride`` defaults to ``size`` (non-overlapping tiling). Ties keep
    frame/row/column order.
    """
    stride = size if stride is None else stride
    if size < 16:
        raise SegmentationError(f"patch size must be >= 16, got {size}")
    if stride < 1:
        raise SegmentationError(f"stride must be >= 1, got {stride}")
    h, w = series.shape
    if size > min(h, w):
        raise SegmentationError(f"patch size {size} exceeds frame {h}x{w}")
    patches = []
    for t, frame in enumerate(series.frames):
        for r in range(0, h - size + 1, stride):
            for c in range(0, w - size + 1, stride):
                px = frame[r:r + size, c:c + size]
                e = range_entropy(px)
                if e >= min_entropy:
                    patches.append(Patch(px.copy(), (t, r, c), e))
    patches.sort(key=lambda p: -p.entropy)
    return patches


def write_patches(patches: Sequence[Patch], directory) -> Path:
    """Write ``patch_0000.png`` ... and ``patches.json`` with origins and entropies."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    index = []
    for i, patch in enumerate(patches):
        name = f"patch_{i:04d}.png"
        write_gray_image(patch.pixels, directory / name)
        t, r, c = patch.origin
        index.append({"file": name, "frame": t, "row": r, "col": c, "entropy": patch.entropy})
    path = directory / "patches.json"
    with open(path, "w") as fh:
        json.dump({"size": int(patches[0].pixels.shape[0]) if patches else None,
                   "patches": index}, fh, indent=2)
    return path


def _ratio(num: int, den: int) -> float:
    return 1.0 if den == 0 else num / den


def mask_metrics(pred, truth) -> dict:
    """Dice, recall and precision; each 0/0 case counts as 1.0."""
    p = pred.values if isinstance(pred, VesselMask) else np.asarray(pred, dtype=bool)
    t = truth.values if isinstance(truth, VesselMask) else np.asarray(truth, dtype=bool)
    if p.shape != t.shape:
        raise SegmentationError(f"mask shapes differ: {p.shape} vs {t.shape}")
    inter = int(np.count_nonzero(p & t))
    n_p = int(np.count_nonzero(p))
    n_t = int(np.count_nonzero(t))
    return {
        "dice": _ratio(2 * inter, n_p + n_t),
        "recall": _ratio(inter, n_t),
        "precision": _ratio(inter, n_p),
    }
