"""Synthetic DSA-like series with known sources and bolus timing.

Each phase is a vessel image (projected tubes or a filled blob) whose
brightness follows a gamma-variate bolus curve. Frames are the exact linear mixture plus a
constant background and Gaussian noise, which makes the phantom a ground
truth for decomposition, segmentation and phase ordering.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .imageio import (
    ImageSeries,
    Polarity,
    SeriesError,
    read_frame,
    write_gray_image,
    write_gray_series,
    write_sidecar,
)
from .phases import Phase

GEOMETRIES = ("curve_artery", "blob_nidus", "curve_vein")
GEOMETRY_PHASE = {
    "curve_artery": Phase.ARTERIAL,
    "blob_nidus": Phase.NIDAL,
    "curve_vein": Phase.VENOUS,
}
MAX_OVERLAP = 0.10
MAX_ATTEMPTS = 100
TRUTH_NAME = "truth.json"


class PhantomError(ValueError):
    pass


@dataclass(frozen=True)
class Bolus:
    t0: float  # onset, frames
    alpha: float = 3.0
    beta: float = 1.5  # frames
    amplitude: float = 0.5

    @property
    def peak_frame(self) -> float:
        return self.t0 + self.alpha * self.beta


@dataclass(frozen=True)
class PhaseSpec:
    geometry: str
    bolus: Bolus


DEFAULT_PHASES = (
    PhaseSpec("curve_artery", Bolus(t0=1.0, amplitude=0.6)),
    PhaseSpec("blob_nidus", Bolus(t0=5.0, amplitude=0.5)),
    PhaseSpec("curve_vein", Bolus(t0=9.0, amplitude=0.55)),
)


@dataclass(frozen=True)
class PhantomSpec:
    h: int = 128
    w: int = 128
    d: int = 24
    fps: float = 3.0
    phases: tuple = DEFAULT_PHASES
    noise_sigma: float = 0.01
    # keeps noisy background pixels away from the clamp at 0
    background: float = 0.05
    seed: int = 42

    def __post_init__(self):
        object.__setattr__(self, "phases", tuple(self.phases))
        p = len(self.phases)
        if p < 1:
            raise PhantomError("phantom needs at least one phase")
        if self.d < 2 * p:
            raise PhantomError(f"d={self.d} frames is fewer than 2*p={2 * p}")
        if self.h < 16 or self.w < 16:
            raise PhantomError(f"frame {self.h}x{self.w} too small")
        if not self.fps > 0:
            raise PhantomError("fps must be positive")
        if self.noise_sigma < 0:
            raise PhantomError("noise_sigma must be >= 0")
        kinds = [ph.geometry for ph in self.phases]
        for k in kinds:
            if k not in GEOMETRIES:
                raise PhantomError(f"unknown geometry {k!r}")
        ranks = [GEOMETRIES.index(k) for k in kinds]
        if ranks != sorted(set(ranks)):
            raise PhantomError("phases must be ordered artery < nidus < vein without repeats")
        onsets = [ph.bolus.t0 for ph in self.phases]
        if any(b <= a for a, b in zip(onsets, onsets[1:])):
            raise PhantomError(f"bolus onsets must be strictly increasing, got {onsets}")
        for ph in self.phases:
            if ph.bolus.amplitude <= 0:
                raise PhantomError("bolus amplitudes must be positive")
            if ph.bolus.alpha <= 0 or ph.bolus.beta <= 0:
                raise PhantomError("gamma-variate alpha and beta must be positive")

    @property
    def p(self) -> int:
        return len(self.phases)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "PhantomSpec":
        data = dict(data)
        if "phases" in data:
            data["phases"] = tuple(
                PhaseSpec(ph["geometry"], Bolus(**ph["bolus"])) for ph in data["phases"]
            )
        return cls(**data)


@dataclass(frozen=True, eq=False)
class PhantomTruth:
    sources: np.ndarray  # (p, h, w)
    mixing: np.ndarray  # (d, p)
    vessel_mask: np.ndarray  # (h, w) bool
    phase_order: list  # Phase per component
    background: float
    onsets: list = field(default_factory=list)

    @property
    def masks(self) -> np.ndarray:
        return self.sources > 0

    def clean_frames(self) -> np.ndarray:
        p, h, w = self.sources.shape
        frames = self.mixing @ self.sources.reshape(p, -1) + self.background
        return frames.reshape(-1, h, w)


def gamma_variate(t, t0, alpha, beta, amplitude):
    """Peak-normalized gamma-variate; equals ``amplitude`` at ``t0 + alpha*beta``."""
    if not alpha > 0 or not beta > 0:
        raise PhantomError(f"alpha and beta must be positive, got {alpha}, {beta}")
    t = np.asarray(t, dtype=np.float64)
    s = np.clip(t - t0, 0.0, None)
    out = amplitude * (s / (alpha * beta)) ** alpha * np.exp(alpha - s / beta)
    out = np.where(t > t0, out, 0.0)
    return out if out.ndim else float(out)


def _bezier(p0, p1, p2, n=400):
    s = np.linspace(0.0, 1.0, n)[:, None]
    return (1 - s) ** 2 * p0 + 2 * (1 - s) * s * p1 + s ** 2 * p2


def _tube(points, h, w, width):
    """Projected-cylinder profile: intensity follows the chord length."""
    yy, xx = np.mgrid[0:h, 0:w]
    dist, _ = cKDTree(points).query(np.column_stack([yy.ravel(), xx.ravel()]))
    dist = dist.reshape(h, w)
    radius = width / 2.0
    chord = np.sqrt(np.clip(1.0 - (dist / (radius + 0.5)) ** 2, 0.0, 1.0))
    return np.where(dist <= radius, chord, 0.0)


def render_source(kind: str, h: int, w: int, seed) -> np.ndarray:
    """Render one phase image with intensities in ``[0, 1]``, zero off-vessel.

    The layout is fixed relative to the frame: the nidus sits near the
    center, the artery enters from the left border and ends left of the
    nidus, the vein starts right of the nidus and leaves through the top.
    Tubes are 3 to 5 px wide.
    """
    rng = np.random.default_rng(seed)
    size = min(h, w)
    cy, cx = h / 2.0, w / 2.0
    if kind == "curve_artery":
        width = int(rng.integers(3, 6))
        p0 = np.array([h * rng.uniform(0.35, 0.65), 0.0])
        p2 = np.array([cy + rng.uniform(-0.05, 0.05) * h, cx - 0.14 * w])
        p1 = (p0 + p2) / 2 + np.array([rng.uniform(-0.15, 0.15) * h, 0.0])
        return _tube(_bezier(p0, p1, p2), h, w, width)
    if kind == "curve_vein":
        width = int(rng.integers(3, 6))
        p0 = np.array([cy + rng.uniform(-0.05, 0.05) * h, cx + 0.14 * w])
        p2 = np.array([0.0, w * rng.uniform(0.6, 0.85)])
        p1 = (p0 + p2) / 2 + np.array([0.0, rng.uniform(-0.12, 0.12) * w])
        return _tube(_bezier(p0, p1, p2), h, w, width)
    if kind == "blob_nidus":
        by = cy + rng.uniform(-0.03, 0.03) * h
        bx = cx + rng.uniform(-0.03, 0.03) * w
        radius = 0.05 * size
        amps = rng.uniform(-0.12, 0.12, size=3)
        phases = rng.uniform(0, 2 * np.pi, size=3)
        yy, xx = np.mgrid[0:h, 0:w]
        theta = np.arctan2(yy - by, xx - bx)
        r = np.hypot(yy - by, xx - bx)
        bound = radius * (1 + sum(a * np.cos(k * theta + ph)
                                  for k, a, ph in zip((2, 3, 4), amps, phases)))
        return (r <= bound).astype(np.float64)
    raise PhantomError(f"unknown geometry {kind!r}")


def render_geometry(kind: str, h: int, w: int, seed) -> np.ndarray:
    """Binary footprint of :func:`render_source`."""
    return render_source(kind, h, w, seed) > 0


def overlap_fraction(a: np.ndarray, b: np.ndarray) -> float:
    smaller = min(a.sum(), b.sum())
    if smaller == 0:
        return 0.0
    return float((a & b).sum() / smaller)


def render_sources(kinds, h: int, w: int, seed: int) -> list[np.ndarray]:
    """Render all phase images with pairwise footprint overlap below 10%."""
    for attempt in range(MAX_ATTEMPTS):
        images = [render_source(k, h, w, [seed, GEOMETRIES.index(k), attempt]) for k in kinds]
        masks = [img > 0 for img in images]
        ok = all(
            overlap_fraction(masks[i], masks[j]) < MAX_OVERLAP
            for i in range(len(masks)) for j in range(i + 1, len(masks))
        )
        if ok and all(m.any() for m in masks):
            return images
    raise PhantomError(f"could not satisfy the overlap constraint in {MAX_ATTEMPTS} attempts")


def mixing_matrix(spec: PhantomSpec) -> np.ndarray:
    t = np.arange(spec.d, dtype=np.float64)
    cols = [gamma_variate(t, ph.bolus.t0, ph.bolus.alpha, ph.bolus.beta, ph.bolus.amplitude)
            for ph in spec.phases]
    return np.stack(cols, axis=1)


def generate_phantom(spec: PhantomSpec = PhantomSpec()):
    """Build ``(ImageSeries, PhantomTruth)`` for ``spec``.

    Frame ``t`` is ``background + sum_j bolus_j(t) * source_j`` plus
    Gaussian noise, clamped to ``[0, 1]``. The series is bright-contrast.
    """
    kinds = [ph.geometry for ph in spec.phases]
    sources = np.stack(render_sources(kinds, spec.h, spec.w, spec.seed))
    mixing = mixing_matrix(spec)
    truth = PhantomTruth(
        sources=sources,
        mixing=mixing,
        vessel_mask=np.any(sources > 0, axis=0),
        phase_order=[GEOMETRY_PHASE[k] for k in kinds],
        background=spec.background,
        onsets=[ph.bolus.t0 for ph in spec.phases],
    )
    frames = truth.clean_frames()
    if spec.noise_sigma > 0:
        rng = np.random.default_rng([spec.seed, 7919])
        frames = frames + rng.normal(0.0, spec.noise_sigma, size=frames.shape)
    frames = np.clip(frames, 0.0, 1.0)
    series = ImageSeries(frames, fps=spec.fps, polarity=Polarity.BRIGHT)
    return series, truth


def truth_to_dict(truth: PhantomTruth, spec: PhantomSpec | None = None) -> dict:
    out = {
        "schema": 1,
        "labels": [ph.key for ph in truth.phase_order],
        "onsets": list(truth.onsets),
        "mixing": truth.mixing.tolist(),
        "background": truth.background,
        "masks": [f"truth/{ph.key}.png" for ph in truth.phase_order],
        "vessel_mask": "truth/vessel_mask.png",
        "shape": list(truth.vessel_mask.shape),
    }
    if spec is not None:
        out["spec"] = spec.to_dict()
    return out


def write_phantom(series: ImageSeries, truth: PhantomTruth, directory, spec=None) -> Path:
    """Write frames (16 bit), sidecar, ``truth/*.png`` masks and ``truth.json``."""
    directory = Path(directory)
    paths = write_gray_series(series, directory, bit_depth=16)
    write_sidecar(series, directory, frame_names=[p.name for p in paths])
    info = truth_to_dict(truth, spec)
    (directory / "truth").mkdir(exist_ok=True)
    for name, src in zip(info["masks"], truth.masks):
        write_gray_image(src.astype(float), directory / name)
    write_gray_image(truth.vessel_mask.astype(float), directory / info["vessel_mask"])
    with open(directory / TRUTH_NAME, "w") as fh:
        json.dump(info, fh, indent=2)
    return directory / TRUTH_NAME


def load_truth(directory) -> dict:
    """Read ``truth.json`` plus its masks; masks come back as bool arrays."""
    directory = Path(directory)
    path = directory / TRUTH_NAME
    if not path.is_file():
        raise PhantomError(f"no {TRUTH_NAME} in {directory}")
    with open(path) as fh:
        info = json.load(fh)
    try:
        info["mask_arrays"] = [(read_frame(directory / m) > 0) for m in info["masks"]]
        info["vessel_mask_array"] = read_frame(directory / info["vessel_mask"]) > 0
    except SeriesError as exc:
        raise PhantomError(str(exc)) from exc
    info["mixing_array"] = np.asarray(info["mixing"], dtype=np.float64)
    info["phases"] = [Phase.from_key(k) for k in info["labels"]]
    return info
