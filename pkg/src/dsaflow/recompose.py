"""Phase ordering and color-coded re-composition of a decomposed series.

Components are ordered by the time to peak of their mixing column (the
component's temporal signature), thresholded into binary source masks,
intersected with the vessel mask and painted onto the grayscale frames.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ica import SourceSet
from .imageio import ImageSeries
from .phases import PALETTE, PHASE_SEQUENCE, Phase
from .segment import VesselMask, threshold_values

DEFAULT_TAU = 0.2
DEFAULT_BLEND = 0.6  # weight of the phase color; gray gets 1 - blend
MODES = ("static", "progressive")


class RecomposeError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class TimeDensityCurve:
    samples: np.ndarray  # min-max normalized to [0, 1]
    fps: float
    miv: float
    ttp_frames: int
    peak_value: float  # un-normalized column value at the peak

    @property
    def ttp_seconds(self) -> float:
        return self.ttp_frames / self.fps


@dataclass(frozen=True, eq=False)
class PhaseAssignment:
    labels: dict  # component index -> Phase
    order: list  # component indices, earliest peak first
    curves: list  # TimeDensityCurve per component

    @property
    def peak_frames(self) -> list[int]:
        return [c.ttp_frames for c in self.curves]

    def phase_of(self, component: int) -> Phase:
        return self.labels[component]


@dataclass(frozen=True, eq=False)
class Visualization:
    frames: np.ndarray  # (d, h, w, 3) in [0, 1]
    labels: np.ndarray  # (h, w) Phase codes

    def __len__(self):
        return self.frames.shape[0]


def component_tdc(column, fps: float) -> TimeDensityCurve:
    column = np.asarray(column, dtype=np.float64).ravel()
    if column.size < 1:
        raise RecomposeError("empty mixing column")
    if not fps > 0:
        raise RecomposeError(f"fps must be positive, got {fps}")
    lo, hi = column.min(), column.max()
    if hi > lo:
        samples = (column - lo) / (hi - lo)
    else:
        samples = np.zeros_like(column)
    ttp = int(np.argmax(samples))  # first maximum, i.e. earliest frame
    return TimeDensityCurve(samples, float(fps), float(samples[ttp]), ttp, float(column[ttp]))


def order_phases(source_set: SourceSet, fps: float) -> PhaseAssignment:
    """Label components Arterial/(Nidal)/Venous by ascending time to peak.

    Ties go to the larger raw peak value, then to the lower index.
    """
    p = source_set.mixing.shape[1]
    if p not in PHASE_SEQUENCE:
        raise RecomposeError(f"phase ordering supports 2 or 3 components, got {p}")
    curves = [component_tdc(source_set.mixing[:, j], fps) for j in range(p)]
    order = sorted(range(p), key=lambda j: (curves[j].ttp_frames, -curves[j].peak_value, j))
    labels = {j: phase for j, phase in zip(order, PHASE_SEQUENCE[p])}
    return PhaseAssignment(labels=labels, order=order, curves=curves)


def threshold_sources(source_set: SourceSet, method="otsu") -> list[VesselMask]:
    """One binary mask per source; ``threshold`` holds the cut value."""
    out = []
    for src in source_set.sources:
        mask, t = threshold_values(src, method)
        out.append(VesselMask(mask, source="vesselness", threshold=t))
    return out


def assign_pixels(source_masks, assignment: PhaseAssignment, vessel_mask, sources) -> np.ndarray:
    """Label image of :class:`Phase` codes.

    Inside the vessel mask a pixel takes the phase of the component whose
    source mask claims it; among several claimants the largest source value
    wins. In-mask pixels nobody claims are ``UNASSIGNED``; everything
    outside the mask is ``BACKGROUND``.
    """
    vm = vessel_mask.values if isinstance(vessel_mask, VesselMask) else np.asarray(vessel_mask, bool)
    masks = [m.values if isinstance(m, VesselMask) else np.asarray(m, bool) for m in source_masks]
    sources = np.asarray(sources, dtype=np.float64)
    if len(masks) != len(assignment.labels) or sources.shape[0] != len(masks):
        raise RecomposeError("numbers of source masks, sources and labels differ")
    if any(m.shape != vm.shape for m in masks) or sources.shape[1:] != vm.shape:
        raise RecomposeError("dimension mismatch between masks, sources and vessel mask")

    # stack in temporal order so the result does not depend on component numbering
    order = assignment.order
    claims = np.stack([masks[j] for j in order])
    values = np.where(claims, np.stack([sources[j] for j in order]), -np.inf)
    winner = np.argmax(values, axis=0)
    codes = np.array([int(assignment.labels[j]) for j in order], dtype=np.uint8)

    labels = np.full(vm.shape, int(Phase.BACKGROUND), dtype=np.uint8)
    claimed = claims.any(axis=0)
    labels[vm] = int(Phase.UNASSIGNED)
    labels[vm & claimed] = codes[winner[vm & claimed]]
    return labels


def activation_frames(frames: np.ndarray, tau: float = DEFAULT_TAU) -> np.ndarray:
    """First frame where each pixel exceeds ``tau`` times its temporal maximum; -1 if never."""
    frames = np.asarray(frames, dtype=np.float64)
    active = frames > tau * frames.max(axis=0)[None]
    first = np.argmax(active, axis=0)
    return np.where(active.any(axis=0), first, -1)


def compose_visualization(series: ImageSeries, labels: np.ndarray, mode: str = "progressive",
                          tau: float = DEFAULT_TAU, blend: float = DEFAULT_BLEND,
                          background=None) -> Visualization:
    """Paint phase colors onto the grayscale frames.

    ``series`` must be signal-positive; it drives progressive gating. The
    gray layer is ``background`` (a ``(d, h, w)`` array) when given, else the
    series itself. In ``progressive`` mode a labeled pixel is colored in
    frame ``t`` only while its intensity exceeds ``tau`` times its temporal
    maximum; in ``static`` mode it is colored in every frame.
    """
    if mode not in MODES:
        raise RecomposeError(f"mode must be one of {MODES}, got {mode!r}")
    if not 0 <= blend <= 1:
        raise RecomposeError(f"blend must be in [0, 1], got {blend}")
    labels = np.asarray(labels)
    frames = series.frames
    if labels.shape != frames.shape[1:]:
        raise RecomposeError(f"label image {labels.shape} does not match frames {frames.shape[1:]}")
    gray = frames if background is None else np.asarray(background, dtype=np.float64)
    if gray.shape != frames.shape:
        raise RecomposeError(f"background {gray.shape} does not match series {frames.shape}")

    out = np.repeat(gray[..., None], 3, axis=-1)
    if mode == "progressive":
        active = frames > tau * frames.max(axis=0)[None]
    else:
        active = np.ones(frames.shape, dtype=bool)
    for phase, color in PALETTE.items():
        on = active & (labels == int(phase))[None]
        color = np.asarray(color)
        out[on] = (1.0 - blend) * out[on] + blend * color[None, :]
    return Visualization(np.clip(out, 0.0, 1.0), labels.copy())
