"""Stage wiring and JSON interchange used by the command line.

Every stage error is re-raised as :class:`PipelineError` carrying the stage
name, so the CLI can report where a run failed.
"""

from __future__ import annotations

import json
import time
import warnings
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import imageio, preprocess
from .ica import ConvergenceWarning, IcaConfig, SourceSet, UnmixingModel, amari_index, fastica
from .imageio import ImageSeries, RoiRect
from .phases import Phase
from .preprocess import WhiteningTransform
from .recompose import (
    DEFAULT_BLEND,
    DEFAULT_TAU,
    PhaseAssignment,
    Visualization,
    assign_pixels,
    compose_visualization,
    order_phases,
    threshold_sources,
)
from .segment import DEFAULT_SCALES, VesselMask, load_external_mask, mask_metrics, segment_series

SCHEMA = 1
MODEL_NAME = "model.json"
REPORT_NAME = "report.json"


class PipelineError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


@contextmanager
def stage(name: str, timings: Optional[dict] = None):
    start = time.perf_counter()
    try:
        yield
    except PipelineError:
        raise
    except (ValueError, OSError, np.linalg.LinAlgError) as exc:
        raise PipelineError(name, str(exc)) from exc
    finally:
        if timings is not None:
            timings[name] = round((time.perf_counter() - start) * 1000.0, 3)


@dataclass
class RunOptions:
    ica: IcaConfig = field(default_factory=IcaConfig)
    trim: Optional[tuple[int, int]] = None
    roi: Optional[RoiRect] = None
    scales: tuple = DEFAULT_SCALES
    threshold: str = "otsu"
    source_threshold: str = "otsu"
    mask_path: Optional[str] = None
    mode: str = "progressive"
    tau: float = DEFAULT_TAU
    blend: float = DEFAULT_BLEND

    def echo(self) -> dict:
        return {
            "p": self.ica.p,
            "contrast": self.ica.contrast,
            "tol": self.ica.tol,
            "max_iter": self.ica.max_iter,
            "seed": self.ica.seed,
            "scheme": self.ica.scheme,
            "trim": list(self.trim) if self.trim else None,
            "roi": self.roi.to_list() if self.roi else None,
            "scales": [float(s) for s in self.scales],
            "threshold": self.threshold,
            "source_threshold": self.source_threshold,
            "mask": self.mask_path,
            "mode": self.mode,
            "tau": self.tau,
            "blend": self.blend,
        }


@dataclass
class Decomposition:
    model: UnmixingModel
    sources: SourceSet
    config: IcaConfig


@dataclass
class Recomposition:
    vessel_mask: VesselMask
    assignment: PhaseAssignment
    source_masks: list
    labels: np.ndarray
    visualization: Visualization


# -- series preparation -------------------------------------------------------

def prepare_series(directory, trim=None, roi=None, timings=None):
    """Load, trim and crop a series.

    Returns ``(display, analysis)``: the series in its original polarity and
    the signal-positive copy used for all computation.
    """
    with stage("load", timings):
        series = imageio.load_series(directory)
    with stage("trim", timings):
        if trim is not None:
            series = imageio.trim(series, *trim)
        roi = roi if roi is not None else series.roi
        if roi is not None:
            series = imageio.crop_roi(series, roi)
    return series, imageio.signal_positive(series)


# -- decomposition ------------------------------------------------------------

def decompose(series: ImageSeries, config: IcaConfig, timings=None, hook=None) -> Decomposition:
    """Vectorize, center, whiten and unmix a signal-positive series."""
    with stage("vectorize", timings):
        data = preprocess.vectorize(series)
    with stage("center", timings):
        centered, mean = preprocess.center(data)
    with stage("whiten", timings):
        whitened, transform = preprocess.whiten(centered, config.p, mean=mean)
    with stage("ica", timings):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", ConvergenceWarning)
            model, sources = fastica(whitened, config, transform, series.shape, hook=hook)
    return Decomposition(model, sources, config)


def model_to_dict(dec: Decomposition, shape, fps: float, extra: Optional[dict] = None) -> dict:
    m, s, t = dec.model, dec.sources, dec.model.whitening
    out = {
        "schema": SCHEMA,
        "shape": list(shape),
        "fps": fps,
        "config": asdict(dec.config),
        "convergence": {
            "converged": m.converged,
            "iterations": m.iterations_run,
            "final_delta": m.final_delta,
            "deltas": list(m.deltas),
        },
        "W": m.W.tolist(),
        "whitening": {
            "eigenvalues": t.eigenvalues.tolist(),
            "projection": t.projection.tolist(),
            "basis": t.basis.tolist(),
            "row_mean": t.row_mean.tolist(),
            "mean": t.mean.tolist(),
        },
        "mixing": s.mixing.tolist(),
        "sources": s.sources.reshape(s.p, -1).tolist(),
    }
    if extra:
        out.update(extra)
    return out


def model_from_dict(data: dict) -> Decomposition:
    if data.get("schema") != SCHEMA:
        raise PipelineError("model", f"unsupported model schema {data.get('schema')!r}")
    h, w = data["shape"]
    wt = data["whitening"]
    transform = WhiteningTransform(
        mean=np.asarray(wt["mean"]),
        row_mean=np.asarray(wt["row_mean"]),
        projection=np.asarray(wt["projection"]),
        basis=np.asarray(wt["basis"]),
        eigenvalues=np.asarray(wt["eigenvalues"]),
    )
    conv = data["convergence"]
    config = IcaConfig(**data["config"])
    model = UnmixingModel(
        W=np.asarray(data["W"]),
        whitening=transform,
        contrast=config.contrast,
        iterations_run=conv["iterations"],
        converged=conv["converged"],
        final_delta=conv["final_delta"],
        deltas=list(conv["deltas"]),
    )
    sources = np.asarray(data["sources"])
    return Decomposition(model, SourceSet(sources.reshape(-1, h, w), np.asarray(data["mixing"])), config)


def write_json(data: dict, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(data, fh, indent=1, allow_nan=False)
        fh.write("\n")
    return path


def read_json(path) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise PipelineError("io", f"cannot read {path}: {exc}") from exc


# -- segmentation and recomposition --------------------------------------------

def vessel_mask_for(series: ImageSeries, options: RunOptions, timings=None) -> VesselMask:
    with stage("segment", timings):
        if options.mask_path:
            return load_external_mask(options.mask_path, *series.shape)
        _, mask = segment_series(series, options.scales, options.threshold)
        return mask


def recompose(analysis: ImageSeries, display: ImageSeries, sources: SourceSet,
              vessel_mask: VesselMask, options: RunOptions, timings=None) -> Recomposition:
    with stage("recompose", timings):
        assignment = order_phases(sources, analysis.fps)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            masks = threshold_sources(sources, options.source_threshold)
        labels = assign_pixels(masks, assignment, vessel_mask, sources.sources)
        vis = compose_visualization(analysis, labels, options.mode, options.tau,
                                    options.blend, background=display.frames)
    return Recomposition(vessel_mask, assignment, masks, labels, vis)


def write_recomposition(rec: Recomposition, out_dir) -> None:
    out_dir = Path(out_dir)
    imageio.write_rgb_series(rec.visualization.frames, out_dir / "frames")
    masks_dir = out_dir / "masks"
    masks_dir.mkdir(parents=True, exist_ok=True)
    imageio.write_gray_image(rec.vessel_mask.values.astype(float), masks_dir / "vessel_mask.png")
    for phase in sorted(set(rec.assignment.labels.values())):
        imageio.write_gray_image((rec.labels == int(phase)).astype(float),
                                 masks_dir / f"phase_{phase.key}.png")


def component_records(rec: Recomposition) -> list[dict]:
    out = []
    for j, curve in enumerate(rec.assignment.curves):
        out.append({
            "index": j,
            "phase": rec.assignment.labels[j].key,
            "ttp_frames": curve.ttp_frames,
            "ttp_seconds": curve.ttp_seconds,
            "miv": curve.miv,
            "peak_value": curve.peak_value,
            "threshold": rec.source_masks[j].threshold,
        })
    return out


# -- evaluation against ground truth ------------------------------------------

def match_components(estimated: np.ndarray, truth: np.ndarray) -> list[int]:
    """For each estimated source, the truth index it corresponds to (by |corr|)."""
    p = estimated.shape[0]
    est = estimated.reshape(p, -1)
    tru = truth.reshape(truth.shape[0], -1)
    corr = np.abs(np.corrcoef(est, tru)[:p, p:])
    corr = np.nan_to_num(corr)
    rows, cols = linear_sum_assignment(-corr)
    match = [0] * p
    for r, c in zip(rows, cols):
        match[r] = int(c)
    return match


def evaluate(mixing, sources, labels: dict, vessel_mask, phase_masks: dict, truth: dict) -> dict:
    """Compare a prediction with a loaded ``truth.json`` (see phantom.load_truth).

    ``labels`` maps component index to :class:`Phase`; ``phase_masks`` maps
    :class:`Phase` to a boolean image.
    """
    true_mixing = truth["mixing_array"]
    true_masks = np.stack(truth["mask_arrays"])
    true_phases = truth["phases"]
    mixing = np.asarray(mixing)
    if mixing.shape != true_mixing.shape:
        raise PipelineError("eval", f"mixing shape {mixing.shape} does not match truth {true_mixing.shape}")
    match = match_components(np.asarray(sources), true_masks.astype(float))
    order_correct = all(labels[j] == true_phases[match[j]] for j in range(len(match)))
    vm = mask_metrics(vessel_mask, truth["vessel_mask_array"])
    phase_dice = {}
    for phase, tmask in zip(true_phases, true_masks):
        pred = phase_masks.get(phase, np.zeros_like(tmask))
        phase_dice[phase.key] = mask_metrics(pred, tmask)["dice"]
    return {
        "amari_index": amari_index(mixing, true_mixing),
        "dice": vm["dice"],
        "recall": vm["recall"],
        "precision": vm["precision"],
        "order_correct": bool(order_correct),
        "phase_dice": phase_dice,
        "matching": match,
    }


def evaluate_recomposition(dec: Decomposition, rec: Recomposition, truth: dict) -> dict:
    phase_masks = {ph: rec.labels == int(ph) for ph in Phase}
    return evaluate(dec.sources.mixing, dec.sources.sources, rec.assignment.labels,
                    rec.vessel_mask, phase_masks, truth)
