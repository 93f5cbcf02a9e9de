"""``dsaflow`` command line.

Subcommands: run, decompose, segment, recompose, phantom, eval.
Exit codes: 0 success, 1 error, 2 success with warnings (outputs written).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import warnings
from pathlib import Path

import numpy as np

from . import __version__, imageio, phantom, pipeline
from .ica import CONTRASTS, SCHEMES, IcaConfig, IcaError
from .imageio import RoiRect, SeriesError
from .phases import Phase
from .pipeline import PipelineError, RunOptions
from .recompose import DEFAULT_BLEND, DEFAULT_TAU, MODES
from .segment import DEFAULT_SCALES, extract_patches, segment_series, write_patches

EXIT_OK, EXIT_ERROR, EXIT_WARN = 0, 1, 2


def _use_color(stream) -> bool:
    return "NO_COLOR" not in os.environ and hasattr(stream, "isatty") and stream.isatty()


def _say(level: str, message: str) -> None:
    colors = {"ok": "32", "warn": "33", "error": "31"}
    tag = level.upper()
    if _use_color(sys.stderr):
        tag = f"\033[{colors[level]}m{tag}\033[0m"
    print(f"{tag} {message}", file=sys.stderr)


# -- argument parsing ---------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad flags; 2 is reserved for warnings here
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_ERROR, f"{self.prog}: error: {message}\n")


def _pair(text: str) -> tuple[int, int]:
    try:
        a, b = (int(v) for v in text.split(","))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected 'a,b', got {text!r}") from exc
    return a, b


def _roi(text: str) -> RoiRect:
    try:
        return RoiRect.parse(text)
    except SeriesError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc


def _floats(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(v) for v in text.split(",") if v)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def _threshold(text: str) -> str:
    name, _, q = text.partition(":")
    if name == "otsu" and not q:
        return text
    if name == "quantile":
        try:
            if q and not 0 <= float(q) <= 1:
                raise ValueError
        except ValueError as exc:
            raise argparse.ArgumentTypeError(f"bad quantile in {text!r}") from exc
        return text
    raise argparse.ArgumentTypeError(f"threshold must be 'otsu' or 'quantile:q', got {text!r}")


def _add_ica_flags(p):
    g = p.add_argument_group("decomposition")
    g.add_argument("--components", type=int, default=3, help="number of phases p (2 or 3)")
    g.add_argument("--contrast", choices=CONTRASTS, default="logcosh")
    g.add_argument("--tol", type=float, default=IcaConfig.tol)
    g.add_argument("--max-iter", type=int, default=IcaConfig.max_iter)
    g.add_argument("--scheme", choices=SCHEMES, default="symmetric")
    g.add_argument("--seed", type=int, default=0)


def _add_series_flags(p):
    g = p.add_argument_group("series")
    g.add_argument("--trim", type=_pair, metavar="A,B", help="keep frames [A, B)")
    g.add_argument("--roi", type=_roi, metavar="X0,Y0,W,H", help="crop region of interest")


def _add_segment_flags(p):
    g = p.add_argument_group("segmentation")
    g.add_argument("--scales", type=_floats, default=DEFAULT_SCALES, help="vesselness sigmas, px")
    g.add_argument("--threshold", type=_threshold, default="otsu", help="otsu | quantile:q")
    g.add_argument("--mask", help="external vessel mask image (nonzero = vessel)")


def _add_recompose_flags(p):
    g = p.add_argument_group("visualization")
    g.add_argument("--mode", choices=MODES, default="progressive")
    g.add_argument("--tau", type=float, default=DEFAULT_TAU)
    g.add_argument("--blend", type=float, default=DEFAULT_BLEND, help="weight of the phase color")
    g.add_argument("--source-threshold", type=_threshold, default="otsu")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dsaflow", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"dsaflow {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="decompose, segment and recompose a series")
    p.add_argument("input", help="series directory")
    p.add_argument("--out", required=True)
    p.add_argument("--truth", help="directory with truth.json (default: the input directory if present)")
    p.add_argument("--dump-model", help="model.json path (default: OUT/model.json)")
    p.add_argument("--timings", action="store_true", help="record per-stage timings in the report")
    _add_series_flags(p)
    _add_ica_flags(p)
    _add_segment_flags(p)
    _add_recompose_flags(p)

    p = sub.add_parser("decompose", help="whiten + FastICA; writes model.json")
    p.add_argument("input")
    p.add_argument("--out", required=True)
    p.add_argument("--dump-model", help="model.json path (default: OUT/model.json)")
    _add_series_flags(p)
    _add_ica_flags(p)

    p = sub.add_parser("segment", help="vessel probability map and mask")
    p.add_argument("input")
    p.add_argument("--out", required=True)
    p.add_argument("--per-frame", action="store_true", help="segment each frame and OR the masks")
    p.add_argument("--patch-size", type=int, help="also export entropy-ranked patches of this size")
    p.add_argument("--stride", type=int)
    p.add_argument("--min-entropy", type=float, default=0.0)
    _add_series_flags(p)
    _add_segment_flags(p)

    p = sub.add_parser("recompose", help="color-coded series from a model.json")
    p.add_argument("input")
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    _add_series_flags(p)
    _add_segment_flags(p)
    _add_recompose_flags(p)

    p = sub.add_parser("phantom", help="write a synthetic series with ground truth")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=phantom.PhantomSpec.seed)
    p.add_argument("--height", type=int, default=phantom.PhantomSpec.h)
    p.add_argument("--width", type=int, default=phantom.PhantomSpec.w)
    p.add_argument("--frames", type=int, default=phantom.PhantomSpec.d)
    p.add_argument("--fps", type=float, default=phantom.PhantomSpec.fps)
    p.add_argument("--noise", type=float, default=phantom.PhantomSpec.noise_sigma)
    p.add_argument("--components", type=int, choices=(2, 3), default=3)
    p.add_argument("--onsets", type=_floats, help="bolus onsets in frames, one per phase")

    p = sub.add_parser("eval", help="score a run directory against a phantom truth directory")
    p.add_argument("pred_dir")
    p.add_argument("truth_dir")
    p.add_argument("--out", help="write the metrics JSON here as well")
    return parser


def _options(args) -> RunOptions:
    ica = IcaConfig(
        p=args.components, contrast=args.contrast, tol=args.tol,
        max_iter=args.max_iter, seed=args.seed, scheme=args.scheme,
    )
    return RunOptions(
        ica=ica,
        trim=args.trim,
        roi=args.roi,
        scales=tuple(args.scales),
        threshold=args.threshold,
        source_threshold=getattr(args, "source_threshold", "otsu"),
        mask_path=args.mask,
        mode=getattr(args, "mode", "progressive"),
        tau=getattr(args, "tau", DEFAULT_TAU),
        blend=getattr(args, "blend", DEFAULT_BLEND),
    )


def _convergence(dec) -> dict:
    m = dec.model
    return {"converged": m.converged, "iterations": m.iterations_run, "final_delta": m.final_delta}


def _truth_dir(args) -> Path | None:
    if args.truth:
        return Path(args.truth)
    candidate = Path(args.input)
    return candidate if (candidate / phantom.TRUTH_NAME).is_file() else None


# -- subcommands ----------------------------------------------------------------

def cmd_run(args) -> int:
    timings = {} if args.timings else None
    with pipeline.stage("config"):
        options = _options(args)
    display, analysis = pipeline.prepare_series(args.input, options.trim, options.roi, timings)
    dec = pipeline.decompose(analysis, options.ica, timings)
    vessel = pipeline.vessel_mask_for(analysis, options, timings)
    rec = pipeline.recompose(analysis, display, dec.sources, vessel, options, timings)

    out = Path(args.out)
    with pipeline.stage("write", timings):
        pipeline.write_recomposition(rec, out)
        model_path = Path(args.dump_model) if args.dump_model else out / pipeline.MODEL_NAME
        pipeline.write_json(pipeline.model_to_dict(dec, analysis.shape, analysis.fps,
                                                   {"preprocess": _preprocess_echo(options)}),
                            model_path)

    metrics = None
    truth_dir = _truth_dir(args)
    if truth_dir is not None:
        with pipeline.stage("eval"):
            truth = phantom.load_truth(truth_dir)
            metrics = pipeline.evaluate_recomposition(dec, rec, truth)

    warns = _warnings(dec, rec)
    report = {
        "schema": pipeline.SCHEMA,
        "command": "run",
        "input": str(args.input),
        "config": options.echo(),
        "convergence": _convergence(dec),
        "components": pipeline.component_records(rec),
        "vessel_mask": {"source": vessel.source, "threshold": vessel.threshold,
                        "pixels": int(vessel.values.sum())},
        "metrics": metrics,
        "warnings": warns,
    }
    if timings is not None:
        report["timings_ms"] = timings
    pipeline.write_json(report, out / pipeline.REPORT_NAME)
    return _finish(warns, f"wrote {len(rec.visualization)} frames to {out}", metrics)


def _preprocess_echo(options: RunOptions) -> dict:
    return {"trim": list(options.trim) if options.trim else None,
            "roi": options.roi.to_list() if options.roi else None}


def _warnings(dec, rec=None) -> list[str]:
    warns = []
    if not dec.model.converged:
        warns.append(f"FastICA did not converge in {dec.model.iterations_run} iterations "
                     f"(final delta {dec.model.final_delta:.3g})")
    if rec is not None:
        for j, m in enumerate(rec.source_masks):
            if not m.values.any():
                warns.append(f"component {j} produced an empty source mask")
        if not rec.vessel_mask.values.any():
            warns.append("vessel mask is empty")
    return warns


def _finish(warns, summary, metrics=None) -> int:
    for w in warns:
        _say("warn", w)
    if metrics is not None:
        _say("ok" if metrics["order_correct"] else "warn",
             f"amari={metrics['amari_index']:.4f} dice={metrics['dice']:.3f} "
             f"order_correct={metrics['order_correct']}")
    _say("ok", summary)
    return EXIT_WARN if warns else EXIT_OK


def cmd_decompose(args) -> int:
    with pipeline.stage("config"):
        ica = IcaConfig(p=args.components, contrast=args.contrast, tol=args.tol,
                        max_iter=args.max_iter, seed=args.seed, scheme=args.scheme)
    options = RunOptions(ica=ica, trim=args.trim, roi=args.roi)
    _, analysis = pipeline.prepare_series(args.input, args.trim, args.roi)
    dec = pipeline.decompose(analysis, ica)
    out = Path(args.out)
    with pipeline.stage("write"):
        model_path = Path(args.dump_model) if args.dump_model else out / pipeline.MODEL_NAME
        pipeline.write_json(pipeline.model_to_dict(dec, analysis.shape, analysis.fps,
                                                   {"preprocess": _preprocess_echo(options)}),
                            model_path)
        for j, src in enumerate(dec.sources.sources):
            lo, hi = src.min(), src.max()
            img = (src - lo) / (hi - lo) if hi > lo else np.zeros_like(src)
            imageio.write_gray_image(img, out / f"source_{j}.png")
    return _finish(_warnings(dec), f"wrote {model_path}")


def cmd_segment(args) -> int:
    with pipeline.stage("config"):
        options = RunOptions(scales=tuple(args.scales), threshold=args.threshold, mask_path=args.mask)
    _, analysis = pipeline.prepare_series(args.input, args.trim, args.roi)
    out = Path(args.out)
    with pipeline.stage("segment"):
        if options.mask_path:
            mask = pipeline.vessel_mask_for(analysis, options)
            pmap = None
        else:
            pmap, mask = segment_series(analysis, options.scales, options.threshold, args.per_frame)
    with pipeline.stage("write"):
        out.mkdir(parents=True, exist_ok=True)
        imageio.write_gray_image(mask.values.astype(float), out / "vessel_mask.png")
        if pmap is not None:
            imageio.write_gray_image(pmap.values, out / "probability.png")
        n_patches = None
        if args.patch_size:
            patches = extract_patches(analysis, args.patch_size, args.stride, args.min_entropy)
            write_patches(patches, out / "patches")
            n_patches = len(patches)
        pipeline.write_json({
            "schema": pipeline.SCHEMA,
            "command": "segment",
            "input": str(args.input),
            "threshold": mask.threshold,
            "source": mask.source,
            "pixels": int(mask.values.sum()),
            "patches": n_patches,
        }, out / "segment.json")
    warns = [] if mask.values.any() else ["vessel mask is empty"]
    return _finish(warns, f"wrote vessel mask to {out}")


def cmd_recompose(args) -> int:
    with pipeline.stage("model"):
        dec = pipeline.model_from_dict(pipeline.read_json(args.model))
        saved = pipeline.read_json(args.model).get("preprocess", {})
    trim = args.trim or (tuple(saved["trim"]) if saved.get("trim") else None)
    roi = args.roi or (RoiRect(*saved["roi"]) if saved.get("roi") else None)
    with pipeline.stage("config"):
        options = RunOptions(ica=dec.config, trim=trim, roi=roi, scales=tuple(args.scales),
                             threshold=args.threshold, source_threshold=args.source_threshold,
                             mask_path=args.mask, mode=args.mode, tau=args.tau, blend=args.blend)
    display, analysis = pipeline.prepare_series(args.input, trim, roi)
    if analysis.shape != dec.sources.sources.shape[1:]:
        raise PipelineError("recompose", f"series {analysis.shape} does not match model "
                                         f"{dec.sources.sources.shape[1:]}")
    vessel = pipeline.vessel_mask_for(analysis, options)
    rec = pipeline.recompose(analysis, display, dec.sources, vessel, options)
    out = Path(args.out)
    with pipeline.stage("write"):
        pipeline.write_recomposition(rec, out)
    warns = _warnings(dec, rec)
    pipeline.write_json({
        "schema": pipeline.SCHEMA,
        "command": "recompose",
        "input": str(args.input),
        "model": str(args.model),
        "config": options.echo(),
        "convergence": _convergence(dec),
        "components": pipeline.component_records(rec),
        "vessel_mask": {"source": vessel.source, "threshold": vessel.threshold,
                        "pixels": int(vessel.values.sum())},
        "warnings": warns,
    }, out / pipeline.REPORT_NAME)
    return _finish(warns, f"wrote {len(rec.visualization)} frames to {out}")


def cmd_phantom(args) -> int:
    with pipeline.stage("phantom"):
        kinds = phantom.GEOMETRIES if args.components == 3 else ("curve_artery", "curve_vein")
        defaults = {ph.geometry: ph.bolus for ph in phantom.DEFAULT_PHASES}
        boluses = [defaults[k] for k in kinds]
        if args.onsets:
            if len(args.onsets) != len(kinds):
                raise ValueError(f"--onsets needs {len(kinds)} values")
            boluses = [phantom.Bolus(t0, b.alpha, b.beta, b.amplitude)
                       for t0, b in zip(args.onsets, boluses)]
        spec = phantom.PhantomSpec(
            h=args.height, w=args.width, d=args.frames, fps=args.fps,
            phases=tuple(phantom.PhaseSpec(k, b) for k, b in zip(kinds, boluses)),
            noise_sigma=args.noise, seed=args.seed,
        )
        series, truth = phantom.generate_phantom(spec)
        phantom.write_phantom(series, truth, args.out, spec)
    return _finish([], f"wrote {spec.d}-frame phantom to {args.out}")


def _load_prediction(pred_dir: Path) -> dict:
    """Read a run directory, or a truth directory used as its own prediction."""
    model_path = pred_dir / pipeline.MODEL_NAME
    if model_path.is_file():
        dec = pipeline.model_from_dict(pipeline.read_json(model_path))
        report = pipeline.read_json(pred_dir / pipeline.REPORT_NAME)
        labels = {c["index"]: Phase.from_key(c["phase"]) for c in report["components"]}
        masks_dir = pred_dir / "masks"
        vessel = imageio.read_frame(masks_dir / "vessel_mask.png") > 0
        phase_masks = {}
        for ph in set(labels.values()):
            path = masks_dir / f"phase_{ph.key}.png"
            if path.is_file():
                phase_masks[ph] = imageio.read_frame(path) > 0
        return {"mixing": dec.sources.mixing, "sources": dec.sources.sources,
                "labels": labels, "vessel": vessel, "phase_masks": phase_masks}
    if (pred_dir / phantom.TRUTH_NAME).is_file():
        t = phantom.load_truth(pred_dir)
        masks = np.stack(t["mask_arrays"]).astype(float)
        return {"mixing": t["mixing_array"], "sources": masks,
                "labels": dict(enumerate(t["phases"])), "vessel": t["vessel_mask_array"],
                "phase_masks": dict(zip(t["phases"], t["mask_arrays"]))}
    raise PipelineError("eval", f"{pred_dir} has neither {pipeline.MODEL_NAME} nor {phantom.TRUTH_NAME}")


def cmd_eval(args) -> int:
    with pipeline.stage("eval"):
        truth = phantom.load_truth(args.truth_dir)
        pred = _load_prediction(Path(args.pred_dir))
        metrics = pipeline.evaluate(pred["mixing"], pred["sources"], pred["labels"],
                                    pred["vessel"], pred["phase_masks"], truth)
    text = json.dumps(metrics, indent=1)
    print(text)
    if args.out:
        pipeline.write_json(metrics, args.out)
    return EXIT_OK


COMMANDS = {
    "run": cmd_run,
    "decompose": cmd_decompose,
    "segment": cmd_segment,
    "recompose": cmd_recompose,
    "phantom": cmd_phantom,
    "eval": cmd_eval,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            return COMMANDS[args.command](args)
    except PipelineError as exc:
        _say("error", str(exc))
        return EXIT_ERROR
    except (SeriesError, IcaError, ValueError, OSError) as exc:
        _say("error", f"[{args.command}] {exc}")
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
