"""Command-line interface: compress, decompress, eval, mask, synth, inspect.

Knobs come from flags, then an optional TOML file (``--config``), then defaults;
flags win. ``GAEC_WORKERS`` overrides the worker default.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np
import tomli

from .container import (Archive, CompressConfig, compress, decode_with_bounds, verify_bounds,
                        write_manifest)
from .errors import ConfigError, ExternalReferenceError, GaecError, IntegrityError, NoEventsError
from .grid import Field, PadPolicy, PartitionSpec, read_field, write_field
from .metrics import (composed_bound, fn_ratio, iou, match_tc, metrics_csv, metrics_table,
                      relative_l2)
from .predictor import KINDS, ExternalSource, PredictorKind, read_latents
from .roi import (Bounds, HeatmapParams, classify_patches, heatmap_series, is_mask_file, read_mask,
                  read_points, roi_ratio, threshold_map, write_mask)
from .synth import SynthParams, generate

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_INTEGRITY = 4
EXIT_BOUND = 5

# name -> (default, help); every compress knob, also accepted as a config-file key
KNOBS: dict[str, tuple[object, str]] = {
    "patch": ([8, 16, 16], "patch extent T H W (guarantee unit)"),
    "pad_policy": ("edge", "padding for non-divisible extents: edge, reflect, zero, none"),
    "predictor": ("block_mean", f"predictor kind: {', '.join(KINDS)}"),
    "factors": ([2, 4, 4], "downsample factors T H W (must divide the patch)"),
    "tau_roi": (None, "l2 bound per ROI patch; required"),
    "tau_buf": (None, "l2 bound per buffer patch (default: tau_roi)"),
    "tau_bg": (None, "l2 bound per background patch (default: tau_buf)"),
    "roi_fraction": (0.05, "share of ROI cells that makes a patch ROI"),
    "connectivity": (8, "buffer neighbourhood in the patch grid: 4 or 8"),
    "buffer_depth": (1, "buffer ring width in patches"),
    "temporal_buffer": (False, "also buffer the previous/next time block"),
    "accept": (0.5, "threshold applied when the ROI input is a probability map"),
    "coef_bin": (None, "absolute coefficient bin size (default: derived per class)"),
    "coef_bin_rel": (2.0, "coefficient bin = coef_bin_rel * tau / sqrt(D)"),
    "payload_bin": (None, "absolute predictor payload bin size"),
    "payload_bin_rel": (0.5, "payload bin = payload_bin_rel * tau_roi / sqrt(D)"),
    "latent_bin": (None, "bin size for EXTERNAL latents (default: payload bin)"),
    "k_store": (None, "store at most this many basis columns (tail covered by fallback)"),
    "no_fallback": (False, "fail instead of storing raw patches that cannot meet their bound"),
    "workers": (None, "worker threads (default: GAEC_WORKERS or CPU count)"),
}


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True)


def _fmt(value) -> str:
    return " ".join(map(str, value)) if isinstance(value, list) else str(value)


def _add_knobs(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("compression knobs")
    for name, (default, text) in KNOBS.items():
        flag = "--" + name.replace("_", "-")
        shown = text if default is None else f"{text} [default: {_fmt(default)}]"
        if isinstance(default, bool):
            g.add_argument(flag, action="store_const", const=True, default=None, help=shown)
        elif isinstance(default, list):
            g.add_argument(flag, type=int, nargs=3, default=None, metavar="N", help=shown)
        elif name in ("predictor", "pad_policy"):
            g.add_argument(flag, default=None, help=shown)
        elif name in ("connectivity", "buffer_depth", "k_store", "workers"):
            g.add_argument(flag, type=int, default=None, help=shown)
        else:
            g.add_argument(flag, type=float, default=None, help=shown)


def resolve_config(args: argparse.Namespace) -> dict[str, dict]:
    """Merge flags > config file > environment (workers only) > defaults, recording provenance."""
    file_vals = {}
    if getattr(args, "config", None):
        try:
            file_vals = tomli.loads(Path(args.config).read_text())
        except tomli.TOMLDecodeError as exc:
            raise ConfigError(f"{args.config}: {exc}") from exc
        unknown = set(file_vals) - set(KNOBS)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    out = {}
    for name, (default, _) in KNOBS.items():
        flag_val = getattr(args, name, None)
        if flag_val is not None:
            out[name] = {"value": flag_val, "source": "flag"}
        elif name in file_vals:
            out[name] = {"value": file_vals[name], "source": "file"}
        elif name == "workers" and os.environ.get("GAEC_WORKERS"):
            out[name] = {"value": int(os.environ["GAEC_WORKERS"]), "source": "env"}
        elif name == "workers":
            out[name] = {"value": os.cpu_count() or 1, "source": "default"}
        else:
            out[name] = {"value": default, "source": "default"}
    return out


def build_config(knobs: dict[str, dict]) -> tuple[CompressConfig, bool]:
    """CompressConfig from resolved knobs; also reports whether bounds differ by class."""
    v = {k: d["value"] for k, d in knobs.items()}
    if v["tau_roi"] is None:
        raise ConfigError("--tau-roi is required")
    try:
        spec = PartitionSpec(*v["patch"], pad_policy=PadPolicy(v["pad_policy"]))
        bounds = Bounds(v["tau_roi"], v["tau_buf"], v["tau_bg"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    kind = PredictorKind(v["predictor"], tuple(v["factors"]), None)
    if v["connectivity"] not in (4, 8):
        raise ConfigError("connectivity must be 4 or 8")
    if not 0 < v["roi_fraction"] <= 1:
        raise ConfigError("roi_fraction must lie in (0, 1]")
    cfg = CompressConfig(
        spec=spec, predictor=kind, bounds=bounds,
        coef_bin=v["coef_bin"], coef_bin_rel=v["coef_bin_rel"],
        payload_bin=v["payload_bin"], payload_bin_rel=v["payload_bin_rel"],
        latent_bin=v["latent_bin"], k_store=v["k_store"],
        allow_fallback=not v["no_fallback"], workers=int(v["workers"]),
    )
    cfg.validate()
    differential = len(set(bounds.as_tuple())) > 1
    return cfg, differential


def _load_roi_mask(path: str, accept: float) -> np.ndarray:
    if is_mask_file(path):
        return read_mask(path)
    return threshold_map(read_field(path).data, accept)


def _external(args, kind: PredictorKind) -> tuple[ExternalSource | None, PredictorKind]:
    if kind.kind != "external":
        return None, kind
    if not args.reference:
        raise ConfigError("--reference is required for the external predictor")
    recon = read_field(args.reference)
    latents = read_latents(args.latents) if getattr(args, "latents", None) else None
    return ExternalSource(recon, latents), PredictorKind("external", kind.factors, Path(args.reference).name)


def cmd_compress(args) -> int:
    knobs = resolve_config(args)
    cfg, differential = build_config(knobs)
    if differential and not args.mask:
        raise ConfigError("differential bounds need --mask (ROI mask or probability map)")
    v = {k: d["value"] for k, d in knobs.items()}
    mask = _load_roi_mask(args.mask, v["accept"]) if args.mask else None
    if args.reference and cfg.predictor.kind != "external":
        raise ConfigError("--reference given but the predictor is not external")
    external, cfg.predictor = _external(args, cfg.predictor)

    inputs = [read_field(p) for p in args.inputs]
    multi = len(inputs) > 1
    out = Path(args.output)
    if multi:
        out.mkdir(parents=True, exist_ok=True)
    summaries = []
    entries = []
    for fld, src in zip(inputs, args.inputs):
        class_map = None
        if mask is not None:
            if mask.shape != fld.shape:
                raise ConfigError(f"mask shape {mask.shape} does not match field {fld.shape}")
            class_map = classify_patches(mask, cfg.spec, cfg.bounds, v["roi_fraction"],
                                         v["connectivity"], v["buffer_depth"], bool(v["temporal_buffer"]))
        result = compress(fld, cfg, class_map=class_map, external=external)
        path = out / f"{fld.name}.gaec" if multi else out
        result.archive.save(path)
        summary = result.summary(fld)
        summary["input"] = str(src)
        summary["archive"] = str(path)
        if class_map is not None:
            summary["roi_ratio_patches"] = roi_ratio(result.class_map)
            summary["roi_ratio_cells"] = roi_ratio(mask)
        if not args.no_verify:
            summary.update(verify_bounds(fld, result.archive, external, cfg.workers))
        summaries.append(summary)
        entries.append({"name": fld.name, "archive": path.name, "original_bytes": fld.nbytes,
                        "archive_bytes": summary["archive_bytes"],
                        "compression_ratio": summary["compression_ratio"]})
    report = {"config": knobs, "results": summaries}
    if multi:
        report["manifest"] = write_manifest(entries, out / "manifest.json")
    text = _dump(report)
    if args.summary:
        Path(args.summary).write_text(text + "\n")
    print(text)
    if any(not s.get("bounds_verified", True) for s in summaries):
        return EXIT_BOUND
    return EXIT_OK


def cmd_decompress(args) -> int:
    archive = Archive.load(args.archive)
    external = None
    if archive.meta["predictor"]["kind"] == "external":
        if not args.reference:
            raise ExternalReferenceError("archive uses an external reconstruction; pass --reference")
        external = ExternalSource(read_field(args.reference))
    workers = args.workers or int(os.environ.get("GAEC_WORKERS", 0) or os.cpu_count() or 1)
    dec = decode_with_bounds(archive, external, workers)
    write_field(dec.field, args.output)
    print(_dump({"archive": args.archive, "output": args.output, "shape": list(dec.field.shape),
                 "patches": int(dec.taus.size)}))
    return EXIT_OK


def cmd_eval(args) -> int:
    orig = read_field(args.original)
    rows: list[tuple[str, object]] = []
    if args.recon:
        recon = read_field(args.recon)
        rows.append(("relative_l2", relative_l2(orig, recon)))
        if args.archive:
            archive = Archive.load(args.archive)
            external = ExternalSource(read_field(args.reference)) if args.reference else None
            dec = decode_with_bounds(archive, external)
            bound = composed_bound(dec.taus, orig)
            rows.append(("composed_bound", bound))
            rows.append(("within_composed_bound", int(rows[0][1] <= bound)))
    if args.truth_tc and args.test_tc:
        m = match_tc(read_points(args.truth_tc), read_points(args.test_tc), args.match_radius)
        rows.append(("tc_total", m.n_total))
        rows.append(("tc_error", m.n_error))
        rows.append(("tc_spurious", m.n_spurious))
        rows.append(("tc_error_rate_pct", m.rate if m.n_total else None))
    if args.truth_ar and args.test_ar:
        rows.append(("ar_iou", iou(read_mask(args.truth_ar), read_mask(args.test_ar))))
    if args.roi_mask:
        roi = read_mask(args.roi_mask)
        rows.append(("roi_ratio", roi_ratio(roi)))
        for label, src, loader in (("fn_ratio_tc", args.truth_tc, read_points),
                                   ("fn_ratio_ar", args.truth_ar, read_mask)):
            if src:
                try:
                    rows.append((label, fn_ratio(loader(src), roi)))
                except NoEventsError:
                    rows.append((label, None))
    if args.output:
        Path(args.output).write_text(metrics_csv(rows))
    print(metrics_table(rows))
    return EXIT_OK


def cmd_mask(args) -> int:
    if bool(args.points) == bool(args.prob_map):
        raise ConfigError("give exactly one of --points or --prob-map")
    if args.points:
        if not args.shape:
            raise ConfigError("--shape T H W is required with --points")
        try:
            params = HeatmapParams(args.amplitude, args.sigma)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        prob = heatmap_series(read_points(args.points), params, args.shape)
        if args.heatmap_out:
            write_field(Field("heatmap", prob), args.heatmap_out)
    else:
        prob = read_field(args.prob_map).data.astype(np.float64)
    mask = threshold_map(prob, args.accept)
    write_mask(mask, args.output)
    print(_dump({"output": args.output, "shape": list(mask.shape), "roi_ratio": roi_ratio(mask),
                 "peak": float(prob.max()) if prob.size else 0.0}))
    return EXIT_OK


def cmd_synth(args) -> int:
    shape = tuple(args.shape) if args.shape else SynthParams.shape
    params = SynthParams(seed=args.seed, shape=shape, roi_coverage=args.roi_coverage)
    corpus = generate(params)
    files = corpus.write(args.output)
    print(_dump({"output": args.output, "files": files, "roi_ratio": float(corpus.roi_mask.mean())}))
    return EXIT_OK


def cmd_inspect(args) -> int:
    archive = Archive.load(args.archive)
    table = [{"tag": t, "offset": o, "length": n, "checksum": f"{c:016x}"}
             for t, o, n, c in archive.section_table()]
    print(_dump({"archive": args.archive, "bytes": len(archive), "sections": table,
                 "meta": archive.meta}))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gaec", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("compress", help="compress field files into .gaec archives")
    p.add_argument("inputs", nargs="+", help="field files (raw float32 + .hdr sidecar)")
    p.add_argument("-o", "--output", required=True,
                   help="archive path, or a directory when several inputs are given")
    p.add_argument("--mask", help="ROI bitset mask or probability-map field")
    p.add_argument("--config", help="TOML file with knob values")
    p.add_argument("--reference", help="external reconstruction field (predictor=external)")
    p.add_argument("--latents", help="external latent vectors file")
    p.add_argument("--summary", help="also write the JSON summary here")
    p.add_argument("--no-verify", action="store_true", help="skip decode-and-check of every bound")
    _add_knobs(p)
    p.set_defaults(func=cmd_compress)

    p = sub.add_parser("decompress", help="decode an archive to a field file")
    p.add_argument("archive")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--reference", help="external reconstruction used at compression time")
    p.add_argument("--workers", type=int, default=None,
                   help="worker threads [default: GAEC_WORKERS or CPU count]")
    p.set_defaults(func=cmd_decompress)

    p = sub.add_parser("eval", help="metrics between original/reconstructed data and detections")
    p.add_argument("--original", required=True)
    p.add_argument("--recon")
    p.add_argument("--archive", help="archive of --recon, for the composed per-patch bound")
    p.add_argument("--reference", help="external reconstruction for --archive")
    p.add_argument("--truth-tc", help="ground-truth TC points CSV (frame,u,v)")
    p.add_argument("--test-tc", help="TC points detected on reconstructed data")
    p.add_argument("--match-radius", type=float, default=2.0,
                   help="TC match radius in grid cells [default: 2.0]")
    p.add_argument("--truth-ar", help="ground-truth AR mask")
    p.add_argument("--test-ar", help="AR mask detected on reconstructed data")
    p.add_argument("--roi-mask", help="predicted ROI mask for ROI and FN ratios")
    p.add_argument("-o", "--output", help="metrics CSV path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("mask", help="build an ROI mask from TC points or a probability map")
    p.add_argument("--points", help="TC points CSV (frame,u,v)")
    p.add_argument("--prob-map", help="probability map field")
    p.add_argument("--shape", type=int, nargs=3, metavar="N", help="T H W for --points")
    p.add_argument("--amplitude", type=float, default=1.0, help="heatmap peak [default: 1.0]")
    p.add_argument("--sigma", type=float, default=3.0, help="heatmap spread in cells [default: 3.0]")
    p.add_argument("--accept", type=float, default=0.5, help="acceptance threshold [default: 0.5]")
    p.add_argument("--heatmap-out", help="also write the heatmap field")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_mask)

    p = sub.add_parser("synth", help="generate the synthetic test corpus")
    p.add_argument("--seed", type=int, default=7, help="[default: 7]")
    p.add_argument("--shape", type=int, nargs=3, metavar="N",
                   help=f"T H W [default: {' '.join(map(str, SynthParams.shape))}]")
    p.add_argument("--roi-coverage", type=float, default=0.10, help="[default: 0.10]")
    p.add_argument("-o", "--output", required=True, help="output directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("inspect", help="dump an archive's section table and metadata")
    p.add_argument("archive")
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"gaec: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (IntegrityError, ExternalReferenceError) as exc:
        print(f"gaec: integrity error: {exc}", file=sys.stderr)
        return EXIT_INTEGRITY
    except (OSError, KeyError, ValueError) as exc:
        print(f"gaec: io error: {exc}", file=sys.stderr)
        return EXIT_IO
    except GaecError as exc:
        print(f"gaec: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
