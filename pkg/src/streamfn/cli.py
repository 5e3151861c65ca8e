"""Command-line entry point: generate / train / eval / export / trace.

Exit codes: 0 success, 1 runtime or data error, 2 usage error.  Machine-readable
results go to stdout; progress and diagnostics go to stderr.  Every run writes a
JSON run manifest next to its outputs.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, evaluate, export, net as netmod, train as trainmod, volume
from .errors import StreamFnError, UsageError


def _sha256(path) -> str:
    h = hashlib.sha256()
    try:
        with open(path, "rb") as fh:
            for chunk in iter(lambda: fh.read(1 << 20), b""):
                h.update(chunk)
    except OSError:
        return "unavailable"
    return h.hexdigest()


def _write_run_manifest(out_dir, command, config, inputs, outputs, t0):
    manifest = {
        "command": command,
        "config": config,
        "input_hashes": {str(p): _sha256(p) for p in inputs},
        "outputs": [str(p) for p in outputs],
        "versions": {"streamfn": __version__, "numpy": np.__version__,
                     "python": sys.version.split()[0]},
        "wall_time_s": time.perf_counter() - t0,
    }
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"run_{command}_manifest.json"
    path.write_text(json.dumps(manifest, indent=2))
    return path


def _load_config_file(path) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except (OSError, json.JSONDecodeError) as e:
        raise UsageError(f"cannot read config file {path}: {e}") from e


def _progress(row):
    print(
        f"iter {row['iteration']:>6}  lr {row['lr']:.3g}  loss {row['loss']:.6g}",
        file=sys.stderr,
    )


def _load_model(path) -> netmod.StreamNet:
    return netmod.deserialize(path)


def _load_field(path) -> volume.VectorField:
    fld = volume.load_raw(path)
    if not isinstance(fld, volume.VectorField):
        raise UsageError(f"{path} is a scalar volume; a 3-component field is required")
    return fld


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_generate(args) -> int:
    t0 = time.perf_counter()
    dims = args.dims if len(args.dims) == 3 else args.dims * 3
    params = {}
    for kv in args.param or []:
        if "=" not in kv:
            raise UsageError(f"--param expects key=value, got {kv!r}")
        k, v = kv.split("=", 1)
        params[k] = float(v)
    fld = volume.gen_analytic(args.name, dims, params)
    out = Path(args.out or f"{args.name}.raw")
    volume.save_raw(fld, out)
    _write_run_manifest(out.parent, "generate",
                        {"name": args.name, "dims": list(dims), "params": params},
                        [], [out, volume.sidecar_path(out)], t0)
    print(f"wrote {out} ({dims[0]}x{dims[1]}x{dims[2]})")
    return 0


def cmd_train(args) -> int:
    t0 = time.perf_counter()
    cfg_dict = {}
    if args.config:
        cfg_dict.update(_load_config_file(args.config))
    overrides = {
        "loss_kind": args.loss,
        "iterations": args.iterations,
        "batch_size": args.batch,
        "lr0": args.lr,
        "seed": args.seed,
        "width": args.width,
        "hidden_layers": args.hidden_layers,
        "seeds_weight": args.seeds_weight,
    }
    cfg_dict.update({k: v for k, v in overrides.items() if v is not None})
    if args.rake is not None:
        cfg_dict["rake"] = trainmod.parse_rake(args.rake).to_json()
    config = trainmod.TrainConfig.from_json(cfg_dict)

    fld = _load_field(args.field)
    stream_net, history = trainmod.train(fld, config, progress=_progress)

    out = Path(args.out or "model.snet")
    out.parent.mkdir(parents=True, exist_ok=True)
    netmod.serialize(stream_net, out, provenance={
        "field": str(args.field), "field_sha256": _sha256(args.field),
        "config": config.to_json(),
    })
    hist_path = Path(str(out) + ".history.csv")
    trainmod.write_history_csv(history, hist_path)
    _write_run_manifest(out.parent, "train", config.to_json(), [args.field],
                        [out, Path(str(out) + ".json"), hist_path], t0)
    print(f"model={out}")
    print(f"final_loss={history[-1]['loss']:.8g}")
    return 0


def cmd_eval(args) -> int:
    t0 = time.perf_counter()
    stream_net = _load_model(args.model)
    fld = _load_field(args.field)
    _, stats = evaluate.err_volume(stream_net, fld)
    out_dir = Path(args.out or ".")
    out_dir.mkdir(parents=True, exist_ok=True)
    report_path = out_dir / "eval_report.json"
    report_path.write_text(json.dumps(stats.to_json(), indent=2))
    _write_run_manifest(out_dir, "eval", {"model": str(args.model), "field": str(args.field)},
                        [args.model, args.field], [report_path], t0)
    print(json.dumps(stats.to_json()))
    print(f"median_err_deg={stats.median:.6g}")
    return 0


def cmd_export(args) -> int:
    t0 = time.perf_counter()
    stream_net = _load_model(args.model)
    fld = _load_field(args.field) if args.field else None
    outputs = tuple(args.outputs) if args.outputs else ("scalar_raw",)

    needs_field = bool({"error_raw", "error_vtk"} & set(outputs))
    if needs_field and fld is None:
        raise UsageError("error outputs need --field")

    resolutions = args.res
    if not resolutions:
        if fld is None:
            raise UsageError("either --res or --field must be given")
        resolutions = [max(export.default_resolution(fld.dims))]

    out_dir = Path(args.out or ".")
    written = []
    median = None
    for res in resolutions:
        spec = export.ExportSpec(resolution=(res, res, res), outputs=outputs,
                                 out_dir=str(out_dir), prefix=f"stream_function_{res}")
        manifest = export.export_bundle(stream_net, fld, spec)
        written.append(manifest["manifest_path"])
        if "err_perp" in manifest:
            median = manifest["err_perp"]["median_deg"]
    if median is None and fld is not None:
        _, stats = evaluate.err_volume(stream_net, fld)
        median = stats.median
    _write_run_manifest(out_dir, "export",
                        {"model": str(args.model), "res": list(resolutions),
                         "outputs": list(outputs)},
                        [args.model] + ([args.field] if args.field else []), written, t0)
    if median is not None:
        print(f"median_err_deg={median:.6g}")
    else:
        print("median_err_deg=nan")
    return 0


def cmd_trace(args) -> int:
    t0 = time.perf_counter()
    fld = _load_field(args.field)
    rng = np.random.default_rng(args.seed if args.seed is not None else 0)

    samples = trainmod._FieldSamples(fld)
    idx = rng.integers(0, samples.count, size=args.seeds)
    seeds = samples.coords[idx]
    lines = [evaluate.trace_streamline(fld, s, args.h, args.steps) for s in seeds]

    report = {
        "streamlines": len(lines),
        "terminations": {t: sum(1 for l in lines if l.termination == t)
                         for t in ("max_steps", "left_domain", "stagnation")},
    }
    median = None
    if args.model:
        stream_net = _load_model(args.model)
        if args.check_constancy:
            cc = evaluate.constancy_check(stream_net, lines)
            report["constancy"] = {k: cc[k] for k in ("median", "max", "f_range")}
        _, stats = evaluate.err_volume(stream_net, fld)
        median = stats.median
    elif args.check_constancy:
        raise UsageError("--check-constancy needs --model")

    out_dir = Path(args.out or ".")
    out_dir.mkdir(parents=True, exist_ok=True)
    report_path = out_dir / "trace_report.json"
    report_path.write_text(json.dumps(report, indent=2))
    _write_run_manifest(out_dir, "trace",
                        {"field": str(args.field), "seeds": args.seeds, "h": args.h,
                         "steps": args.steps},
                        [args.field] + ([args.model] if args.model else []),
                        [report_path], t0)
    print(json.dumps(report))
    if median is not None:
        print(f"median_err_deg={median:.6g}")
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="streamfn",
        description="Train and evaluate implicit neural stream functions for 3D vector fields.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="sample an analytic vector field to a .raw volume")
    p.add_argument("name", choices=volume.ANALYTIC_FIELDS)
    p.add_argument("--dims", type=int, nargs="+", default=[64],
                   help="grid size (one value for a cube, or three)")
    p.add_argument("--param", action="append", metavar="KEY=VALUE",
                   help="generator parameter, e.g. A=1")
    p.add_argument("--out")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train a stream-function network on a vector field")
    p.add_argument("field", help=".raw volume with .json sidecar")
    p.add_argument("--config", help="JSON config file (flags override file values)")
    p.add_argument("--loss", choices=trainmod.LOSS_KINDS)
    p.add_argument("--iterations", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--width", type=int)
    p.add_argument("--hidden-layers", type=int, dest="hidden_layers")
    p.add_argument("--rake", help="JSON spec/file or inline segment:x1,y1,z1,x2,y2,z2")
    p.add_argument("--seeds-weight", type=float, dest="seeds_weight")
    p.add_argument("--out", help="model output path (.snet)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="orthogonality-error statistics of a trained model")
    p.add_argument("model")
    p.add_argument("field")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export", help="sample a model to grids and write raw/VTK volumes")
    p.add_argument("model")
    p.add_argument("--field", help="reference field, needed for error outputs")
    p.add_argument("--res", type=int, nargs="+", help="one or more cubic resolutions")
    p.add_argument("--outputs", nargs="+", choices=export.OUTPUT_KINDS)
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("trace", help="trace RK4 streamlines, optionally check f constancy")
    p.add_argument("field")
    p.add_argument("--model")
    p.add_argument("--seeds", type=int, default=50)
    p.add_argument("--h", type=float, default=0.01)
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--seed", type=int)
    p.add_argument("--check-constancy", action="store_true", dest="check_constancy")
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=cmd_trace)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 2
    except StreamFnError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
