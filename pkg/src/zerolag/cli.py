"""Command-line entry point.

Every subcommand writes machine-readable JSON. Failures print a single JSON line
``{"error": <code>, "message": <text>}`` to stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from . import plotting
from .blocks import FLOPS_CONSTANT, BlockKind, build_block, count_flops
from .data import SyntheticSceneSpec, gen_synthetic_dataset, load_dataset, read_frames, read_png, save_dataset, write_png
from .latsim import JitterTrace, TraceError, simulate
from .metrics import MsSsimParams, flops_report, ms_ssim, psnr
from .model import Model
from .modelfile import ModelFormatError, load_model, save_model
from .predict import FramePair, ModelSet, predict
from .tensor import ShapeError
from .train import METHODS, TrainConfig, train

log = logging.getLogger("zerolag")


class CliError(Exception):
    def __init__(self, code: str, message: str, status: int = 1):
        super().__init__(message)
        self.code = code
        self.status = status


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("usage", f"{self.prog}: {message}", status=2)


# --- helpers ------------------------------------------------------------------

def _read_json(path) -> dict:
    p = Path(path)
    if not p.is_file():
        raise CliError("file_not_found", f"no such file: {path}")
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise CliError("bad_json", f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None


def _write_json(path, obj) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n")


def _emit(obj) -> None:
    print(json.dumps(obj, sort_keys=True, allow_nan=False))


def _need_file(path) -> Path:
    p = Path(path)
    if not p.is_file():
        raise CliError("file_not_found", f"no such file: {path}")
    return p


def _need_dir(path) -> Path:
    p = Path(path)
    if not p.is_dir():
        raise CliError("file_not_found", f"no such directory: {path}")
    return p


def _dtype(args):
    return np.float64 if args.precision == "double" else np.float32


def _load_models(paths, dtype) -> list[Model]:
    models = []
    for p in paths:
        m = load_model(_need_file(p))
        if dtype != np.float32:
            m = Model(m.config, {k: v.astype(dtype) for k, v in m.weights.items()})
        models.append(m)
    return models


def _predictor(paths, method, dtype):
    """Resolve model files into ``(predictor, method, k_max)``."""
    models = _load_models(paths, dtype)
    if method is None:
        if len(models) > 1:
            method = "independent"
        else:
            method = "arbitrary" if models[0].config.embed_timestep else "recurrent"
    if method == "independent":
        return ModelSet(models), method, len(models)
    if len(models) != 1:
        raise CliError("bad_argument", f"method {method} takes exactly one model file, got {len(models)}")
    return models[0], method, models[0].config.k_max


def _json_float(x: float):
    return x if math.isfinite(x) else ("inf" if x > 0 else "-inf")


def _parse_resolution(text: str) -> tuple[int, int]:
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise CliError("bad_argument", f"resolution must look like HxW, got {text!r}") from None
    if h < 1 or w < 1:
        raise CliError("bad_argument", f"resolution must be positive, got {text!r}")
    return h, w


def _parse_k_range(text: str) -> list[int]:
    try:
        if ".." in text:
            lo, hi = (int(v) for v in text.split(".."))
            ks = list(range(lo, hi + 1))
        else:
            ks = [int(v) for v in text.split(",")]
    except ValueError:
        raise CliError("bad_argument", f"k range must look like 1..5 or 1,2,3, got {text!r}") from None
    if not ks or min(ks) < 1:
        raise CliError("bad_argument", f"k range must be non-empty with k >= 1, got {text!r}")
    return ks


def _globals(args) -> dict:
    # --threads is left out on purpose: it never changes results, and reports
    # must be byte-identical across thread counts
    return {"seed": args.seed, "precision": args.precision, "version": __version__}


# --- subcommands ------------------------------------------------------------------

def cmd_dataset_gen(args):
    raw = _read_json(args.spec)
    raw.setdefault("seed", args.seed)
    try:
        spec = SyntheticSceneSpec.from_dict(raw)
    except TypeError as exc:
        raise CliError("bad_config", f"{args.spec}: {exc}") from None
    seqs = gen_synthetic_dataset(spec, args.count)
    save_dataset(seqs, args.out)
    manifest = {"command": "dataset gen", "globals": _globals(args), "spec": spec.to_dict(),
                "count": args.count, "sequences": [f"seq_{i:04d}" for i in range(len(seqs))],
                "frames_per_sequence": spec.length}
    _write_json(Path(args.out) / "dataset.json", manifest)
    _emit({"out": str(args.out), "sequences": len(seqs)})


def _independent_paths(out: Path, k_max: int) -> list[Path]:
    return [out.with_name(f"{out.stem}_k{k}{out.suffix}") for k in range(1, k_max + 1)]


def cmd_train(args):
    raw = _read_json(args.config) if args.config else {}
    raw = {**raw, "method": args.method, "threads": args.threads}
    raw.setdefault("seed", args.seed)
    try:
        config = TrainConfig.from_dict(raw)
    except TypeError as exc:
        raise CliError("bad_config", f"{args.config}: {exc}") from None
    dataset = load_dataset(_need_dir(args.data))
    if args.precision == "double":
        log.warning("training runs in single precision; --precision double only affects inference")
    predictor, tlog = train(config, dataset)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    if config.method == "independent":
        paths = _independent_paths(out, config.k_max)
        for p, m in zip(paths, predictor.models):
            save_model(m, p)
    else:
        paths = [out]
        save_model(predictor, out)
    resolved = config.to_dict()
    del resolved["threads"]
    report = {"command": "train", "globals": _globals(args), "config": resolved,
              "data": {"dir": str(args.data), "sequences": len(dataset)},
              "models": [p.name for p in paths], "log": tlog.to_dict()}
    report_path = Path(args.report) if args.report else out.with_suffix(".train.json")
    _write_json(report_path, report)
    plotting.plot_losses(report, plotting.figure_path(report_path, "loss"))
    _emit({"models": [str(p) for p in paths], "report": str(report_path),
           "final_loss": tlog.epoch_losses[-1]})


def cmd_predict(args):
    predictor, method, k_max = _predictor(args.model, args.method, _dtype(args))
    if not 1 <= args.k <= k_max:
        raise CliError("k_out_of_range", f"k={args.k} outside the valid range 1..{k_max} for this {method} model")
    dtype = _dtype(args)
    prev = read_png(_need_file(args.prev)).astype(dtype)
    curr = read_png(_need_file(args.curr)).astype(dtype)
    img = predict(predictor, FramePair(prev, curr), args.k, method)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_png(args.out, img)
    _emit({"out": str(args.out), "k": args.k, "method": method})


def cmd_eval(args):
    pred_dir, gt_dir = _need_dir(args.pred), _need_dir(args.gt)
    names = sorted(p.name for p in pred_dir.glob("*.png"))
    if not names:
        raise CliError("file_not_found", f"no PNG files in {args.pred}")
    missing = [n for n in names if not (gt_dir / n).is_file()]
    if missing:
        raise CliError("file_not_found", f"ground truth missing for {missing[0]} in {args.gt}")
    params = MsSsimParams()
    frames = []
    for n in names:
        a, b = read_png(pred_dir / n), read_png(gt_dir / n)
        if a.shape != b.shape:
            raise CliError("shape_mismatch", f"{n}: prediction {a.shape} vs ground truth {b.shape}")
        frames.append({"name": n, "ms_ssim": ms_ssim(a, b, params), "psnr": psnr(a, b)})
    finite = [f["psnr"] for f in frames if math.isfinite(f["psnr"])]
    means = {"ms_ssim": float(np.mean([f["ms_ssim"] for f in frames])),
             "psnr": _json_float(float(np.mean(finite))) if len(finite) == len(frames) else "inf"}
    report = {"command": "eval", "globals": _globals(args), "pred": str(args.pred), "gt": str(args.gt),
              "params": params.to_dict(),
              "frames": [{**f, "psnr": _json_float(f["psnr"])} for f in frames], "means": means}
    _write_json(args.report, report)
    plotting.plot_eval(report, plotting.figure_path(args.report, "ms_ssim"))
    _emit({"report": str(args.report), **means})


def cmd_bench_flops(args):
    try:
        graph = build_block(args.block, args.c)
    except ValueError as exc:
        raise CliError("bad_argument", str(exc)) from None
    flops = count_flops(graph, args.c, args.h, args.w)
    print(str(flops))
    if args.report:
        table = []
        for kind in BlockKind:
            row = {"block": kind.value, "flops_per_c2hw": float(FLOPS_CONSTANT[kind]),
                   "flops_per_c2hw_exact": str(FLOPS_CONSTANT[kind])}
            try:
                row["flops"] = str(count_flops(build_block(kind, args.c), args.c, args.h, args.w))
            except ValueError as exc:
                row["flops"] = None
                row["note"] = str(exc)
            table.append(row)
        report = {"command": "bench flops", "globals": _globals(args),
                  "config": {"block": args.block, "c": args.c, "h": args.h, "w": args.w},
                  "flop_convention": "1 multiply-accumulate = 1 FLOP; conv layers only",
                  "flops": str(flops), "kinds": table}
        _write_json(args.report, report)
        plotting.plot_block_flops(table, plotting.figure_path(args.report, "blocks"))


def cmd_bench_model(args):
    models = _load_models(args.model, np.float32)
    rep = flops_report(models[0], _parse_resolution(args.resolution), args.strategy, _parse_k_range(args.k_range))
    out = {"command": "bench model", "globals": _globals(args), "config": models[0].config.to_dict(),
           **rep.to_dict()}
    _emit(out)
    if args.report:
        _write_json(args.report, out)
        plotting.plot_flops(out, plotting.figure_path(args.report, "flops"))


def cmd_simulate(args):
    dtype = _dtype(args)
    predictor, method, k_max = _predictor(args.model, args.method, dtype)
    if args.k_max is not None:
        if not 1 <= args.k_max <= k_max:
            raise CliError("k_out_of_range", f"--k-max {args.k_max} outside the valid range 1..{k_max}")
        k_max = args.k_max
    frames = read_frames(_need_dir(args.frames)).astype(dtype)
    try:
        trace = JitterTrace.from_dict(_read_json(args.trace))
    except TraceError as exc:
        raise CliError("bad_trace", f"{args.trace}: {exc}") from None
    report = simulate(predictor, frames, trace, args.fps, method, k_max=k_max)
    out = report.to_dict()
    out = {"command": "simulate", "globals": _globals(args),
           "inputs": {"models": [str(m) for m in args.model], "frames": str(args.frames), "trace": str(args.trace)},
           **out}
    _write_json(args.report, out)
    plotting.plot_simulation(out, plotting.figure_path(args.report, "timeline"))
    _emit({"report": str(args.report), **out["aggregates"]})


# --- parser -------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="zerolag", description="Convolutional video frame extrapolation toolkit.")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--precision", choices=("single", "double"), default="single")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--verbose", "-v", action="store_true")
    p.add_argument("--version", action="version", version=f"zerolag {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    ds = sub.add_parser("dataset", help="synthetic data")
    ds_sub = ds.add_subparsers(dest="action", required=True, parser_class=_Parser)
    g = ds_sub.add_parser("gen", help="render a synthetic moving-object dataset to PNGs")
    g.add_argument("--spec", required=True)
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_dataset_gen)

    t = sub.add_parser("train", help="train a model (or one model per k for independent)")
    t.add_argument("--method", choices=METHODS, required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--config")
    t.add_argument("--out", required=True)
    t.add_argument("--report")
    t.set_defaults(func=cmd_train)

    pr = sub.add_parser("predict", help="extrapolate k frames ahead from two PNGs")
    pr.add_argument("--model", nargs="+", required=True)
    pr.add_argument("--method", choices=METHODS)
    pr.add_argument("--prev", required=True)
    pr.add_argument("--curr", required=True)
    pr.add_argument("--k", type=int, required=True)
    pr.add_argument("--out", required=True)
    pr.set_defaults(func=cmd_predict)

    ev = sub.add_parser("eval", help="MS-SSIM / PSNR of predicted frames against ground truth")
    ev.add_argument("--pred", required=True)
    ev.add_argument("--gt", required=True)
    ev.add_argument("--report", required=True)
    ev.set_defaults(func=cmd_eval)

    b = sub.add_parser("bench", help="static FLOPs accounting")
    b_sub = b.add_subparsers(dest="action", required=True, parser_class=_Parser)
    bf = b_sub.add_parser("flops", help="FLOPs of one residual block")
    bf.add_argument("--block", choices=[k.value for k in BlockKind], required=True)
    bf.add_argument("--c", type=int, required=True)
    bf.add_argument("--h", type=int, required=True)
    bf.add_argument("--w", type=int, required=True)
    bf.add_argument("--report")
    bf.set_defaults(func=cmd_bench_flops)
    bm = b_sub.add_parser("model", help="per-k FLOPs of a prediction strategy")
    bm.add_argument("--model", nargs="+", required=True)
    bm.add_argument("--resolution", required=True)
    bm.add_argument("--strategy", choices=METHODS, required=True)
    bm.add_argument("--k-range", default="1..5")
    bm.add_argument("--report")
    bm.set_defaults(func=cmd_bench_model)

    s = sub.add_parser("simulate", help="replay frames through a delayed channel with compensation")
    s.add_argument("--model", "--models", dest="model", nargs="+", required=True)
    s.add_argument("--frames", required=True)
    s.add_argument("--trace", required=True)
    s.add_argument("--fps", type=float, default=30.0)
    s.add_argument("--method", choices=METHODS)
    s.add_argument("--k-max", type=int)
    s.add_argument("--report", required=True)
    s.set_defaults(func=cmd_simulate)
    return p


_MODEL_ERRORS = {
    "BadMagicError": "bad_magic",
    "VersionError": "unsupported_version",
    "ChecksumError": "checksum_mismatch",
    "TruncatedFileError": "truncated_file",
}


def _fail(code: str, message: str, status: int) -> int:
    print(json.dumps({"error": code, "message": " ".join(str(message).split())}), file=sys.stderr)
    return status


def run_cli(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if args.threads < 1:
            raise CliError("bad_argument", f"--threads must be >= 1, got {args.threads}", status=2)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        # BLAS stays single-threaded so results do not depend on --threads
        with threadpool_limits(limits=1):
            args.func(args)
        return 0
    except CliError as exc:
        return _fail(exc.code, str(exc), exc.status)
    except FileNotFoundError as exc:
        return _fail("file_not_found", str(exc), 1)
    except ModelFormatError as exc:
        return _fail(_MODEL_ERRORS.get(type(exc).__name__, "bad_model_file"), str(exc), 1)
    except ShapeError as exc:
        return _fail("shape_mismatch", str(exc), 1)
    except (ValueError, IndexError, FloatingPointError) as exc:
        return _fail("invalid_input", str(exc), 1)
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)


def main() -> None:
    sys.exit(run_cli())

