"""Command-line entry point: ``ehdr {fuse,analyze,metrics,selftest,convert}``.

Exit codes: 0 success, 1 selftest failure, 2 I/O or configuration error,
3 shape mismatch, 4 weight-file format error. Results go to stdout,
diagnostics and timings to stderr.
"""

from __future__ import annotations

import argparse
import sys
import time

import numpy as np

from . import analyzer, imageio, metrics
from .model import ConfigError, ExposureStack, Model, ModelConfig, build_model, forward_tiled, load_config
from .tensor import ShapeError
from .weightfile import WeightFormatError, load_weights

EXIT_OK, EXIT_FAIL, EXIT_IO, EXIT_SHAPE, EXIT_WEIGHTS = 0, 1, 2, 3, 4


class CLIError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _err(msg):
    print(f"ehdr: {msg}", file=sys.stderr)


def _config(path) -> ModelConfig:
    if path is None:
        return ModelConfig()
    try:
        return load_config(path)
    except OSError as exc:
        raise CLIError(EXIT_IO, f"cannot read config {path}: {exc.strerror}") from None
    except ConfigError as exc:
        raise CLIError(EXIT_IO, f"bad config {path}: {exc}") from None


def _read(path, role):
    try:
        return imageio.read_image(path)
    except OSError as exc:
        raise CLIError(EXIT_IO, f"cannot read {role} image {path}: {exc.strerror}") from None
    except imageio.ImageFormatError as exc:
        raise CLIError(EXIT_IO, f"{role}: {exc}") from None


def _write(path, img):
    try:
        imageio.write_image(path, img)
    except (OSError, imageio.ImageFormatError) as exc:
        raise CLIError(EXIT_IO, f"cannot write {path}: {exc}") from None


# ---------------------------------------------------------------------------


def cmd_fuse(args) -> int:
    t0 = time.perf_counter()
    cfg = _config(args.config)
    imgs = {role: _read(getattr(args, role), role) for role in ("under", "normal", "over")}
    shapes = {k: v.shape for k, v in imgs.items()}
    if len(set(shapes.values())) != 1 or any(len(s) != 3 or s[0] != 3 for s in shapes.values()):
        raise CLIError(EXIT_SHAPE, "input shapes differ: " + ", ".join(f"{k} {s}" for k, s in shapes.items()))
    for k, v in imgs.items():
        if v.min() < 0 or v.max() > 1:
            _err(f"{k}: values outside [0, 1] clipped")
            imgs[k] = np.clip(v, 0, 1)
    print(f"load: {time.perf_counter() - t0:.3f}s", file=sys.stderr)

    t0 = time.perf_counter()
    if args.weights:
        try:
            model = Model(cfg, load_weights(args.weights))
        except OSError as exc:
            raise CLIError(EXIT_IO, f"cannot read weights {args.weights}: {exc.strerror}") from None
        except WeightFormatError as exc:
            raise CLIError(EXIT_WEIGHTS, f"weights {args.weights}: {exc}") from None
    else:
        model, _ = build_model(cfg, args.seed)
    print(f"model: {time.perf_counter() - t0:.3f}s", file=sys.stderr)

    try:
        stack = ExposureStack(imgs["under"], imgs["normal"], imgs["over"])
    except ShapeError as exc:
        raise CLIError(EXIT_SHAPE, str(exc)) from None
    timings = {}
    out = forward_tiled(model, stack, tile=args.tile, overlap=args.overlap, workers=args.workers, timings=timings)
    for stage, secs in timings.items():
        print(f"{stage}: {secs:.3f}s", file=sys.stderr)
    _write(args.out, out)
    print(args.out)
    return EXIT_OK


def cmd_analyze(args) -> int:
    cfg = _config(args.config)
    variants = ["main", "lite"] if args.variant == "both" else [args.variant]
    try:
        cfgs = [cfg.replace(variant=v) for v in variants]
        reports = [analyzer.count_model(c, args.height, args.width) for c in cfgs]
    except (ConfigError, ValueError) as exc:
        raise CLIError(EXIT_IO, str(exc)) from None

    render = analyzer.render_tsv if args.format == "tsv" else analyzer.render_text
    chunks = [render(r) for r in reports]
    if len(cfgs) > 1:
        chunks.append(analyzer.render_comparison(analyzer.compare_variants(cfgs, args.height, args.width), args.format))
    if args.stride_compare:
        base = cfg.replace(ire_stride=1)
        cmp = analyzer.compare_variants([base, cfg], args.height, args.width,
                                        labels=["stride1", f"stride{cfg.ire_stride}"])
        chunks.append(analyzer.render_comparison(cmp, args.format))
        red = analyzer.stride_reduction(cfg, args.height, args.width)
        if args.format == "tsv":
            chunks.append(f"REDUCTION\tire_stride\t1\t{cfg.ire_stride}\t{red:.4f}\n")
        else:
            chunks.append(f"ire_stride 1 -> {cfg.ire_stride}: total MACs reduced by {red:.2f}%\n")
        reports += cmp.reports
    sys.stdout.write("\n".join(chunks))
    if args.plot:
        from .plotting import plot_cost_breakdown

        try:
            plot_cost_breakdown(reports, args.plot, title=f"{args.height}x{args.width} input")
        except OSError as exc:
            raise CLIError(EXIT_IO, f"cannot write figure {args.plot}: {exc}") from None
        _err(f"figure written to {args.plot}")
    return EXIT_OK


def cmd_metrics(args) -> int:
    fused = _read(args.fused, "fused")
    ref = _read(args.reference, "reference")
    if fused.shape != ref.shape:
        raise CLIError(EXIT_SHAPE, f"shape mismatch: fused {fused.shape} vs reference {ref.shape}")
    if args.normalize_reference:
        ref = metrics.normalize_reference(ref)
    try:
        rep = metrics.evaluate_pair(fused, ref, metrics.MuLawConfig(args.mu))
    except ShapeError as exc:
        raise CLIError(EXIT_SHAPE, str(exc)) from None
    except ValueError as exc:
        raise CLIError(EXIT_IO, str(exc)) from None
    sys.stdout.write(rep.as_tsv() + "\n" if args.format == "tsv" else rep.as_text())
    return EXIT_OK


def cmd_selftest(args) -> int:
    from .selftest import run_selftest

    t0 = time.perf_counter()
    ok = run_selftest(sys.stdout, sys.stderr, fault=args.inject_fault)
    print(f"selftest: {time.perf_counter() - t0:.2f}s", file=sys.stderr)
    return EXIT_OK if ok else EXIT_FAIL


def cmd_convert(args) -> int:
    _write(args.output, _read(args.input, "input"))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ehdr", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    f = sub.add_parser("fuse", help="fuse three exposures into one HDR PFM")
    for role in ("under", "normal", "over"):
        f.add_argument(f"--{role}", required=True, help=f"{role}-exposed image (.ppm or .pfm)")
    f.add_argument("--weights", help="weight file; default: seeded initialisation")
    f.add_argument("--config", help="key = value model config file")
    f.add_argument("--seed", type=int, default=42)
    f.add_argument("--out", required=True, help="output .pfm path")
    f.add_argument("--tile", type=int, default=128)
    f.add_argument("--overlap", type=int, default=16)
    f.add_argument("--workers", type=int, default=1)
    f.set_defaults(func=cmd_fuse)

    a = sub.add_parser("analyze", help="static MAC/FLOP/parameter report")
    a.add_argument("--config")
    a.add_argument("--variant", choices=("main", "lite", "both"), default="main")
    a.add_argument("--height", type=int, default=128)
    a.add_argument("--width", type=int, default=128)
    a.add_argument("--format", choices=("text", "tsv"), default="text")
    a.add_argument("--stride-compare", action="store_true", help="also compare against ire_stride = 1")
    a.add_argument("--plot", help="write a cost-breakdown figure (.png/.pdf/.svg) to this path")
    a.set_defaults(func=cmd_analyze)

    m = sub.add_parser("metrics", help="PSNR/SSIM in linear and mu-law domains")
    m.add_argument("--fused", required=True)
    m.add_argument("--reference", required=True)
    m.add_argument("--mu", type=float, default=5000.0)
    m.add_argument("--format", choices=("text", "tsv"), default="text")
    m.add_argument("--normalize-reference", action="store_true", help="divide the reference by its maximum first")
    m.set_defaults(func=cmd_metrics)

    s = sub.add_parser("selftest", help="run the built-in invariant suites")
    s.add_argument("--inject-fault", choices=("conv",), help=argparse.SUPPRESS)
    s.set_defaults(func=cmd_selftest)

    c = sub.add_parser("convert", help="convert between PPM and PFM")
    c.add_argument("input")
    c.add_argument("output")
    c.set_defaults(func=cmd_convert)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CLIError as exc:
        _err(str(exc))
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
