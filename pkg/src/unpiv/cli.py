"""Command line interface: estimate, generate, bench and viz subcommands.

Every output file is written to a temp file in the destination directory and
renamed into place, so an interrupted run never leaves a truncated artifact.
Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import contextlib
import json
import os
import sys
import tempfile

from PIL import Image

from . import kvconfig
from .errors import ConfigError, UnpivError
from .evalbench import (
    BenchmarkMethod,
    error_to_color,
    flow_to_color,
    load_dataset_dir,
    run_benchmark,
    strict_mode_enabled,
)
from .fields import normalize
from .fileio import read_flo, read_image, write_flo, write_image
from .losses import LossParams, ablation_params
from .synth import (
    FLOW_SPEC_GRAMMAR,
    ParticleConfig,
    UniformFlow,
    parse_flow_spec,
    render_pair,
)
from .variational import (
    HsConfig,
    SolverConfig,
    estimate_horn_schunck,
    estimate_unsupervised,
    solve_trace_report,
)
from .xcorr import XcorrConfig, estimate_multipass

_UNIFORM_REGIME_LIMIT = 5.0


@contextlib.contextmanager
def _atomic_output(path):
    """Yield a temp path in the target directory; rename over `path` on success."""
    directory = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.splitext(path)[1])
    os.close(fd)
    try:
        yield tmp
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


def _write_json_atomic(path, payload):
    with _atomic_output(path) as tmp:
        with open(tmp, "w") as f:
            json.dump(payload, f, indent=2, sort_keys=True)
            f.write("\n")


def _write_png_atomic(path, rgb):
    with _atomic_output(path) as tmp:
        Image.fromarray(rgb, mode="RGB").save(tmp, format="PNG")


def _load_config_mapping(args):
    mapping = {}
    if getattr(args, "config", None):
        try:
            with open(args.config) as f:
                mapping.update(kvconfig.parse_key_values(f.read()))
        except OSError as exc:
            raise UnpivError(f"cannot read config {args.config}: {exc}") from exc
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, _, value = item.partition("=")
        mapping[key.strip()] = value.strip()
    known = (
        LossParams.config_keys()
        | SolverConfig.config_keys()
        | HsConfig.config_keys()
        | XcorrConfig.config_keys()
    )
    unknown = set(mapping) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
    return mapping


def _pick(mapping, keys):
    return {k: v for k, v in mapping.items() if k in keys}


def cmd_estimate(args) -> int:
    mapping = _load_config_mapping(args)
    i1 = normalize(read_image(args.a))
    i2 = normalize(read_image(args.b))
    trace = None
    if args.method == "unsup":
        params = LossParams.from_mapping(_pick(mapping, LossParams.config_keys()))
        solver = SolverConfig.from_mapping(_pick(mapping, SolverConfig.config_keys()))
        trace = estimate_unsupervised(i1, i2, params, solver)
        flow = trace.flow_forward
    elif args.method == "hs":
        hs = HsConfig.from_mapping(_pick(mapping, HsConfig.config_keys()))
        flow = estimate_horn_schunck(i1, i2, hs)
    else:
        xc = XcorrConfig.from_mapping(_pick(mapping, XcorrConfig.config_keys()))
        _, flow = estimate_multipass(i1, i2, xc)

    with _atomic_output(args.out) as tmp:
        write_flo(tmp, flow)
    if args.trace:
        _write_json_atomic(args.trace, solve_trace_report(trace, final_flow_path=args.out))
    if args.viz:
        _write_png_atomic(args.viz, flow_to_color(flow))
    print(f"wrote {args.out}")
    return 0


def cmd_generate(args) -> int:
    flow = parse_flow_spec(args.flow, args.size)
    if isinstance(flow, UniformFlow) and max(abs(flow.dx), abs(flow.dy)) > _UNIFORM_REGIME_LIMIT:
        print(
            f"warning: uniform displacement ({flow.dx}, {flow.dy}) exceeds the "
            f"|dx| <= {_UNIFORM_REGIME_LIMIT:g} px regime this generator targets; "
            "generating anyway",
            file=sys.stderr,
        )
    config = ParticleConfig(
        image_size=args.size,
        particle_count=args.particles,
        particle_diameter=args.sigma,
        peak_intensity=args.peak,
        background=args.background,
        seed=args.seed,
    )
    img1, img2, truth = render_pair(flow, config)
    os.makedirs(args.out, exist_ok=True)
    outputs = {
        "pair_a.png": lambda p: write_image(p, img1),
        "pair_b.png": lambda p: write_image(p, img2),
        "truth.flo": lambda p: write_flo(p, truth),
    }
    for name, writer in outputs.items():
        with _atomic_output(os.path.join(args.out, name)) as tmp:
            writer(tmp)
    metadata = {
        "flow_kind": flow.kind,
        "flow_params": flow.params(),
        "seed": config.seed,
        "image_size": config.image_size,
        "particle_count": config.resolved_count(),
        "particle_diameter": config.particle_diameter,
        "peak_intensity": config.peak_intensity,
        "background": config.background,
    }
    _write_json_atomic(os.path.join(args.out, "metadata.json"), metadata)
    print(f"wrote pair to {args.out}")
    return 0


def _build_methods(names, mapping, ablation):
    params = LossParams.from_mapping(_pick(mapping, LossParams.config_keys()))
    solver = SolverConfig.from_mapping(_pick(mapping, SolverConfig.config_keys()))
    hs = HsConfig.from_mapping(_pick(mapping, HsConfig.config_keys()))
    xc = XcorrConfig.from_mapping(_pick(mapping, XcorrConfig.config_keys()))
    methods = []
    for name in names:
        if name == "unsup":
            variants = ablation_params(params) if ablation else (("P+S+C", params),)
            for tag, variant in variants:
                methods.append(
                    BenchmarkMethod(
                        "unsup",
                        tag,
                        lambda a, b, p=variant: estimate_unsupervised(a, b, p, solver).flow_forward,
                    )
                )
        elif name == "hs":
            methods.append(
                BenchmarkMethod("hs", "-", lambda a, b: estimate_horn_schunck(a, b, hs))
            )
        elif name == "xcorr":
            methods.append(
                BenchmarkMethod("xcorr", "-", lambda a, b: estimate_multipass(a, b, xc)[1])
            )
        else:
            raise ConfigError(f"unknown method {name!r} (choose from unsup, hs, xcorr)")
    return methods


def cmd_bench(args) -> int:
    mapping = _load_config_mapping(args)
    names = [n.strip() for n in args.methods.split(",") if n.strip()]
    if not names:
        raise ConfigError("--methods must name at least one of unsup, hs, xcorr")
    methods = _build_methods(names, mapping, args.ablation)
    entries = list(load_dataset_dir(args.dataset))
    if not entries:
        raise UnpivError(f"no loadable pairs found in {args.dataset}")
    report = run_benchmark(entries, methods)
    _write_json_atomic(args.out, report.to_json_dict())
    csv_path = os.path.splitext(args.out)[0] + ".csv"
    with _atomic_output(csv_path) as tmp:
        with open(tmp, "w") as f:
            f.write(report.to_csv_text())
    for agg in report.aggregates():
        print(
            f"{agg['method']}[{agg['loss_config']}] on {agg['flow_kind']}: "
            f"mean AEE {agg['mean_aee_px']:.4f} px over {agg['pairs']} pairs"
        )
    print(f"wrote {args.out} and {csv_path}")
    return 0


def _max_mag_type(value: str):
    if value == "auto":
        return value
    try:
        parsed = float(value)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected 'auto' or a number, got {value!r}") from exc
    if parsed <= 0.0:
        raise argparse.ArgumentTypeError("--max-mag must be positive")
    return parsed


def cmd_viz(args) -> int:
    flow = read_flo(args.flow)
    max_mag = args.max_mag
    if args.truth:
        truth = read_flo(args.truth)
        rgb = error_to_color(flow, truth, max_mag)
    else:
        rgb = flow_to_color(flow, max_mag)
    _write_png_atomic(args.out, rgb)
    print(f"wrote {args.out}")
    return 0


def _flow_spec_type(value: str) -> str:
    # Validate the grammar early so bad specs are usage errors (exit 2).
    try:
        parse_flow_spec(value, 256)
    except ConfigError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="unpiv",
        description="Dense flow estimation for particle image pairs.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    est = sub.add_parser("estimate", help="estimate flow between two images")
    est.add_argument("--a", required=True, help="first image (PNG or PGM)")
    est.add_argument("--b", required=True, help="second image (PNG or PGM)")
    est.add_argument("--method", choices=("unsup", "hs", "xcorr"), default="unsup")
    est.add_argument("--out", required=True, help="output .flo path")
    est.add_argument("--config", help="key=value config file")
    est.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    est.add_argument("--trace", help="write a JSON solve trace (unsup only)")
    est.add_argument("--viz", help="also write a color-coded PNG of the flow")
    est.set_defaults(fn=cmd_estimate)

    gen = sub.add_parser("generate", help="render a synthetic particle pair")
    gen.add_argument("--flow", required=True, type=_flow_spec_type, help=FLOW_SPEC_GRAMMAR)
    gen.add_argument("--size", type=int, default=256, help="square image edge (default 256)")
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--out", required=True, help="output directory")
    gen.add_argument("--particles", type=int, default=None, help="particle count (default 5%% of pixels)")
    gen.add_argument("--sigma", type=float, default=1.0, help="particle Gaussian sigma in px")
    gen.add_argument("--peak", type=float, default=1.0, help="particle peak intensity")
    gen.add_argument("--background", type=float, default=0.0, help="background intensity")
    gen.set_defaults(fn=cmd_generate)

    bench = sub.add_parser("bench", help="run estimators over a dataset directory")
    bench.add_argument("--dataset", required=True)
    bench.add_argument("--methods", default="unsup,hs,xcorr", help="comma-separated method names")
    bench.add_argument("--ablation", action="store_true", help="run unsup with P+S+C, P+S and P+C")
    bench.add_argument("--out", required=True, help="output report .json (a .csv is written beside it)")
    bench.add_argument("--config", help="key=value config file")
    bench.add_argument("--set", action="append", metavar="KEY=VALUE")
    bench.set_defaults(fn=cmd_bench)

    viz = sub.add_parser("viz", help="render a .flo file as a color PNG")
    viz.add_argument("--flow", required=True)
    viz.add_argument("--truth", help="render the endpoint error against this .flo instead")
    viz.add_argument("--out", required=True, help="output .png path")
    viz.add_argument(
        "--max-mag",
        default="auto",
        type=_max_mag_type,
        help="saturation scale in px (default: 99th percentile)",
    )
    viz.set_defaults(fn=cmd_viz)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except UnpivError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def run() -> None:
    sys.exit(main())


if __name__ == "__main__":
    run()
