"""``xformer`` command line: describe, bench, gradcheck, toy-train, infer.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import profiler, verify
from .core.tensor import NonFiniteError, Tensor, no_grad
from .io.archive import ArchiveError, ArchiveMismatch, load_archive, load_into, save_archive
from .io.config import ConfigDoc, ConfigError, emit_config, load_config
from .io.raster import RasterError, image_to_input, read_ppm
from .model.spec import ModelSpec
from .model.train import DivergenceError, HELDOUT_SAMPLES, accuracy, toy_datasets, toy_train
from .model.xformer import build_xformer, count_params

REPORTED_PARAMS = 5.5e6
EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2

CSV_NAME = "bench.csv"
PLOT_NAME = "bench_plot.dat"
LOSS_NAME = "loss.csv"
ARCHIVE_NAME = "weights.xfw"
TRAINED_CONFIG_NAME = "config.yaml"


class UsageError(Exception):
    pass


# -- describe --------------------------------------------------------------------------


def architecture_rows(spec: ModelSpec) -> list[tuple[str, str, str, str, str, str]]:
    """(input size, layer, out channels, repeat, stride, stage) per layout row."""
    sizes = spec.spatial_sizes()
    rows = [(f"{spec.resolution}²×{spec.in_channels}", "Conv2d (3×3) ↓2", str(spec.stem_channels), "1", "2", "Stem_in")]
    c, side = spec.stem_channels, sizes[0]
    for i, st in enumerate(spec.stages, start=1):
        layer = "MV3 ↓2" if st.stride == 2 else "MV3"
        rows.append((f"{side}²×{c}", layer, str(st.out_channels), "1", str(st.stride), str(i)))
        c, side = st.out_channels, sizes[i]
        if st.mv3_repeats:
            rows.append((f"{side}²×{c}", "MV3", str(c), str(st.mv3_repeats), "1", ""))
        if st.xf_depth:
            rows.append((f"{side}²×{c}", "XF Block", str(c), str(st.xf_depth), "-", ""))
    rows.append((f"{side}²×{c}", "Conv2d (1×1)", str(spec.head_channels), "1", "1", "Stem_out"))
    rows.append((f"{side}²×{spec.head_channels}", f"AvgPool ({side}×{side})", str(spec.head_channels), "1", "-", "Global Pooling"))
    rows.append((f"1²×{spec.head_channels}", "Linear", str(spec.num_classes), "1", "-", "Classifier Head"))
    return rows


def _table(header: Sequence[str], rows: Sequence[Sequence[str]]) -> list[str]:
    widths = [max(len(str(r[i])) for r in [header, *rows]) for i in range(len(header))]
    fmt = lambda r: " | ".join(str(v).ljust(w) for v, w in zip(r, widths)).rstrip()  # noqa: E731
    return [fmt(header), "-+-".join("-" * w for w in widths), *(fmt(r) for r in rows)]


def describe_text(doc: ConfigDoc) -> str:
    spec = doc.model
    audit = count_params(build_xformer(spec))
    lines = ["Architecture"]
    lines += _table(["Input Size", "Layer", "Out. channels", "Repeat", "Stride", "Stage"], architecture_rows(spec))
    lines += ["", "Parameters by part"]
    lines += _table(["part", "params"], [(k, f"{v:,}") for k, v in audit.by_group().items()])
    lines += ["", "Parameters by kind"]
    lines += _table(["kind", "params"], [(k, f"{v:,}") for k, v in audit.by_kind().items()])
    delta = (audit.total - REPORTED_PARAMS) / REPORTED_PARAMS
    lines += [
        "",
        f"total parameters: {audit.total:,} ({audit.total / 1e6:.2f} M, {delta:+.1%} vs 5.5 M)",
        "counted: every learnable tensor, including normalization scale/shift and all biases;"
        " running statistics are not parameters",
    ]
    return "\n".join(lines) + "\n"


def cmd_describe(args, doc: ConfigDoc) -> int:
    sys.stdout.write(describe_text(doc))
    return EXIT_OK


# -- bench ------------------------------------------------------------------------------


def bench_summary(result: profiler.SweepResult) -> str:
    lines = []
    for p in result.points:
        lines.append(
            f"{p.resolution}²: N={p.tokens} core FLOPs mhsa={p.core_mhsa:,} xfa={p.core_xfa:,}"
            f" memory ratio mhsa/xfa={p.mem_mhsa / p.mem_xfa:.3f}"
        )
    slopes = result.slopes()
    if slopes is None:
        lines.append("scaling ratios omitted: need at least 2 resolutions")
    else:
        pts = result.points
        for a, b in zip(pts, pts[1:]):
            lines.append(
                f"{a.resolution}²->{b.resolution}²: tokens x{b.tokens / a.tokens:.3f},"
                f" core FLOPs mhsa x{b.core_mhsa / a.core_mhsa:.3f}, xfa x{b.core_xfa / a.core_xfa:.3f}"
            )
        lines.append(
            f"log-log slope of attention-core FLOPs vs tokens: mhsa {slopes['mhsa']:.3f} (quadratic),"
            f" xfa {slopes['xfa']:.3f} (linear)"
        )
    return "\n".join(lines) + "\n"


def cmd_bench(args, doc: ConfigDoc) -> int:
    b = doc.bench
    wall = b.wall_clock or args.wall_clock
    result = profiler.complexity_sweep(doc.model, b.resolutions, wall_clock=wall, repeats=b.repeats,
                                       warmup=b.warmup, seed=args.seed)
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / CSV_NAME).write_text(profiler.sweep_csv(result))
        (out / PLOT_NAME).write_text(profiler.sweep_plot_data(result))
    except OSError as exc:
        print(f"error: cannot write bench output to {out}: {exc.strerror or exc}", file=sys.stderr)
        return EXIT_FAIL
    sys.stdout.write(bench_summary(result))
    print(f"wrote {out / CSV_NAME} and {out / PLOT_NAME}")
    return EXIT_OK


# -- gradcheck --------------------------------------------------------------------------


def cmd_gradcheck(args, doc: ConfigDoc) -> int:
    if not args.f64:
        raise UsageError("gradcheck needs 64-bit mode; pass --f64")
    hook = verify.corrupted_backward(args.corrupt_backward) if args.corrupt_backward else contextlib.nullcontext()
    with hook:
        results = verify.run_gradcheck(args.seed)
    ok = True
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        ok &= r.passed
        if r.error:
            print(f"{status} {r.name}: {r.error}")
        else:
            print(f"{status} {r.name}: max relative error {r.max_error:.3e} (tolerance {r.tolerance:.0e}, worst at {r.worst_tensor})")
    print("all gradient checks passed" if ok else "gradient check FAILED")
    return EXIT_OK if ok else EXIT_FAIL


# -- toy-train --------------------------------------------------------------------------


def cmd_toy_train(args, doc: ConfigDoc) -> int:
    t = doc.train
    seed = t.seed if args.seed is None else args.seed
    spec = doc.train_spec()
    model = build_xformer(spec, seed)
    if args.resume:
        try:
            load_into(model, load_archive(args.resume))
        except (OSError, ArchiveError, ArchiveMismatch) as exc:
            print(f"error: cannot resume from {args.resume}: {exc}", file=sys.stderr)
            return EXIT_FAIL
    train, held = toy_datasets(seed, t.samples, HELDOUT_SAMPLES, spec.resolution)
    try:
        result = toy_train(model, train, t.steps, t.lr)
    except DivergenceError as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_FAIL
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        with open(out / LOSS_NAME, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "loss"])
            w.writerows([i, repr(float(v))] for i, v in enumerate(result.losses))
        save_archive(model, out / ARCHIVE_NAME)
        trained = ConfigDoc(spec, doc.bench, doc.train)
        (out / TRAINED_CONFIG_NAME).write_text(emit_config(trained))
    except OSError as exc:
        print(f"error: cannot write training output to {out}: {exc.strerror or exc}", file=sys.stderr)
        return EXIT_FAIL
    print(f"initial loss {result.initial:.6f}")
    print(f"final loss {result.final:.6f} after {t.steps} steps (lr {t.lr})")
    print(f"held-out accuracy {accuracy(model, held):.3f} over {len(held)} samples")
    print(f"wrote {out / LOSS_NAME}, {out / ARCHIVE_NAME} and {out / TRAINED_CONFIG_NAME}")
    return EXIT_OK


# -- infer ------------------------------------------------------------------------------


def infer_scores(model, image: np.ndarray, top_k: int) -> list[tuple[int, float]]:
    spec = model.spec
    x = Tensor(image_to_input(image, spec.resolution, model.parameters()[0].dtype))
    model.eval()
    with no_grad():
        logits = model(x).data.astype(np.float64)
    z = np.exp(logits - logits.max())
    probs = z / z.sum()
    order = np.argsort(-probs, kind="stable")[:top_k]
    return [(int(i), float(probs[i])) for i in order]


def cmd_infer(args, doc: ConfigDoc) -> int:
    if args.top_k < 1:
        raise UsageError("--top-k must be positive")
    model = build_xformer(doc.model, 0)
    try:
        state = load_archive(args.archive)
    except (OSError, ArchiveError) as exc:
        print(f"error: cannot read archive {args.archive}: {exc}", file=sys.stderr)
        return EXIT_FAIL
    try:
        load_into(model, state)
    except ArchiveMismatch as exc:
        print(f"error: archive does not match the configured model at parameter {exc.name}: {exc}", file=sys.stderr)
        return EXIT_FAIL
    try:
        image = read_ppm(args.image)
    except (OSError, RasterError) as exc:
        print(f"error: cannot read image {args.image}: {exc}", file=sys.stderr)
        return EXIT_FAIL
    top = infer_scores(model, image, min(args.top_k, doc.model.num_classes))
    print("rank\tclass\tscore")
    for rank, (idx, score) in enumerate(top, start=1):
        print(f"{rank}\t{idx}\t{score:.6f}")
    return EXIT_OK


# -- entry point ------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="YAML configuration document")
    common.add_argument("--seed", type=int, default=None, metavar="U64", help="random seed (default: config or 0)")
    common.add_argument("--out", default="out", metavar="DIR", help="output directory (default: out)")
    common.add_argument("--f64", action="store_true", help="64-bit mode (required by gradcheck)")
    common.add_argument("--wall-clock", action="store_true", help="also time forward passes in bench")

    parser = _Parser(prog="xformer", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("describe", parents=[common], help="print the layer table and parameter audit")
    sub.add_parser("bench", parents=[common], help="FLOP/memory sweep over resolutions")
    g = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient verification")
    g.add_argument("--corrupt-backward", metavar="OP", default=None, help=argparse.SUPPRESS)
    t = sub.add_parser("toy-train", parents=[common], help="train the reduced model on synthetic blobs")
    t.add_argument("--resume", metavar="ARCHIVE", default=None, help="start from saved weights")
    i = sub.add_parser("infer", parents=[common], help="classify a binary PPM image")
    i.add_argument("archive", help="weight archive")
    i.add_argument("image", help="binary PPM (P6) image")
    i.add_argument("--top-k", type=int, default=5)
    return parser


COMMANDS = {
    "describe": cmd_describe,
    "bench": cmd_bench,
    "gradcheck": cmd_gradcheck,
    "toy-train": cmd_toy_train,
    "infer": cmd_infer,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if args.seed is not None and args.seed < 0:
            raise UsageError("--seed must be non-negative")
        doc = load_config(args.config)
        if args.command != "toy-train":
            args.seed = 0 if args.seed is None else args.seed
        return COMMANDS[args.command](args, doc)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NonFiniteError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
