"""Analytic FLOP and activation-memory models, complexity sweeps, timing.

Counting conventions:

* one multiply-add is 2 FLOPs;
* softmax costs 5 FLOPs per element (max, subtract, exp, sum, divide);
* a convolution with its folded normalization and activation is one layer;
  layer norms, activations, pooling and residual adds are listed in reports
  (they hold activations) but carry 0 FLOPs;
* memory is counted in activation elements, never bytes or weights.
"""

from __future__ import annotations

import csv
import io
import statistics
import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .core.tensor import Tensor, no_grad
from .model.spec import ModelSpec
from .model.trace import LayerRecord
from .model.xformer import XFormer, build_xformer

CSV_HEADER = ["resolution", "attention", "tokens", "gflops", "attn_core_flops", "activation_elements", "wall_ms", "status"]


@dataclass(frozen=True)
class FlopCount:
    core: int
    projections: int

    @property
    def total(self) -> int:
        return self.core + self.projections


def flops_attention(kind: str, n: int, d_emb: int, d_qkv: int, heads: int = 1) -> FlopCount:
    """Closed-form FLOPs of one attention layer over ``n`` tokens.

    MHSA core: ``QK^T`` and ``AV`` at ``2 N^2 D`` each plus softmax over
    ``heads * N^2`` scores. XFA core: normalization ``6ND``, the two score
    reductions ``4ND``, ``Q^T k_f`` ``2ND``, the outer product ``2D^2`` and
    ``V @ core`` ``2ND^2``. Both add ``8 N D_emb D`` for the four projections.
    """
    if min(n, d_emb, d_qkv, heads) < 1:
        raise ValueError("attention dimensions must be positive")
    proj = 8 * n * d_emb * d_qkv
    if kind == "mhsa":
        core = 4 * n * n * d_qkv + 5 * heads * n * n
    elif kind == "xfa":
        core = 6 * n * d_qkv + 4 * n * d_qkv + 2 * n * d_qkv + 2 * d_qkv * d_qkv + 2 * n * d_qkv * d_qkv
    else:
        raise ValueError(f"unknown attention kind {kind!r}")
    return FlopCount(core, proj)


def attention_memory(kind: str, n: int, d_qkv: int, heads: int = 1) -> dict:
    """Intermediate activation elements one attention layer allocates, by component.

    Mirrors the forward paths in :mod:`xformer.attention`, including the
    contiguous copies made by head splitting and transposes.
    """
    nd = n * d_qkv
    if kind == "mhsa":
        return {
            "qkv": 3 * nd,
            "layout": 5 * nd,  # head split of q/k/v, K^T, head merge
            "attention_map": heads * n * n,
            "scaled_scores": heads * n * n,
            "softmax": heads * n * n,
            "context": nd,
        }
    if kind == "xfa":
        return {
            "qkv": 3 * nd,
            "normalized_qk": 2 * nd,
            "layout": 2 * nd,  # K_hat^T, Q_hat^T
            "scores": d_qkv + 2 * n,
            "query_feature": 2 * d_qkv,
            "attention_map": d_qkv * d_qkv,
            "context": nd,
        }
    raise ValueError(f"unknown attention kind {kind!r}")


@dataclass
class FlopEntry:
    name: str
    op: str
    flops: int
    activations: int
    scratch: int = 0
    core_flops: int = 0
    note: str = ""


@dataclass
class FlopReport:
    entries: list
    resolution: int = 0

    @property
    def total_flops(self) -> int:
        return int(sum(e.flops for e in self.entries))

    @property
    def gflops(self) -> float:
        return self.total_flops / 1e9

    @property
    def total_activations(self) -> int:
        return int(sum(e.activations for e in self.entries))

    @property
    def attention_core_flops(self) -> int:
        return int(sum(e.core_flops for e in self.entries))

    @property
    def dominant(self) -> str:
        top = max(self.entries, key=lambda e: e.flops)
        return top.name

    def by_op(self) -> dict:
        out: dict = {}
        for e in self.entries:
            out[e.op] = out.get(e.op, 0) + e.flops
        return out


def record_flops(rec: LayerRecord, kind: Optional[str] = None, heads: Optional[int] = None) -> tuple[int, int]:
    """(total FLOPs, attention-core FLOPs) of a traced layer."""
    m = rec.meta
    if rec.op == "conv":
        out = rec.out_elements
        if m["mode"] == "depthwise":
            return 2 * m["k"] ** 2 * out, 0
        return 2 * m["k"] ** 2 * m["c_in"] * out, 0
    if rec.op == "linear":
        return 2 * m["rows"] * m["d_in"] * m["d_out"], 0
    if rec.op == "attention":
        k = kind or m["kind"]
        h = heads if heads is not None else m["heads"]
        batch = rec.in_elements // (m["n"] * m["d_emb"])
        fc = flops_attention(k, m["n"], m["d_emb"], m["d_qkv"], h if k == "mhsa" else 1)
        return batch * fc.total, batch * fc.core
    return 0, 0


def _resolve(kind: Optional[str], spec: ModelSpec) -> tuple[Optional[str], Optional[int]]:
    if kind is None:
        return None, None
    if kind not in ("mhsa", "xfa"):
        raise ValueError(f"unknown attention kind {kind!r}")
    return kind, (spec.mhsa_heads if kind == "mhsa" else 1)


def _scratch(rec: LayerRecord, kind: Optional[str], heads: Optional[int]) -> int:
    if rec.op != "attention":
        return 0
    m = rec.meta
    k = kind or m["kind"]
    h = heads if heads is not None else m["heads"]
    batch = rec.in_elements // (m["n"] * m["d_emb"])
    return batch * int(sum(attention_memory(k, m["n"], m["d_qkv"], h if k == "mhsa" else 1).values()))


def flops_model(model: XFormer, resolution: Optional[int] = None, kind: Optional[str] = None) -> FlopReport:
    """Per-layer FLOPs of ``model`` at ``resolution``.

    ``kind`` re-counts every attention layer as ``"mhsa"`` or ``"xfa"``
    instead of what the model was built with.
    """
    resolution = resolution or model.spec.resolution
    k, h = _resolve(kind, model.spec)
    entries = []
    for rec in model.trace(resolution):
        flops, core = record_flops(rec, k, h)
        note = ""
        if rec.op == "attention":
            note = "O(N^2 D)" if (k or rec.meta["kind"]) == "mhsa" else "O(N D^2)"
        entries.append(FlopEntry(rec.name, rec.op, flops, rec.out_elements, _scratch(rec, k, h), core, note))
    return FlopReport(entries, resolution)


def memory_estimate(model: XFormer, resolution: Optional[int] = None, kind: Optional[str] = None,
                    schedule: str = "training") -> int:
    """Peak live activation elements for one forward pass.

    ``schedule="training"``: every intermediate is retained for the backward
    pass, so the peak is the input plus all layer outputs and attention
    intermediates. ``schedule="inference"``: a layer's input, output and
    intermediates plus any residual inputs being held are live at once.
    """
    resolution = resolution or model.spec.resolution
    k, h = _resolve(kind, model.spec)
    records = model.trace(resolution)
    if schedule == "training":
        total = records[0].in_elements
        for rec in records:
            total += rec.out_elements + _scratch(rec, k, h)
        return int(total)
    if schedule == "inference":
        return int(max(r.held + r.in_elements + r.out_elements + _scratch(r, k, h) for r in records))
    raise ValueError(f"unknown schedule {schedule!r}")


def core_flop_ratios(kind: str, ns: Sequence[int], d_qkv: int = 96) -> list[float]:
    """Attention-core FLOP ratio between consecutive token counts."""
    counts = [flops_attention(kind, n, d_qkv, d_qkv).core for n in ns]
    return [b / a for a, b in zip(counts, counts[1:])]


def linear_fit_residual(xs: Sequence[float], ys: Sequence[float]) -> float:
    """Max relative residual of a least-squares fit ``y = a x + b``."""
    xs, ys = np.asarray(xs, dtype=float), np.asarray(ys, dtype=float)
    a, b = np.polyfit(xs, ys, 1)
    return float(np.max(np.abs(a * xs + b - ys) / np.abs(ys)))


def loglog_slope(xs: Sequence[float], ys: Sequence[float]) -> float:
    return float(np.polyfit(np.log(np.asarray(xs, float)), np.log(np.asarray(ys, float)), 1)[0])


# -- sweeps ----------------------------------------------------------------------


@dataclass
class SweepPoint:
    resolution: int
    tokens: int
    flops_mhsa: int
    flops_xfa: int
    core_mhsa: int
    core_xfa: int
    mem_mhsa: int
    mem_xfa: int
    wall_ms: Optional[dict] = None
    status: dict = field(default_factory=lambda: {"mhsa": "ok", "xfa": "ok"})


@dataclass
class SweepResult:
    points: list

    def series(self, name: str) -> list:
        return [getattr(p, name) for p in self.points]

    @property
    def memory_ratios(self) -> list[float]:
        return [p.mem_mhsa / p.mem_xfa for p in self.points]

    def slopes(self) -> Optional[dict]:
        """Log-log slope of attention-core FLOPs against token count."""
        if len(self.points) < 2:
            return None
        ns = self.series("tokens")
        return {"mhsa": loglog_slope(ns, self.series("core_mhsa")), "xfa": loglog_slope(ns, self.series("core_xfa"))}


def time_forward(model: XFormer, resolution: int, repeats: int = 11, warmup: int = 3, seed: int = 0) -> float:
    """Median wall-clock milliseconds of an untracked forward pass."""
    x = Tensor(np.random.default_rng(seed).normal(size=(model.spec.in_channels, resolution, resolution)),
               dtype=model.parameters()[0].dtype)
    model.eval()
    times = []
    with no_grad():
        for i in range(warmup + repeats):
            t0 = time.perf_counter()
            model(x)
            if i >= warmup:
                times.append((time.perf_counter() - t0) * 1e3)
    return float(statistics.median(times))


def complexity_sweep(spec: ModelSpec, resolutions: Sequence[int], wall_clock: bool = False, repeats: int = 11,
                     warmup: int = 3, memory_budget: int = 2 * 1024**3, seed: int = 0) -> SweepResult:
    """FLOPs and memory of the MHSA and XFA variants of ``spec`` per resolution.

    With ``wall_clock`` the forward pass is also timed; a point whose
    estimated inference footprint exceeds ``memory_budget`` bytes (or that
    raises ``MemoryError``) is marked ``"OOM"`` instead of aborting the sweep.
    """
    resolutions = list(resolutions)
    if any(b <= a for a, b in zip(resolutions, resolutions[1:])):
        raise ValueError("resolutions must be strictly ascending")
    models = {k: build_xformer(spec.replace(attention=k), seed) for k in ("mhsa", "xfa")}
    first_xf = next((i for i, st in enumerate(spec.stages) if st.xf_depth), None)
    points = []
    for r in resolutions:
        reports = {k: flops_model(m, r) for k, m in models.items()}
        mem = {k: memory_estimate(m, r) for k, m in models.items()}
        tokens = 0
        if first_xf is not None:
            tokens = spec.tokens(spec.spatial_sizes(r)[first_xf + 1])
        point = SweepPoint(
            r, tokens,
            reports["mhsa"].total_flops, reports["xfa"].total_flops,
            reports["mhsa"].attention_core_flops, reports["xfa"].attention_core_flops,
            mem["mhsa"], mem["xfa"],
        )
        if wall_clock:
            point.wall_ms = {}
            for k, m in models.items():
                itemsize = m.parameters()[0].dtype.itemsize
                if memory_estimate(m, r, schedule="inference") * itemsize * 4 > memory_budget:
                    point.wall_ms[k], point.status[k] = None, "OOM"
                    continue
                try:
                    point.wall_ms[k] = time_forward(m, r, repeats, warmup, seed)
                except MemoryError:
                    point.wall_ms[k], point.status[k] = None, "OOM"
        points.append(point)
    return SweepResult(points)


def sweep_csv(result: SweepResult) -> str:
    """One row per (resolution, attention variant) using :data:`CSV_HEADER`."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for p in result.points:
        for k in ("mhsa", "xfa"):
            wall = "" if not p.wall_ms or p.wall_ms.get(k) is None else f"{p.wall_ms[k]:.3f}"
            writer.writerow([
                p.resolution, k, p.tokens, f"{getattr(p, 'flops_' + k) / 1e9:.6f}",
                getattr(p, "core_" + k), getattr(p, "mem_" + k), wall, p.status[k],
            ])
    return buf.getvalue()


def sweep_plot_data(result: SweepResult) -> str:
    """Gnuplot-style blocks, one two-column (resolution, value) series per curve."""
    curves = ["flops_mhsa", "flops_xfa", "core_mhsa", "core_xfa", "mem_mhsa", "mem_xfa"]
    lines = []
    for name in curves:
        lines.append(f"# {name}: resolution value")
        lines += [f"{p.resolution} {getattr(p, name)}" for p in result.points]
        lines.append("")
    if any(p.wall_ms for p in result.points):
        for k in ("mhsa", "xfa"):
            lines.append(f"# wall_ms_{k}: resolution value")
            lines += [f"{p.resolution} {p.wall_ms[k]:.3f}" for p in result.points if p.wall_ms and p.wall_ms.get(k) is not None]
            lines.append("")
    return "\n".join(lines)
