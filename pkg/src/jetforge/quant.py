"""Post-training quantization: histogram collection over a calibration set,
entropy (KL-divergence) range selection, per-channel weight quantization and
the integer convolution the executor uses in i8 mode.

Activation ranges are affine per tensor (lo -> -128, hi -> 127); weights are
symmetric per output channel (zero point 0), the standard pairing that keeps
integer convolution a plain integer dot product.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import numpy as np

from . import executor as _executor
from .graph import Graph, QuantParams, _round_half_up

INT32_MAX = 2**31 - 1


class QuantError(Exception):
    pass


class LengthMismatch(QuantError):
    pass


class EmptyCalibrationSet(QuantError):
    pass


class NonFiniteActivation(QuantError):
    pass


class AccumulatorOverflow(QuantError):
    pass


class MissingRanges(QuantError):
    pass


@dataclass
class CalibrationConfig:
    image_count: int = 1000
    seed: int = 0
    bin_count: int = 2048
    levels: int = 256


@dataclass
class ActivationHistogram:
    tensor_id: str
    bin_count: int
    lo: float          # observed min
    hi: float          # observed max
    edges: np.ndarray  # bin_count + 1 uniform edges
    counts: np.ndarray # int64 per-bin counts
    samples: int

    @property
    def bin_width(self) -> float:
        return float(self.edges[1] - self.edges[0])


# --------------------------------------------------------------------------
# histogram collection (two passes: range, then fill at fixed edges)
# --------------------------------------------------------------------------

def _canonical_sample(images, count: int, seed: int) -> list:
    """Seeded sample that does not depend on the order images were listed in:
    candidates are ranked by content digest before drawing."""
    items = list(images)
    if not items:
        raise EmptyCalibrationSet("no calibration images")
    keyed = sorted(
        (hashlib.sha1(np.ascontiguousarray(im, dtype=np.float32).tobytes()).hexdigest(), i)
        for i, im in enumerate(items)
    )
    ordered = [items[i] for _, i in keyed]
    if len(ordered) <= count:
        return ordered
    rng = np.random.default_rng(seed)
    picked = rng.choice(len(ordered), size=count, replace=False)
    return [ordered[i] for i in sorted(picked)]


def collect_histograms(graph: Graph, images, config: CalibrationConfig | None = None
                       ) -> dict[str, ActivationHistogram]:
    """One histogram per traced tensor over the sampled calibration images."""
    config = config or CalibrationConfig()
    sample = _canonical_sample(images, config.image_count, config.seed)

    lo: dict[str, float] = {}
    hi: dict[str, float] = {}
    for im in sample:
        trace = _executor.execute(graph, im, mode=_executor.F32)
        for tid, buf in trace.buffers.items():
            data = buf.data
            if not np.all(np.isfinite(data)):
                raise NonFiniteActivation(f"non-finite activation in tensor '{tid}'")
            mn, mx = float(data.min()), float(data.max())
            lo[tid] = min(lo.get(tid, mn), mn)
            hi[tid] = max(hi.get(tid, mx), mx)

    bins = config.bin_count
    edges: dict[str, np.ndarray] = {}
    counts: dict[str, np.ndarray] = {}
    for tid in lo:
        a, b = lo[tid], hi[tid]
        if a == b:
            # constant tensor: unit-wide histogram around the value
            a, b = a - 0.5, b + 0.5
        edges[tid] = np.linspace(a, b, bins + 1)
        counts[tid] = np.zeros(bins, dtype=np.int64)

    samples = {tid: 0 for tid in lo}
    for im in sample:
        trace = _executor.execute(graph, im, mode=_executor.F32)
        for tid, buf in trace.buffers.items():
            c, _ = np.histogram(buf.data, bins=edges[tid])
            counts[tid] += c
            samples[tid] += buf.data.size

    return {
        tid: ActivationHistogram(tensor_id=tid, bin_count=bins, lo=lo[tid], hi=hi[tid],
                                 edges=edges[tid], counts=counts[tid], samples=samples[tid])
        for tid in sorted(lo)
    }


# --------------------------------------------------------------------------
# KL divergence and entropy calibration
# --------------------------------------------------------------------------

def kl_divergence(p: np.ndarray, q: np.ndarray) -> float:
    """sum over p_i > 0 of p_i * ln(p_i / q_i); +inf where q lacks support."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise LengthMismatch(f"P has {p.shape}, Q has {q.shape}")
    mask = p > 0
    if np.any(q[mask] == 0):
        return float("inf")
    return float(np.sum(p[mask] * np.log(p[mask] / q[mask])))


def candidate_divergence(counts: np.ndarray, j: int, levels: int) -> float:
    """KL cost of clipping the histogram at bin j and representing it with
    `levels` values.

    Reference P: bins [0, j) with all clipped mass folded into bin j-1, so
    discarding a heavy tail is penalized. Candidate Q: the raw kept bins
    grouped into `levels` contiguous buckets, each bucket's mass spread
    uniformly over its occupied bins (bin j-1 counts as occupied once any
    outlier mass lands there). Both normalized.
    """
    counts = np.asarray(counts, dtype=np.float64)
    outliers = counts[j:].sum()
    p = counts[:j].copy()
    p[j - 1] += outliers
    total = p.sum()
    if total == 0:
        return float("inf")
    p /= total

    support = counts[:j] > 0
    if outliers > 0:
        support[j - 1] = True
    bounds = (np.arange(levels + 1, dtype=np.int64) * j) // levels
    sums = np.add.reduceat(counts[:j], bounds[:-1])
    occupied = np.add.reduceat(support.astype(np.float64), bounds[:-1])
    values = np.divide(sums, occupied, out=np.zeros_like(sums), where=occupied > 0)
    q = np.repeat(values, np.diff(bounds))
    q[~support] = 0.0
    qs = q.sum()
    if qs == 0:
        return float("inf")
    q /= qs

    mask = p > 0
    if np.any(q[mask] == 0):
        return float("inf")
    return float(np.sum(p[mask] * np.log(p[mask] / q[mask])))


def _scan_candidates(counts: np.ndarray, levels: int) -> int:
    """Index j minimizing the clip divergence; ties go to the larger range."""
    bins = counts.size
    best_j, best_kl = bins, float("inf")
    for j in range(levels, bins + 1):
        kl = candidate_divergence(counts, j, levels)
        if kl <= best_kl:
            best_kl, best_j = kl, j
    return best_j


def _fold_absolute(hist: ActivationHistogram) -> tuple[np.ndarray, np.ndarray]:
    """Histogram of |x| with the same bin count over [0, max(|lo|, |hi|)].
    Each source bin contributes its full count at its center's magnitude."""
    m = max(abs(hist.lo), abs(hist.hi))
    edges = np.linspace(0.0, m, hist.bin_count + 1)
    centers = np.abs((hist.edges[:-1] + hist.edges[1:]) / 2.0)
    idx = np.minimum((centers / (m / hist.bin_count)).astype(np.int64), hist.bin_count - 1)
    counts = np.zeros(hist.bin_count, dtype=np.int64)
    np.add.at(counts, idx, hist.counts)
    return counts, edges


def entropy_calibrate(hist: ActivationHistogram, levels: int = 256) -> tuple[float, float]:
    """Pick clip boundaries minimizing the KL divergence between the observed
    activation distribution and its `levels`-value quantized rendition.

    Non-negative tensors scan upper cut edges with lo fixed at 0; signed
    tensors scan a folded |x| histogram and return the symmetric range
    (-T*128/127, T). A histogram with all mass in one bin falls back to that
    bin's edges widened by one bin width on each side.

    The first scanned bin's count is replaced by its neighbor's, so exact
    zeros (which quantize losslessly at any range) cannot dominate the
    divergence tradeoff.
    """
    nonzero = np.flatnonzero(hist.counts)
    if nonzero.size == 0:
        raise QuantError(f"histogram for '{hist.tensor_id}' is empty")
    if nonzero.size == 1:
        b = int(nonzero[0])
        w = hist.bin_width
        return float(hist.edges[b] - w), float(hist.edges[b + 1] + w)

    if hist.lo >= 0:
        counts, edges = hist.counts.copy(), hist.edges
    else:
        counts, edges = _fold_absolute(hist)
    counts[0] = counts[1]

    if counts.size <= levels:
        j = counts.size
    else:
        j = _scan_candidates(counts, levels)

    if hist.lo >= 0:
        return 0.0, float(edges[j])
    t = float(edges[j])
    return -t * 128.0 / 127.0, t


def calibrate_graph(graph: Graph, images, config: CalibrationConfig | None = None
                    ) -> dict[str, QuantParams]:
    config = config or CalibrationConfig()
    hists = collect_histograms(graph, images, config)
    out = {}
    for tid, hist in hists.items():
        lo, hi = entropy_calibrate(hist, config.levels)
        out[tid] = QuantParams.from_range(lo, hi)
    return out


# --------------------------------------------------------------------------
# weights and integer convolution
# --------------------------------------------------------------------------

def quantize_weights(kernel: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Symmetric per-output-channel int8 weights.

    scale_c = max|w_c| / 127 (1.0 for all-zero channels); values round
    half-up and clamp to [-127, 127].
    """
    k = np.asarray(kernel, dtype=np.float32)
    flat = k.reshape(k.shape[0], -1)
    maxabs = np.abs(flat).max(axis=1)
    scales = np.where(maxabs > 0, maxabs / 127.0, 1.0).astype(np.float64)
    q = _round_half_up(flat / scales[:, None])
    q = np.clip(q, -127, 127).astype(np.int8).reshape(k.shape)
    return q, scales


def quantized_conv(x_q: np.ndarray, x_params: QuantParams, q_kernel: np.ndarray,
                   scales: np.ndarray, bias: np.ndarray | None,
                   stride: int, pad: int) -> np.ndarray:
    """Integer convolution: 32-bit accumulation of (q - zero_point) * q_w,
    then real = acc * scale_in * scale_c + bias, returned as float32."""
    out_ch = q_kernel.shape[0]
    k = q_kernel.shape[2]
    _, _, h, w = x_q.shape
    oh = (h + 2 * pad - k) // stride + 1
    ow = (w + 2 * pad - k) // stride + 1

    shifted = x_q.astype(np.int16) - np.int16(x_params.zero_point)
    cols = _executor._im2col(shifted, k, stride, pad).astype(np.int64)
    w2d = q_kernel.reshape(out_ch, -1).astype(np.int64)

    worst = np.abs(cols) @ np.abs(w2d).T
    if worst.max(initial=0) > INT32_MAX:
        raise AccumulatorOverflow(
            f"conv accumulator would reach {worst.max()} (> int32); needs wider accumulation")
    acc = cols @ w2d.T

    real = acc.astype(np.float64) * (x_params.scale * scales)[None, :]
    if bias is not None:
        real = real + bias[None, :]
    return np.ascontiguousarray(real.T.reshape(1, out_ch, oh, ow), dtype=np.float32)


# --------------------------------------------------------------------------
# ranges file (the calibration-cache analog)
# --------------------------------------------------------------------------

def save_ranges(path, qparams: dict[str, QuantParams], meta: dict | None = None) -> None:
    doc = {
        "meta": meta or {},
        "tensors": {
            t: {"lo": q.lo, "hi": q.hi, "scale": q.scale, "zero_point": q.zero_point}
            for t, q in sorted(qparams.items())
        },
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")


def load_ranges(path) -> tuple[dict[str, QuantParams], dict]:
    try:
        with open(path, "r", encoding="utf-8") as f:
            doc = json.load(f)
    except FileNotFoundError:
        raise MissingRanges(f"ranges file not found: {path}")
    tensors = {
        t: QuantParams(lo=d["lo"], hi=d["hi"], scale=d["scale"], zero_point=d["zero_point"])
        for t, d in doc["tensors"].items()
    }
    return tensors, doc.get("meta", {})
