"""Deterministic dense numerics: matmul, softmax, SiLU, layer norm, spectral norm.

All hot-path kernels are numba-compiled loops over float64 with a *fixed
reduction order*: every output element is a left-to-right sequential sum over
the contraction index, with multiplies and adds rounded separately (numba does
not fuse to FMA without fastmath). Two consequences the rest of the package
relies on:

  * identical inputs always produce bit-identical outputs, and
  * each output element depends only on its own row/column data, so results
    are independent of how rows are batched. Processing one token at a time
    through the KV cache and re-running the whole sequence as one big matrix
    give bit-equal numbers.

Exponentials go through libm (``math.exp``), matching what a plain Python
oracle computes.

FLOP accounting convention (pinned here, mirrored by the analytic model in
``accounting``): a multiply-add counts as 2 FLOPs; softmax counts 4 FLOPs per
element (subtract, exp, accumulate, divide); layer norm, SiLU/gating and
residual adds count 0. Counting only the O(n*m*k) terms keeps replay savings
exactly equal to the three skipped MLP matmuls.
"""

from __future__ import annotations

import math
from typing import Callable, Optional

import numpy as np
from numba import njit


class ShapeError(ValueError):
    """Operand dimensions do not match the operation's contract."""


# ---------------------------------------------------------------------------
# FLOP sink: kernels report executed FLOPs to whatever recorder is attached.
# ---------------------------------------------------------------------------

_flop_sink: Optional[Callable[[int], None]] = None


def set_flop_sink(sink: Optional[Callable[[int], None]]) -> None:
    """Install (or clear) the callable that receives per-kernel FLOP counts."""
    global _flop_sink
    _flop_sink = sink


def _report(flops: int) -> None:
    if _flop_sink is not None:
        _flop_sink(flops)


# ---------------------------------------------------------------------------
# Kernels. Loop order is part of the contract; do not "optimize" reductions.
# ---------------------------------------------------------------------------


@njit(cache=True)
def _vec_mat(x, w):
    d, m = w.shape
    out = np.empty(m)
    for j in range(m):
        acc = 0.0
        for k in range(d):
            acc += x[k] * w[k, j]
        out[j] = acc
    return out


@njit(cache=True)
def _mat_mat(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.empty((m, n))
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for p in range(k):
                acc += a[i, p] * b[p, j]
            out[i, j] = acc
    return out


@njit(cache=True)
def _softmax(v):
    n = v.size
    out = np.empty(n)
    mx = v[0]
    for i in range(1, n):
        if v[i] > mx:
            mx = v[i]
    total = 0.0
    for i in range(n):
        e = math.exp(v[i] - mx)
        out[i] = e
        total += e
    for i in range(n):
        out[i] /= total
    return out


@njit(cache=True)
def _attn_context(q, keys, values, num_heads):
    """Scaled per-head scores over `ctx` cached rows, softmax, weighted sum.

    Returns (context vector (d,), pre-softmax scaled score rows (h, ctx)).
    """
    ctx, d = keys.shape
    dh = d // num_heads
    scale = math.sqrt(dh)
    scores = np.empty((num_heads, ctx))
    out = np.empty(d)
    probs = np.empty(ctx)
    for m in range(num_heads):
        base = m * dh
        for p in range(ctx):
            acc = 0.0
            for k in range(dh):
                acc += q[base + k] * keys[p, base + k]
            scores[m, p] = acc / scale
        mx = scores[m, 0]
        for p in range(1, ctx):
            if scores[m, p] > mx:
                mx = scores[m, p]
        total = 0.0
        for p in range(ctx):
            e = math.exp(scores[m, p] - mx)
            probs[p] = e
            total += e
        for p in range(ctx):
            probs[p] /= total
        for k in range(dh):
            acc = 0.0
            for p in range(ctx):
                acc += probs[p] * values[p, base + k]
            out[base + k] = acc
    return out, scores


@njit(cache=True)
def _attn_context_causal(qs, keys, values, num_heads):
    """Full-sequence causal attention, row p attending to rows 0..p.

    Softmax runs over the sliced row exactly as the per-step kernel does, so
    the result is bit-equal to feeding rows through `_attn_context` one at a
    time. Score entries above the diagonal are left at zero.
    """
    n, d = keys.shape
    dh = d // num_heads
    scale = math.sqrt(dh)
    scores = np.zeros((num_heads, n, n))
    out = np.empty((n, d))
    probs = np.empty(n)
    for m in range(num_heads):
        base = m * dh
        for r in range(n):
            ctx = r + 1
            for p in range(ctx):
                acc = 0.0
                for k in range(dh):
                    acc += qs[r, base + k] * keys[p, base + k]
                scores[m, r, p] = acc / scale
            mx = scores[m, r, 0]
            for p in range(1, ctx):
                if scores[m, r, p] > mx:
                    mx = scores[m, r, p]
            total = 0.0
            for p in range(ctx):
                e = math.exp(scores[m, r, p] - mx)
                probs[p] = e
                total += e
            for p in range(ctx):
                probs[p] /= total
            for k in range(dh):
                acc = 0.0
                for p in range(ctx):
                    acc += probs[p] * values[p, base + k]
                out[r, base + k] = acc
    return out, scores


@njit(cache=True)
def _gated_mlp_vec(x, w_gate_up, w_down):
    d, two_f = w_gate_up.shape
    f = two_f // 2
    hidden = np.empty(two_f)
    for j in range(two_f):
        acc = 0.0
        for k in range(d):
            acc += x[k] * w_gate_up[k, j]
        hidden[j] = acc
    act = np.empty(f)
    for j in range(f):
        g = hidden[j]
        act[j] = (g / (1.0 + math.exp(-g))) * hidden[f + j]
    out = np.empty(d)
    for j in range(d):
        acc = 0.0
        for k in range(f):
            acc += act[k] * w_down[k, j]
        out[j] = acc
    return out


@njit(cache=True)
def _gated_mlp_batch(xs, w_gate_up, w_down):
    n = xs.shape[0]
    d, two_f = w_gate_up.shape
    f = two_f // 2
    out = np.empty((n, d))
    hidden = np.empty(two_f)
    act = np.empty(f)
    for r in range(n):
        for j in range(two_f):
            acc = 0.0
            for k in range(d):
                acc += xs[r, k] * w_gate_up[k, j]
            hidden[j] = acc
        for j in range(f):
            g = hidden[j]
            act[j] = (g / (1.0 + math.exp(-g))) * hidden[f + j]
        for j in range(d):
            acc = 0.0
            for k in range(f):
                acc += act[k] * w_down[k, j]
            out[r, j] = acc
    return out


@njit(cache=True)
def _layer_norm(x, eps):
    d = x.size
    mean = 0.0
    for i in range(d):
        mean += x[i]
    mean /= d
    var = 0.0
    for i in range(d):
        dev = x[i] - mean
        var += dev * dev
    var /= d
    inv = 1.0 / math.sqrt(var + eps)
    out = np.empty(d)
    for i in range(d):
        out[i] = (x[i] - mean) * inv
    return out


@njit(cache=True)
def _layer_norm_batch(xs, eps):
    n, d = xs.shape
    out = np.empty((n, d))
    for r in range(n):
        mean = 0.0
        for i in range(d):
            mean += xs[r, i]
        mean /= d
        var = 0.0
        for i in range(d):
            dev = xs[r, i] - mean
            var += dev * dev
        var /= d
        inv = 1.0 / math.sqrt(var + eps)
        for i in range(d):
            out[r, i] = (xs[r, i] - mean) * inv
    return out


@njit(cache=True)
def _head_scores(q, key_row, num_heads):
    d = q.size
    dh = d // num_heads
    scale = math.sqrt(dh)
    out = np.empty(num_heads)
    for m in range(num_heads):
        base = m * dh
        acc = 0.0
        for k in range(dh):
            acc += q[base + k] * key_row[base + k]
        out[m] = acc / scale
    return out


# ---------------------------------------------------------------------------
# Public wrappers: shape validation + FLOP reporting.
# ---------------------------------------------------------------------------

LAYER_NORM_EPS = 1e-5


def _as_f64(a) -> np.ndarray:
    arr = np.asarray(a, dtype=np.float64)
    return np.ascontiguousarray(arr)


def matmul(a, b) -> np.ndarray:
    """Exact-order matrix product; bit-identical to a naive triple loop."""
    a = _as_f64(a)
    b = _as_f64(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.ndim}-D and {b.ndim}-D")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} x {b.shape}")
    _report(2 * a.shape[0] * a.shape[1] * b.shape[1])
    return _mat_mat(a, b)


def vec_mat(x, w) -> np.ndarray:
    """Row vector times matrix, same reduction order as `matmul`."""
    x = _as_f64(x)
    w = _as_f64(w)
    if x.ndim != 1 or w.ndim != 2 or x.size != w.shape[0]:
        raise ShapeError(f"vec_mat shapes incompatible: {x.shape} x {w.shape}")
    _report(2 * w.shape[0] * w.shape[1])
    return _vec_mat(x, w)


def softmax_row(v) -> np.ndarray:
    """Max-subtracted softmax of a vector; entries positive, sum 1."""
    v = _as_f64(v)
    if v.ndim != 1 or v.size == 0:
        raise ShapeError("softmax_row needs a non-empty 1-D vector")
    _report(4 * v.size)
    return _softmax(v)


def attention_context(q, keys, values, num_heads: int):
    """Per-head scaled-dot attention over cached rows.

    Returns (context vector, scaled pre-softmax score rows of shape
    (num_heads, ctx)). The score rows are the byproduct the replay gate reads;
    nothing extra is computed for them.
    """
    q = _as_f64(q)
    keys = _as_f64(keys)
    values = _as_f64(values)
    ctx, d = keys.shape
    if q.shape != (d,) or values.shape != (ctx, d):
        raise ShapeError(f"attention operands disagree: q{q.shape} K{keys.shape} V{values.shape}")
    if d % num_heads != 0:
        raise ShapeError(f"width {d} not divisible by {num_heads} heads")
    _report(4 * d * ctx + 4 * num_heads * ctx)
    return _attn_context(q, keys, values, num_heads)


def attention_context_causal(qs, keys, values, num_heads: int):
    """Batched causal attention; bit-equal to the per-step kernel row by row."""
    qs = _as_f64(qs)
    keys = _as_f64(keys)
    values = _as_f64(values)
    n, d = keys.shape
    if qs.shape != (n, d) or values.shape != (n, d) or d % num_heads != 0:
        raise ShapeError("causal attention operands disagree")
    total_ctx = n * (n + 1) // 2
    _report(4 * d * total_ctx + 4 * num_heads * total_ctx)
    return _attn_context_causal(qs, keys, values, num_heads)


def gated_mlp(x, w_gate_up, w_down) -> np.ndarray:
    """SiLU-gated MLP on a single vector: (silu(x Wg) * (x Wu)) Wd.

    `w_gate_up` stacks the gate and up projections side by side.
    """
    x = _as_f64(x)
    w_gate_up = _as_f64(w_gate_up)
    w_down = _as_f64(w_down)
    d, two_f = w_gate_up.shape
    f = two_f // 2
    if x.shape != (d,) or two_f != 2 * f or w_down.shape != (f, d):
        raise ShapeError("gated_mlp operands disagree")
    _report(6 * d * f)
    return _gated_mlp_vec(x, w_gate_up, w_down)


def gated_mlp_batch(xs, w_gate_up, w_down) -> np.ndarray:
    xs = _as_f64(xs)
    w_gate_up = _as_f64(w_gate_up)
    w_down = _as_f64(w_down)
    d, two_f = w_gate_up.shape
    f = two_f // 2
    if xs.ndim != 2 or xs.shape[1] != d or w_down.shape != (f, d):
        raise ShapeError("gated_mlp_batch operands disagree")
    _report(6 * d * f * xs.shape[0])
    return _gated_mlp_batch(xs, w_gate_up, w_down)


def layer_norm(x, eps: float = LAYER_NORM_EPS) -> np.ndarray:
    """Zero-mean unit-variance normalization (no learned scale/shift)."""
    x = _as_f64(x)
    if x.ndim == 1:
        return _layer_norm(x, eps)
    if x.ndim == 2:
        return _layer_norm_batch(x, eps)
    raise ShapeError("layer_norm needs a vector or a matrix of rows")


def head_scores(q, key_row, num_heads: int) -> np.ndarray:
    """Per-head scaled dot products against one cached key row.

    Used to recover the replay gate's score when a sparse mask hides the
    aligned column; reduction order matches the attention kernel, so the
    value is bit-equal to the score the dense path would have exposed.
    """
    q = _as_f64(q)
    key_row = _as_f64(key_row)
    if q.shape != key_row.shape or q.ndim != 1:
        raise ShapeError("head_scores operands disagree")
    _report(2 * q.size)
    return _head_scores(q, key_row, num_heads)


def silu(x: float) -> float:
    """x * sigmoid(x). Large negative inputs underflow cleanly to 0."""
    if x < -700.0:
        return 0.0
    return x / (1.0 + math.exp(-x))


def l2_norm(v) -> float:
    return float(np.linalg.norm(np.asarray(v, dtype=np.float64)))


def frobenius_norm(m) -> float:
    return float(np.linalg.norm(np.asarray(m, dtype=np.float64)))


def spectral_norm(m, iters: int = 128) -> float:
    """Power-iteration estimate of the largest singular value.

    The estimate is the Rayleigh quotient sqrt(x M Mᵀ xᵀ) of the current unit
    iterate, which is non-decreasing in the iteration count, and never
    exceeds the Frobenius norm. Returns 0 for the zero matrix. The starting
    vector is drawn from a fixed internal seed so results are reproducible.
    """
    m = _as_f64(m)
    if m.ndim != 2:
        raise ShapeError("spectral_norm needs a matrix")
    if iters < 1:
        raise ValueError("iters must be >= 1")
    if not np.any(m):
        return 0.0
    rng = np.random.default_rng(0x5EED_CAFE)
    x = rng.normal(size=m.shape[0])
    x /= np.linalg.norm(x)
    est = 0.0
    for _ in range(iters):
        y = x @ m
        est = float(np.linalg.norm(y))
        if est == 0.0:
            # Iterate landed in the null space; restart deterministically.
            x = rng.normal(size=m.shape[0])
            x /= np.linalg.norm(x)
            continue
        x = m @ y
        nx = np.linalg.norm(x)
        if nx == 0.0:
            break
        x /= nx
    return est


def warm_up() -> None:
    """Force-compile every kernel (they are disk-cached afterwards)."""
    d, f, h = 4, 6, 2
    x = np.zeros(d)
    xs = np.zeros((2, d))
    w = np.zeros((d, d))
    vec_mat(x, w)
    matmul(xs, w)
    softmax_row(np.zeros(3))
    attention_context(x, xs, xs, h)
    attention_context_causal(xs, xs, xs, h)
    gated_mlp(x, np.zeros((d, 2 * f)), np.zeros((f, d)))
    gated_mlp_batch(xs, np.zeros((d, 2 * f)), np.zeros((f, d)))
    layer_norm(np.arange(d, dtype=np.float64))
    layer_norm(xs + np.arange(d))
    head_scores(x, x, h)
