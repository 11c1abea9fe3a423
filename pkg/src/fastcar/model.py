"""Toy AR transformer over frame-structured token grids.

Pre-norm blocks (attention + SiLU-gated MLP, both with residuals), greedy
decoding, full KV cache. Weights are seeded Gaussians; nothing is trained.
The decode loop optionally applies a replay policy (reuse the previous
frame's cached MLP output when the temporal attention score clears the
threshold) and/or a sink+local attention mask.

Every numeric path goes through the fixed-order kernels in
`fastcar.tensorops`, so cached stepwise decoding, batched teacher-forced
forwards, and full no-cache recomputation all agree bit for bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from . import tensorops as to
from .accounting import NOOP_RECORDER
from .replay import (
    MlpCache,
    ReplayPolicy,
    ReplayStats,
    TemporalScore,
    replay_or_compute,
)
from .rng import stream
from .sparse import AttentionMask, allowed_positions


@dataclass(frozen=True)
class ModelConfig:
    hidden_size: int = 64
    mlp_size: int = 176
    num_heads: int = 4
    num_layers: int = 8
    vocab_size: int = 512
    seed: int = 42
    positional_encoding: bool = False

    def __post_init__(self):
        for name in ("hidden_size", "mlp_size", "num_heads", "num_layers", "vocab_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.hidden_size % self.num_heads != 0:
            raise ValueError("hidden_size must be divisible by num_heads")

    @property
    def head_size(self) -> int:
        return self.hidden_size // self.num_heads


@dataclass(frozen=True)
class FrameLayout:
    """T frames of N tokens, generated after a prompt of `prefill_len` tokens.

    Video position v (0-based) lives at sequence position prefill_len + v,
    in 1-based frame v // N + 1 at spatial slot v % N. The aligned
    previous-frame position is exactly N sequence positions back; it exists
    for frames >= 2.
    """

    num_frames: int = 8
    tokens_per_frame: int = 16
    prefill_len: int = 16

    def __post_init__(self):
        if self.num_frames < 1 or self.tokens_per_frame < 1:
            raise ValueError("frame grid dimensions must be >= 1")
        if self.prefill_len < 1:
            raise ValueError("prefill_len must be >= 1")

    @property
    def video_len(self) -> int:
        return self.num_frames * self.tokens_per_frame

    @property
    def total_len(self) -> int:
        return self.prefill_len + self.video_len

    def frame_and_slot(self, seq_pos: int):
        """(1-based frame, 0-based slot) of a video sequence position."""
        vpos = seq_pos - self.prefill_len
        if vpos < 0:
            raise ValueError(f"position {seq_pos} is inside the prompt")
        return vpos // self.tokens_per_frame + 1, vpos % self.tokens_per_frame

    def eligible_evals(self, num_layers: int) -> int:
        return (self.num_frames - 1) * self.tokens_per_frame * num_layers


# ---------------------------------------------------------------------------
# Weights
# ---------------------------------------------------------------------------


@dataclass
class LayerWeights:
    w_query: np.ndarray
    w_key: np.ndarray
    w_value: np.ndarray
    w_out: np.ndarray
    w_gate: np.ndarray
    w_up: np.ndarray
    w_down: np.ndarray
    w_qkv: np.ndarray = field(init=False)
    w_gate_up: np.ndarray = field(init=False)

    def __post_init__(self):
        # Fused views used by the kernels; column slices match the parts.
        self.w_qkv = np.ascontiguousarray(np.hstack([self.w_query, self.w_key, self.w_value]))
        self.w_gate_up = np.ascontiguousarray(np.hstack([self.w_gate, self.w_up]))


MATRIX_NAMES = ("w_query", "w_key", "w_value", "w_out", "w_gate", "w_up", "w_down")


@dataclass
class Weights:
    embedding: np.ndarray
    layers: List[LayerWeights]
    head: np.ndarray


def init_weights(config: ModelConfig) -> Weights:
    """Seeded Gaussian init, scale 0.02/sqrt(num_layers), drawn in a fixed order."""
    rng = stream(config.seed, "weights")
    scale = 0.02 / math.sqrt(config.num_layers)
    d, f = config.hidden_size, config.mlp_size
    embedding = rng.normal(scale=scale, size=(config.vocab_size, d))
    layers = []
    for _ in range(config.num_layers):
        layers.append(
            LayerWeights(
                w_query=rng.normal(scale=scale, size=(d, d)),
                w_key=rng.normal(scale=scale, size=(d, d)),
                w_value=rng.normal(scale=scale, size=(d, d)),
                w_out=rng.normal(scale=scale, size=(d, d)),
                w_gate=rng.normal(scale=scale, size=(d, f)),
                w_up=rng.normal(scale=scale, size=(d, f)),
                w_down=rng.normal(scale=scale, size=(f, d)),
            )
        )
    head = rng.normal(scale=scale, size=(d, config.vocab_size))
    return Weights(embedding=embedding, layers=layers, head=head)


def save_weights(weights: Weights, path) -> None:
    """Write weights as an npz archive keyed by (layer, matrix name)."""
    arrays = {"embedding": weights.embedding, "head": weights.head}
    for l, lw in enumerate(weights.layers):
        for name in MATRIX_NAMES:
            arrays[f"layer{l:02d}.{name}"] = getattr(lw, name)
    np.savez(Path(path), **arrays)


def load_weights(path) -> Weights:
    with np.load(Path(path)) as data:
        num_layers = sum(1 for k in data.files if k.endswith(".w_query"))
        layers = [
            LayerWeights(**{name: data[f"layer{l:02d}.{name}"] for name in MATRIX_NAMES})
            for l in range(num_layers)
        ]
        return Weights(embedding=data["embedding"], layers=layers, head=data["head"])


def default_prompt(config: ModelConfig, layout: FrameLayout) -> np.ndarray:
    """Prompt token ids drawn from the named `prompt` stream."""
    rng = stream(config.seed, "prompt")
    return rng.integers(0, config.vocab_size, size=layout.prefill_len, dtype=np.int64)


# ---------------------------------------------------------------------------
# Run state and outputs
# ---------------------------------------------------------------------------


class KvCache:
    """Append-only per-layer key/value rows for one run."""

    def __init__(self, num_layers: int, capacity: int, width: int):
        self._k = np.zeros((num_layers, capacity, width))
        self._v = np.zeros((num_layers, capacity, width))
        self.length = 0
        self.capacity = capacity

    def append(self, layer: int, k: np.ndarray, v: np.ndarray) -> None:
        self._k[layer, self.length] = k
        self._v[layer, self.length] = v

    def advance(self) -> None:
        self.length += 1

    def keys_through_current(self, layer: int) -> np.ndarray:
        return self._k[layer, : self.length + 1]

    def values_through_current(self, layer: int) -> np.ndarray:
        return self._v[layer, : self.length + 1]

    def key_row(self, layer: int, pos: int) -> np.ndarray:
        return self._k[layer, pos]


@dataclass
class RunArtifacts:
    """Everything the analysis side needs from one forward pass."""

    tokens: np.ndarray                # (n,)
    block_inputs: np.ndarray          # (L, n, d) hidden state entering each block
    attn_outputs: np.ndarray          # (L, n, d) attention output added to the residual
    mlp_outputs: np.ndarray           # (L, n, d) MLP output added to the residual
    queries: np.ndarray               # (L, n, d) concatenated per-head queries
    keys: np.ndarray                  # (L, n, d)
    tas_records: List[TemporalScore]
    logits: Optional[np.ndarray] = None


@dataclass
class DecodeTrace:
    tokens: np.ndarray                       # generated video token ids (T*N,)
    full_tokens: np.ndarray                  # prompt + generated (total_len,)
    replay_stats: ReplayStats
    tas_records: List[TemporalScore]
    replay_flags: np.ndarray                 # (L, T*N) bool
    logits: Optional[np.ndarray] = None      # (T*N, vocab) token-producing steps
    artifacts: Optional[RunArtifacts] = None


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------


class TransformerModel:
    def __init__(self, config: ModelConfig, weights: Optional[Weights] = None):
        self.config = config
        self.weights = weights if weights is not None else init_weights(config)

    # -- pieces ------------------------------------------------------------

    def embed(self, token: int, pos: int) -> np.ndarray:
        x = self.weights.embedding[token].copy()
        if self.config.positional_encoding:
            x += self._sinusoid(pos)
        return x

    def _sinusoid(self, pos: int) -> np.ndarray:
        d = self.config.hidden_size
        pe = np.empty(d)
        idx = np.arange(0, d, 2)
        angles = pos / np.power(10000.0, idx / d)
        pe[0::2] = np.sin(angles)
        pe[1::2] = np.cos(angles[: pe[1::2].size])
        return pe

    def attention_step(
        self,
        x: np.ndarray,
        layer: int,
        kv: KvCache,
        recorder=NOOP_RECORDER,
        mask: Optional[AttentionMask] = None,
    ):
        """One token's causal attention at `layer`.

        Projects q/k/v from `x`, appends k/v to the cache, and attends over
        all cached positions (or the mask's allowed subset). Returns
        (context, score_rows): the per-head softmax-weighted value sums,
        concatenated, and the pre-softmax scaled score rows the replay gate
        reads. The block's output projection is applied by the caller.
        """
        context, scores, _, _ = self._attention_step(x, layer, kv, recorder, mask)
        return context, scores

    def _attention_step(self, x, layer, kv, recorder, mask):
        if not 0 <= layer < self.config.num_layers:
            raise ValueError(f"layer {layer} out of range")
        lw = self.weights.layers[layer]
        d = self.config.hidden_size
        pos = kv.length

        recorder.begin("attention-proj")
        qkv = to.vec_mat(x, lw.w_qkv)
        recorder.end()
        q, k, v = qkv[:d], qkv[d : 2 * d], qkv[2 * d :]
        kv.append(layer, k, v)

        if mask is None or mask.covers_all(pos):
            keys = kv.keys_through_current(layer)
            values = kv.values_through_current(layer)
        else:
            allowed = allowed_positions(pos, mask)
            keys = kv.keys_through_current(layer)[allowed]
            values = kv.values_through_current(layer)[allowed]
        recorder.begin("attention-score")
        context, score_rows = to.attention_context(q, keys, values, self.config.num_heads)
        recorder.end()
        return context, score_rows, q, k

    def gated_mlp(self, z: np.ndarray, layer: int, recorder=NOOP_RECORDER) -> np.ndarray:
        """The block's MLP on an arbitrary input vector: (silu(zWg) * zWu) Wd."""
        lw = self.weights.layers[layer]
        recorder.begin("mlp")
        out = to.gated_mlp(z, lw.w_gate_up, lw.w_down)
        recorder.end()
        return out

    # -- replay score ---------------------------------------------------------

    def _temporal_score(self, layer, pos, layout, score_rows, q, kv, mask, recorder):
        """Per-head score against the aligned previous-frame position.

        Read from the already-computed score rows when the mask shows the
        aligned column; otherwise recover it from the retained key cache with
        one scaled dot product per head.
        """
        frame, slot = layout.frame_and_slot(pos)
        aligned = pos - layout.tokens_per_frame
        if mask is None or mask.covers_all(pos):
            per_head = score_rows[:, aligned].copy()
        elif mask.contains(pos, aligned):
            col = int(np.searchsorted(allowed_positions(pos, mask), aligned))
            per_head = score_rows[:, col].copy()
        else:
            recorder.begin("attention-score")
            per_head = to.head_scores(q, kv.key_row(layer, aligned), self.config.num_heads)
            recorder.end()
        return TemporalScore.from_heads(layer, frame, slot, per_head)


# ---------------------------------------------------------------------------
# Decode loop
# ---------------------------------------------------------------------------


def decode(
    config: ModelConfig,
    layout: FrameLayout,
    prompt: Sequence[int],
    policy: Optional[ReplayPolicy] = None,
    mask: Optional[AttentionMask] = None,
    weights: Optional[Weights] = None,
    recorder=None,
    collect_logits: bool = False,
    collect_artifacts: bool = False,
) -> DecodeTrace:
    """Greedy decode of the full frame grid, KV-cached, replay optional.

    Every position of the sequence is processed through all layers,
    including the final generated token, so each of the (T-1)*N eligible
    positions receives a replay decision at every layer.
    """
    prompt = np.asarray(prompt, dtype=np.int64)
    if prompt.shape != (layout.prefill_len,):
        raise ValueError(f"prompt must hold exactly {layout.prefill_len} tokens")
    if prompt.size and (prompt.min() < 0 or prompt.max() >= config.vocab_size):
        raise ValueError("prompt token id out of vocabulary range")
    if policy is not None and policy.num_layers() not in (None, config.num_layers):
        raise ValueError("inconsistent-mode policy must supply one threshold per layer")

    rec = recorder if recorder is not None else NOOP_RECORDER
    model = TransformerModel(config, weights)
    layers = config.num_layers
    d = config.hidden_size
    total = layout.total_len
    prefill = layout.prefill_len
    n_video = layout.video_len
    tpf = layout.tokens_per_frame

    kv = KvCache(layers, total, d)
    mlp_cache = MlpCache(layers, tpf, d)
    stats = ReplayStats.zeros(layers)
    tas_records: List[TemporalScore] = []
    replay_flags = np.zeros((layers, n_video), dtype=bool)
    tokens = np.zeros(total, dtype=np.int64)
    tokens[:prefill] = prompt
    logits_snap = np.zeros((n_video, config.vocab_size)) if collect_logits else None

    art = None
    if collect_artifacts:
        art = RunArtifacts(
            tokens=tokens,
            block_inputs=np.zeros((layers, total, d)),
            attn_outputs=np.zeros((layers, total, d)),
            mlp_outputs=np.zeros((layers, total, d)),
            queries=np.zeros((layers, total, d)),
            keys=np.zeros((layers, total, d)),
            tas_records=tas_records,
        )

    want_scores = policy is not None or collect_artifacts
    generated = 0
    rec.set_phase("prefill")
    for pos in range(total):
        if pos == prefill:
            rec.set_phase("decode")
        x = model.embed(int(tokens[pos]), pos)
        vpos = pos - prefill
        eligible = vpos >= tpf
        slot = vpos % tpf if vpos >= 0 else None

        for layer in range(layers):
            lw = model.weights.layers[layer]
            if art is not None:
                art.block_inputs[layer, pos] = x
            rec.begin("norm")
            a_in = to.layer_norm(x)
            rec.end()
            context, score_rows, q, k = model._attention_step(a_in, layer, kv, rec, mask)
            rec.begin("attention-proj")
            attn_out = to.vec_mat(context, lw.w_out)
            rec.end()
            if art is not None:
                art.attn_outputs[layer, pos] = attn_out
                art.queries[layer, pos] = q
                art.keys[layer, pos] = k
            z = x + attn_out

            score = None
            if eligible and want_scores:
                score = model._temporal_score(layer, pos, layout, score_rows, q, kv, mask, rec)
                tas_records.append(score)

            def run_mlp(operand, lw=lw):
                rec.begin("norm")
                m_in = to.layer_norm(operand)
                rec.end()
                rec.begin("mlp")
                out = to.gated_mlp(m_in, lw.w_gate_up, lw.w_down)
                rec.end()
                return out

            y, replayed = replay_or_compute(
                z, score if policy is not None else None,
                mlp_cache, policy, layer, slot, run_mlp,
            )
            if eligible and policy is not None:
                stats.record(layer, replayed)
                replay_flags[layer, vpos] = replayed
            if art is not None:
                art.mlp_outputs[layer, pos] = y
            x = z + y
        kv.advance()

        if prefill - 1 <= pos < total - 1:
            rec.begin("norm")
            xf = to.layer_norm(x)
            rec.end()
            rec.begin("head")
            logits = to.vec_mat(xf, model.weights.head)
            rec.end()
            tokens[pos + 1] = int(np.argmax(logits))
            if logits_snap is not None:
                logits_snap[generated] = logits
            generated += 1

    return DecodeTrace(
        tokens=tokens[prefill:].copy(),
        full_tokens=tokens,
        replay_stats=stats,
        tas_records=tas_records,
        replay_flags=replay_flags,
        logits=logits_snap,
        artifacts=art,
    )


# ---------------------------------------------------------------------------
# Batched teacher-forced forward (no KV cache, no replay)
# ---------------------------------------------------------------------------


def forward_full(
    config: ModelConfig,
    tokens: Sequence[int],
    weights: Optional[Weights] = None,
    layout: Optional[FrameLayout] = None,
    with_logits: bool = True,
) -> RunArtifacts:
    """Causal forward of a whole token sequence as one batch.

    Runs the identical arithmetic to the cached decode loop (the kernels
    share per-element reduction order), so hidden states match a stepwise
    run of the same tokens bit for bit. Temporal score records are extracted
    when `layout` is given.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.min() < 0 or tokens.max() >= config.vocab_size:
        raise ValueError("token id out of vocabulary range")
    model = TransformerModel(config, weights)
    n = tokens.size
    layers, d = config.num_layers, config.hidden_size

    xs = model.weights.embedding[tokens].copy()
    if config.positional_encoding:
        xs += np.stack([model._sinusoid(p) for p in range(n)])

    tas_records: List[TemporalScore] = []
    art = RunArtifacts(
        tokens=tokens,
        block_inputs=np.zeros((layers, n, d)),
        attn_outputs=np.zeros((layers, n, d)),
        mlp_outputs=np.zeros((layers, n, d)),
        queries=np.zeros((layers, n, d)),
        keys=np.zeros((layers, n, d)),
        tas_records=tas_records,
    )

    for layer in range(layers):
        lw = model.weights.layers[layer]
        art.block_inputs[layer] = xs
        normed = to.layer_norm(xs)
        qkv = to.matmul(normed, lw.w_qkv)
        qs, ks, vs = qkv[:, :d], qkv[:, d : 2 * d], qkv[:, 2 * d :]
        context, scores = to.attention_context_causal(qs, ks, vs, config.num_heads)
        attn_out = to.matmul(context, lw.w_out)
        art.attn_outputs[layer] = attn_out
        art.queries[layer] = qs
        art.keys[layer] = ks
        zs = xs + attn_out
        ys = to.gated_mlp_batch(to.layer_norm(zs), lw.w_gate_up, lw.w_down)
        art.mlp_outputs[layer] = ys
        xs = zs + ys

        if layout is not None:
            tpf = layout.tokens_per_frame
            first = layout.prefill_len + tpf
            for pos in range(first, min(n, layout.total_len)):
                frame, slot = layout.frame_and_slot(pos)
                tas_records.append(
                    TemporalScore.from_heads(layer, frame, slot, scores[:, pos, pos - tpf].copy())
                )

    if with_logits:
        art.logits = to.matmul(to.layer_norm(xs), model.weights.head)
    return art


def teacher_forced_forward(
    config: ModelConfig,
    layout: FrameLayout,
    tokens: Sequence[int],
    weights: Optional[Weights] = None,
) -> RunArtifacts:
    """Forced forward of a full prompt+video token stream for analysis."""
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.shape != (layout.total_len,):
        raise ValueError(f"need exactly {layout.total_len} tokens, got {tokens.size}")
    return forward_full(config, tokens, weights=weights, layout=layout)
