"""Numeric verification of the similarity bounds behind the replay gate.

Three layered claims get checked on real run artifacts:

  1. for unit vectors, squared distance and inner product trade off exactly
     (the law-of-cosines identity the score analysis starts from);
  2. a certified Lipschitz bound for the gated MLP turns attention-side
     closeness into MLP-output closeness (zero violations expected, since
     the bound is provably valid on the sampled ball);
  3. composing the two, a fitted constant relates the normalized temporal
     attention score to MLP-output distance; the constant is fitted on one
     half of the aligned pairs and must cover the other half.

The analysis route deliberately avoids the engine's fixed-order kernels:
MLP outputs here are recomputed with plain numpy so the checked quantities
do not share code with the mechanism they certify. Bound arithmetic follows
the block shape without normalization (the MLP applied to attention output
plus block input), keeping mechanism plumbing out of the math.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import stats as scipy_stats

from .model import FrameLayout, ModelConfig, RunArtifacts, Weights
from .rng import stream
from .tensorops import spectral_norm

SILU_SLOPE_LIMIT = 1.1  # |d silu / dx| never exceeds this


class PreconditionError(ValueError):
    """An analysis operation was fed inputs outside its contract."""


# ---------------------------------------------------------------------------
# Step 1: unit-vector cosine law
# ---------------------------------------------------------------------------


def check_unit_cosine_law(q: np.ndarray, k: np.ndarray) -> Tuple[float, float]:
    """Return (|q-k|^2, 2(1 - <q,k>)) for unit vectors q, k."""
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    if abs(np.linalg.norm(q) - 1.0) > 1e-9 or abs(np.linalg.norm(k) - 1.0) > 1e-9:
        raise PreconditionError("inputs must be unit vectors")
    lhs = float(np.sum((q - k) ** 2))
    rhs = float(2.0 * (1.0 - q @ k))
    return lhs, rhs


# ---------------------------------------------------------------------------
# Step 2: certified MLP Lipschitz bound
# ---------------------------------------------------------------------------


def gated_mlp_reference(z: np.ndarray, w_gate: np.ndarray, w_up: np.ndarray,
                        w_down: np.ndarray) -> np.ndarray:
    """Plain-numpy gated MLP; the analysis-side route, not the engine's."""
    z = np.asarray(z, dtype=np.float64)
    g = z @ w_gate
    u = z @ w_up
    return (g / (1.0 + np.exp(-g)) * u) @ w_down


def mlp_lipschitz_bound(w_gate: np.ndarray, w_up: np.ndarray, w_down: np.ndarray,
                        radius: float, spectral_iters: int = 256) -> float:
    """Upper bound on the gated MLP's Jacobian norm over the ball |z| <= R.

    Entrywise, |silu(a)| <= |a| and |silu'(a)| <= 1.1, and any entry of z W
    is at most R times the matching column norm. Pushing those through the
    product rule of (silu(zWg) * zWu) Wd gives

        |J| <= |Wd| ( max|silu(zWg)| |Wu| + max|silu'(zWg) * zWu| |Wg| )

    with both maxima bounded by R-scaled column norms. Valid for every pair
    inside the ball by the mean value theorem.
    """
    if radius <= 0:
        raise PreconditionError("radius must be positive")
    gate_col = float(np.max(np.linalg.norm(w_gate, axis=0))) if w_gate.size else 0.0
    up_col = float(np.max(np.linalg.norm(w_up, axis=0))) if w_up.size else 0.0
    sn_gate = spectral_norm(w_gate, iters=spectral_iters)
    sn_up = spectral_norm(w_up, iters=spectral_iters)
    sn_down = spectral_norm(w_down, iters=spectral_iters)
    act_sup = radius * gate_col                      # |silu(z Wg)|_inf
    deriv_sup = SILU_SLOPE_LIMIT * radius * up_col   # |silu'(z Wg) * z Wu|_inf
    return sn_down * (act_sup * sn_up + deriv_sup * sn_gate)


def sampled_lipschitz_violations(
    w_gate: np.ndarray,
    w_up: np.ndarray,
    w_down: np.ndarray,
    radius: float,
    pairs: int,
    seed: int,
) -> Tuple[int, float]:
    """Count sampled pairs inside the ball violating the certified bound.

    Returns (violations, max observed ratio / bound). Pairs are drawn
    uniformly in the ball; ratios use plain numpy arithmetic.
    """
    bound = mlp_lipschitz_bound(w_gate, w_up, w_down, radius)
    d = w_gate.shape[0]
    rng = np.random.default_rng(seed)

    def ball(n):
        x = rng.normal(size=(n, d))
        x /= np.linalg.norm(x, axis=1, keepdims=True)
        r = radius * rng.random(n) ** (1.0 / d)
        return x * r[:, None]

    a, b = ball(pairs), ball(pairs)
    fa = gated_mlp_reference(a, w_gate, w_up, w_down)
    fb = gated_mlp_reference(b, w_gate, w_up, w_down)
    num = np.linalg.norm(fa - fb, axis=1)
    den = np.linalg.norm(a - b, axis=1)
    keep = den > 0
    ratios = num[keep] / den[keep]
    if bound == 0.0:
        violations = int(np.count_nonzero(num[keep] > 0))
        return violations, math.inf if violations else 0.0
    violations = int(np.count_nonzero(ratios > bound))
    return violations, float(ratios.max() / bound) if ratios.size else 0.0


# ---------------------------------------------------------------------------
# Aligned-pair extraction
# ---------------------------------------------------------------------------


def aligned_pairs(layout: FrameLayout) -> np.ndarray:
    """Sequence positions of all frame >= 2 video tokens."""
    first = layout.prefill_len + layout.tokens_per_frame
    return np.arange(first, layout.total_len, dtype=np.int64)


@dataclass
class LayerPairData:
    """Per-layer distances and scores for every aligned pair of one run."""

    layer: int
    delta_input: np.ndarray      # |X_j - X_j-|
    delta_attn: np.ndarray       # |Attn_j - Attn_j-|
    delta_mlp_ref: np.ndarray    # |f(Z_j) - f(Z_j-)| on the no-norm operands
    delta_mlp_model: np.ndarray  # |Y_j - Y_j-| from the model's own outputs
    normalized_score: np.ndarray  # <q_j, k_j-> after unit normalization
    operand_norms: np.ndarray    # |Z| over both pair members
    input_norms: np.ndarray      # |X_j| over the whole run (for M)


def layer_pair_data(config: ModelConfig, weights: Weights, art: RunArtifacts,
                    layout: FrameLayout, layer: int) -> LayerPairData:
    pos = aligned_pairs(layout)
    prev = pos - layout.tokens_per_frame
    lw = weights.layers[layer]

    x = art.block_inputs[layer]
    attn = art.attn_outputs[layer]
    z = x + attn
    y_ref = gated_mlp_reference(z, lw.w_gate, lw.w_up, lw.w_down)

    q = art.queries[layer][pos]
    k = art.keys[layer][prev]
    qn = q / np.linalg.norm(q, axis=1, keepdims=True)
    kn = k / np.linalg.norm(k, axis=1, keepdims=True)

    return LayerPairData(
        layer=layer,
        delta_input=np.linalg.norm(x[pos] - x[prev], axis=1),
        delta_attn=np.linalg.norm(attn[pos] - attn[prev], axis=1),
        delta_mlp_ref=np.linalg.norm(y_ref[pos] - y_ref[prev], axis=1),
        delta_mlp_model=np.linalg.norm(
            art.mlp_outputs[layer][pos] - art.mlp_outputs[layer][prev], axis=1
        ),
        normalized_score=np.sum(qn * kn, axis=1),
        operand_norms=np.linalg.norm(z, axis=1),
        input_norms=np.linalg.norm(x, axis=1),
    )


# ---------------------------------------------------------------------------
# Theorem-level reports
# ---------------------------------------------------------------------------


@dataclass
class TheoremConstants:
    """Per-layer constants entering the bounds."""

    hidden_bound: float       # M: max hidden-state norm
    projection_bound: float   # max spectral norm of the q/k projections
    projection_gap: float     # spectral norm of (W_query - W_key)
    mlp_lipschitz: float      # certified bound over the observed operand ball
    composite: Optional[float] = None  # fitted constant, when available

    def __post_init__(self):
        for name in ("hidden_bound", "projection_bound", "projection_gap",
                     "mlp_lipschitz"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")


def layer_constants(config: ModelConfig, weights: Weights, layer: int,
                    hidden_bound: float, operand_radius: float) -> TheoremConstants:
    lw = weights.layers[layer]
    return TheoremConstants(
        hidden_bound=hidden_bound,
        projection_bound=max(spectral_norm(lw.w_query, iters=256),
                             spectral_norm(lw.w_key, iters=256)),
        projection_gap=spectral_norm(lw.w_query - lw.w_key, iters=256),
        mlp_lipschitz=mlp_lipschitz_bound(lw.w_gate, lw.w_up, lw.w_down,
                                          operand_radius),
    )


@dataclass
class InequalityCheck:
    name: str
    pairs: int
    violations: int
    max_ratio: float          # max LHS/RHS; <= 1 means the bound held
    details: Dict[str, float] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.violations == 0


def verify_theorem2(config: ModelConfig, weights: Weights, art: RunArtifacts,
                    layout: FrameLayout, layer: int) -> InequalityCheck:
    """MLP output distance bounded by input + attention distance, per pair.

    Operands follow the bare block shape: the MLP input is attention output
    plus block input, and the certified Lipschitz bound is evaluated on a
    ball covering every observed operand.
    """
    data = layer_pair_data(config, weights, art, layout, layer)
    radius = float(data.operand_norms.max())
    lw = weights.layers[layer]
    l_hat = mlp_lipschitz_bound(lw.w_gate, lw.w_up, lw.w_down, radius)
    rhs = l_hat * (data.delta_input + data.delta_attn)
    lhs = data.delta_mlp_ref
    with np.errstate(divide="ignore", invalid="ignore"):
        ratios = np.where(rhs > 0, lhs / rhs, np.where(lhs > 0, np.inf, 0.0))
    return InequalityCheck(
        name=f"mlp-output-bound-layer{layer}",
        pairs=int(lhs.size),
        violations=int(np.count_nonzero(lhs > rhs)),
        max_ratio=float(ratios.max()) if ratios.size else 0.0,
        details={"lipschitz_bound": l_hat, "operand_radius": radius},
    )


@dataclass
class CompositeFit:
    """Fitted composite constant and its held-out check for one layer."""

    layer: int
    fitted_constant: float
    slack: float               # held-out max base-ratio / fitted constant
    pairs_fit: int
    pairs_holdout: int
    constants: TheoremConstants

    def holds(self, margin: float = 1.5) -> bool:
        """Held-out pairs satisfy the inequality with C inflated by `margin`."""
        return self.slack <= margin


def fit_composite(config: ModelConfig, weights: Weights,
                  runs: Sequence[Tuple[RunArtifacts, FrameLayout]],
                  layer: int, split_seed: int = 0) -> CompositeFit:
    """Fit C in: mlp distance <= C (input distance + sqrt(1-s) + gap * M).

    s is the normalized query/key score. Pairs from all runs are pooled,
    split in half by a seeded shuffle; C is the max base-ratio on the fit
    half and is then checked on the held-out half.
    """
    datas = [layer_pair_data(config, weights, art, lay, layer) for art, lay in runs]
    delta_in = np.concatenate([d.delta_input for d in datas])
    delta_mlp = np.concatenate([d.delta_mlp_ref for d in datas])
    scores = np.concatenate([d.normalized_score for d in datas])
    hidden_bound = float(max(d.input_norms.max() for d in datas))
    radius = float(max(d.operand_norms.max() for d in datas))
    consts = layer_constants(config, weights, layer, hidden_bound, radius)

    base = (
        delta_in
        + np.sqrt(np.maximum(0.0, 1.0 - scores))
        + consts.projection_gap * hidden_bound
    )
    with np.errstate(divide="ignore", invalid="ignore"):
        ratios = np.where(base > 0, delta_mlp / base,
                          np.where(delta_mlp > 0, np.inf, 0.0))

    idx = np.random.default_rng(split_seed).permutation(ratios.size)
    half = ratios.size // 2
    fit_idx, hold_idx = idx[:half], idx[half:]
    fitted = float(ratios[fit_idx].max())
    consts.composite = fitted
    holdout_max = float(ratios[hold_idx].max())
    return CompositeFit(
        layer=layer,
        fitted_constant=fitted,
        slack=holdout_max / fitted if fitted > 0 else math.inf,
        pairs_fit=int(half),
        pairs_holdout=int(ratios.size - half),
        constants=consts,
    )


# ---------------------------------------------------------------------------
# Score / similarity correlation
# ---------------------------------------------------------------------------


@dataclass
class CorrelationStats:
    spearman: float
    undefined: bool
    pairs: int
    shuffled_spearman: float
    per_layer_mean_cosine: np.ndarray   # aligned-pair MLP cosine, by layer
    mean_score_duplicated: Optional[float] = None
    mean_score_random: Optional[float] = None


def tas_similarity_correlation(
    config: ModelConfig,
    weights: Weights,
    art: RunArtifacts,
    layout: FrameLayout,
    duplicated_frames: Optional[Sequence[int]] = None,
    min_pairs: int = 50,
    shuffle_seed: int = 1,
) -> CorrelationStats:
    """Rank correlation between normalized scores and MLP output closeness.

    Pools aligned pairs over all layers. A seeded shuffled pairing serves as
    the null control. When `duplicated_frames` marks which frames repeat
    their predecessor, per-group mean scores are reported too.
    """
    pos = aligned_pairs(layout)
    if pos.size * config.num_layers < min_pairs:
        raise PreconditionError(f"need at least {min_pairs} aligned pairs")

    scores, dists, dup_flags = [], [], []
    per_layer_cosine = np.zeros(config.num_layers)
    frames = (pos - layout.prefill_len) // layout.tokens_per_frame + 1
    dup_set = set(duplicated_frames or ())
    for layer in range(config.num_layers):
        data = layer_pair_data(config, weights, art, layout, layer)
        scores.append(data.normalized_score)
        dists.append(data.delta_mlp_model)
        dup_flags.append(np.array([f in dup_set for f in frames]))
        a = art.mlp_outputs[layer][pos]
        b = art.mlp_outputs[layer][pos - layout.tokens_per_frame]
        cos = np.sum(a * b, axis=1) / (
            np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1)
        )
        per_layer_cosine[layer] = float(cos.mean())

    scores = np.concatenate(scores)
    dists = np.concatenate(dists)
    dup_flags = np.concatenate(dup_flags)

    if np.all(scores == scores[0]) or np.all(dists == dists[0]):
        return CorrelationStats(
            spearman=math.nan, undefined=True, pairs=int(scores.size),
            shuffled_spearman=math.nan, per_layer_mean_cosine=per_layer_cosine,
        )

    rho = float(scipy_stats.spearmanr(scores, -dists).statistic)
    shuffled = np.random.default_rng(shuffle_seed).permutation(dists)
    rho_null = float(scipy_stats.spearmanr(scores, -shuffled).statistic)

    mean_dup = mean_rnd = None
    if dup_set:
        mean_dup = float(scores[dup_flags].mean())
        mean_rnd = float(scores[~dup_flags].mean())
    return CorrelationStats(
        spearman=rho,
        undefined=bool(math.isnan(rho)),
        pairs=int(scores.size),
        shuffled_spearman=rho_null,
        per_layer_mean_cosine=per_layer_cosine,
        mean_score_duplicated=mean_dup,
        mean_score_random=mean_rnd,
    )


# ---------------------------------------------------------------------------
# Fixtures
# ---------------------------------------------------------------------------


def small_gap_weights(config: ModelConfig) -> Weights:
    """Seeded weights with the key projection tied to the query projection.

    The score-similarity trend is a statement about models whose projection
    gap is small (the bound carries a `gap * M` offset that otherwise
    dominates). Random untied draws give the score's duplicate-vs-random
    separation a seed-dependent sign, so trend checks run at gap zero, where
    the aligned score reduces to a genuine cosine similarity.
    """
    from .model import LayerWeights, init_weights

    base = init_weights(config)
    layers = [
        LayerWeights(
            w_query=lw.w_query,
            w_key=lw.w_query.copy(),
            w_value=lw.w_value,
            w_out=lw.w_out,
            w_gate=lw.w_gate,
            w_up=lw.w_up,
            w_down=lw.w_down,
        )
        for lw in base.layers
    ]
    return Weights(embedding=base.embedding, layers=layers, head=base.head)


def mixed_frames_tokens(config: ModelConfig, layout: FrameLayout,
                        name: str = "fixture") -> Tuple[np.ndarray, List[int]]:
    """Token stream where every even frame repeats the previous frame.

    Returns (tokens, duplicated frame numbers). Odd frames are drawn fresh,
    so aligned pairs split into identical-content and random-content groups.
    """
    rng = stream(config.seed, name)
    parts = [rng.integers(0, config.vocab_size, size=layout.prefill_len)]
    duplicated = []
    prev = None
    for t in range(1, layout.num_frames + 1):
        if t % 2 == 0 and prev is not None:
            frame = prev.copy()
            duplicated.append(t)
        else:
            frame = rng.integers(0, config.vocab_size, size=layout.tokens_per_frame)
        parts.append(frame)
        prev = frame
    return np.concatenate(parts), duplicated
