"""Temporal-attention-gated replay of cached MLP outputs.

During decode, a video token at frame t >= 2 already produces an attention
score against the token one frame back at the same spatial slot. When the
head-mean of that score clears a threshold, the block reuses the MLP output
cached for the slot instead of recomputing it. First-frame tokens are always
computed; they seed the cache.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np


class EligibilityError(ValueError):
    """Raised when a replay score is requested for a first-frame token."""


@dataclass
class TemporalScore:
    """Per-head scaled scores between a token and its previous-frame twin.

    `frame` is 1-based; records exist only for frame >= 2. `mean` is the
    plain arithmetic average over heads.
    """

    layer: int
    frame: int
    slot: int
    per_head: np.ndarray
    mean: float

    @classmethod
    def from_heads(cls, layer: int, frame: int, slot: int, per_head: np.ndarray) -> "TemporalScore":
        if frame < 2:
            raise EligibilityError(f"frame {frame} has no predecessor frame")
        per_head = np.asarray(per_head, dtype=np.float64)
        return cls(layer=layer, frame=frame, slot=slot, per_head=per_head,
                   mean=float(np.mean(per_head)))


def tas_from_logits(score_rows: np.ndarray, seq_pos: int, layout, layer: int) -> TemporalScore:
    """Read the replay score out of an attention step's score rows.

    `score_rows` are the pre-softmax scaled rows (num_heads, ctx) the
    attention kernel already produced for sequence position `seq_pos`, with
    columns indexed by absolute position. Nothing new is computed; the
    aligned column is one frame (N positions) back.
    """
    frame, slot = layout.frame_and_slot(seq_pos)
    if frame < 2:
        raise EligibilityError(f"position {seq_pos} is in frame {frame}")
    aligned = seq_pos - layout.tokens_per_frame
    if score_rows.shape[1] <= aligned:
        raise ValueError("score rows do not cover the aligned column")
    return TemporalScore.from_heads(layer, frame, slot, score_rows[:, aligned].copy())


@dataclass(frozen=True)
class ReplayPolicy:
    """Threshold rule for the replay gate.

    `consistent` mode applies one scalar threshold at every layer;
    `inconsistent` mode supplies one threshold per layer. Ties replay.
    First-frame tokens are always exempt (they fill the cache).
    """

    mode: str = "consistent"
    threshold: Union[float, Tuple[float, ...]] = math.inf
    exempt_first_frame: bool = True

    def __post_init__(self):
        if self.mode not in ("consistent", "inconsistent"):
            raise ValueError(f"unknown threshold mode {self.mode!r}")
        if not self.exempt_first_frame:
            raise ValueError("first-frame exemption is not optional")
        if self.mode == "inconsistent":
            thresholds = tuple(float(t) for t in np.atleast_1d(self.threshold))
            object.__setattr__(self, "threshold", thresholds)
        else:
            object.__setattr__(self, "threshold", float(self.threshold))

    def threshold_for(self, layer: int) -> float:
        if self.mode == "consistent":
            return self.threshold
        return self.threshold[layer]

    def num_layers(self) -> Optional[int]:
        return None if self.mode == "consistent" else len(self.threshold)


def replay_decide(score: TemporalScore, policy: ReplayPolicy) -> bool:
    """Replay iff the head-mean score reaches the layer threshold (ties replay)."""
    return score.mean >= policy.threshold_for(score.layer)


class MlpCache:
    """One cached MLP output vector per (layer, spatial slot).

    A slot is overwritten whenever its position is computed; replay returns a
    copy of the stored vector, leaving the slot holding the same value, so
    after either branch the slot carries the current frame's output.
    """

    def __init__(self, num_layers: int, slots: int, width: int):
        self.data = np.zeros((num_layers, slots, width))
        self.filled = np.zeros((num_layers, slots), dtype=bool)

    def store(self, layer: int, slot: int, value: np.ndarray) -> None:
        self.data[layer, slot] = value
        self.filled[layer, slot] = True

    def fetch(self, layer: int, slot: int) -> np.ndarray:
        if not self.filled[layer, slot]:
            raise RuntimeError(f"cache slot (layer {layer}, slot {slot}) never filled")
        return self.data[layer, slot].copy()


def replay_or_compute(
    z: np.ndarray,
    score: Optional[TemporalScore],
    cache: MlpCache,
    policy: Optional[ReplayPolicy],
    layer: int,
    slot: Optional[int],
    mlp_fn: Callable[[np.ndarray], np.ndarray],
) -> Tuple[np.ndarray, bool]:
    """The two-branch block tail: reuse the cached slot or run the MLP.

    Returns (output, replayed). `slot` is None for prompt positions, which
    never touch the cache. On the compute branch the result is written back
    to the slot so the next frame can replay it.
    """
    if policy is not None and score is not None and replay_decide(score, policy):
        return cache.fetch(layer, slot), True
    out = mlp_fn(z)
    if slot is not None:
        cache.store(layer, slot, out)
    return out, False


@dataclass
class ReplayStats:
    """Per-layer eligible/replayed counts for one run."""

    eligible: np.ndarray
    replayed: np.ndarray

    @classmethod
    def zeros(cls, num_layers: int) -> "ReplayStats":
        return cls(np.zeros(num_layers, dtype=np.int64), np.zeros(num_layers, dtype=np.int64))

    def record(self, layer: int, replayed: bool) -> None:
        self.eligible[layer] += 1
        if replayed:
            self.replayed[layer] += 1

    def ratio(self) -> float:
        total = int(self.eligible.sum())
        return float(self.replayed.sum() / total) if total else 0.0

    def layer_ratio(self, layer: int) -> float:
        e = int(self.eligible[layer])
        return float(self.replayed[layer] / e) if e else 0.0

    def rows(self) -> List[Tuple[int, int, int, float]]:
        return [
            (l, int(self.eligible[l]), int(self.replayed[l]), self.layer_ratio(l))
            for l in range(len(self.eligible))
        ]


@dataclass
class CalibrationResult:
    policy: ReplayPolicy
    achieved_ratio: float
    saturated: bool
    target_ratio: float
    trials: int
    per_layer_ratios: Optional[np.ndarray] = None


def _measure(config, layout, prompt, policy, mask, weights):
    from . import model as model_mod

    trace = model_mod.decode(
        config, layout, prompt, policy=policy, mask=mask, weights=weights
    )
    return trace.replay_stats


def calibrate_threshold(
    config,
    layout,
    prompt,
    target_ratio: float,
    mode: str = "consistent",
    mask=None,
    tolerance: float = 0.02,
    threshold_floor: Optional[float] = None,
    weights=None,
    max_trials: int = 40,
) -> CalibrationResult:
    """Bisect the threshold until the measured replay ratio hits the target.

    Every trial is a full decode with replay decisions applied, because
    replaying changes subsequent tokens and therefore subsequent scores.
    If a `threshold_floor` caps how low the threshold may go and the target
    exceeds the ratio achievable at the floor, the result carries the
    saturated flag and the achieved ceiling.
    """
    from . import model as model_mod

    if not 0.0 <= target_ratio < 1.0:
        raise ValueError("target_ratio must be in [0, 1)")
    if weights is None:
        weights = model_mod.init_weights(config)
    if target_ratio == 0.0:
        policy = _make_policy(mode, math.inf, config.num_layers)
        return CalibrationResult(policy, 0.0, False, 0.0, trials=0)

    # Score distribution from a no-replay probe seeds the search.
    probe = model_mod.decode(
        config, layout, prompt,
        policy=_make_policy(mode, math.inf, config.num_layers),
        mask=mask, weights=weights,
    )
    if not probe.tas_records:
        raise ValueError("layout yields no eligible positions to calibrate on")

    if mode == "consistent":
        return _calibrate_scalar(
            config, layout, prompt, target_ratio, mask, tolerance,
            threshold_floor, weights, probe.tas_records, max_trials,
        )
    return _calibrate_per_layer(
        config, layout, prompt, target_ratio, mask, tolerance,
        threshold_floor, weights, probe.tas_records, max_trials,
    )


def _make_policy(mode, value, num_layers):
    if mode == "consistent":
        return ReplayPolicy(mode="consistent", threshold=value)
    return ReplayPolicy(mode="inconsistent", threshold=(value,) * num_layers)


def _calibrate_scalar(config, layout, prompt, target, mask, tol, floor, weights,
                      probe_records, max_trials):
    means = np.array([r.mean for r in probe_records])
    lo = float(means.min()) - 1.0
    hi = float(means.max()) + 1.0
    if floor is not None:
        lo = max(lo, floor)
    trials = 0
    best: Tuple[float, float] = (math.inf, math.inf)  # (|err|, threshold)
    best_ratio = 0.0

    def measure(threshold):
        nonlocal trials, best, best_ratio
        trials += 1
        stats = _measure(config, layout, prompt,
                         ReplayPolicy(threshold=threshold), mask, weights)
        r = stats.ratio()
        err = abs(r - target)
        if err < best[0]:
            best = (err, threshold)
            best_ratio = r
        return r

    r_lo = measure(lo)
    if r_lo < target - tol:
        # Even the lowest allowed threshold cannot reach the target.
        return CalibrationResult(
            ReplayPolicy(threshold=lo), r_lo, True, target, trials
        )
    for _ in range(max_trials):
        if best[0] <= tol:
            break
        mid = 0.5 * (lo + hi)
        r_mid = measure(mid)
        if r_mid >= target:
            lo = mid
        else:
            hi = mid
    saturated = best[0] > tol
    return CalibrationResult(
        ReplayPolicy(threshold=best[1]), best_ratio, saturated, target, trials
    )


def _layer_quantile_thresholds(records, layers, target, floor):
    """Per-layer thresholds putting a `target` fraction of observed means at
    or above the threshold."""
    thresholds = np.empty(layers)
    for l in range(layers):
        means = np.sort(np.array([r.mean for r in records if r.layer == l]))[::-1]
        want = int(round(target * means.size))
        if want <= 0:
            thresholds[l] = means[0] + 1.0
        else:
            thresholds[l] = means[min(want, means.size) - 1]
        if floor is not None:
            thresholds[l] = max(thresholds[l], floor)
    return thresholds


def _calibrate_per_layer(config, layout, prompt, target, mask, tol, floor, weights,
                         probe_records, max_trials):
    """Per-layer thresholds hitting the same target ratio at every layer.

    Bracket-style bisection is unstable here: changing one layer's threshold
    shifts every other layer's score distribution through the generated
    tokens. Instead each trial refits every off-target layer's threshold to
    the empirical quantile of the scores that trial actually produced.
    """
    from . import model as model_mod

    layers = config.num_layers
    thresholds = _layer_quantile_thresholds(probe_records, layers, target, floor)

    trials = 0
    best_err = math.inf
    best_thresholds = thresholds.copy()
    best_stats = None
    for _ in range(max_trials):
        trials += 1
        trace = model_mod.decode(
            config, layout, prompt,
            policy=ReplayPolicy(mode="inconsistent", threshold=tuple(thresholds)),
            mask=mask, weights=weights,
        )
        stats = trace.replay_stats
        ratios = np.array([stats.layer_ratio(l) for l in range(layers)])
        # Per-layer ratios scatter under token feedback; the contract is on
        # the overall achieved ratio, with every layer aimed at the target.
        err = abs(stats.ratio() - target)
        if err < best_err:
            best_err = err
            best_thresholds = thresholds.copy()
            best_stats = stats
        if err <= tol:
            break
        refit = _layer_quantile_thresholds(trace.tas_records, layers, target, floor)
        off = np.abs(ratios - target) > tol
        thresholds = np.where(off, refit, thresholds)

    policy = ReplayPolicy(mode="inconsistent", threshold=tuple(best_thresholds))
    saturated = best_err > tol
    return CalibrationResult(
        policy, best_stats.ratio(), saturated, target, trials,
        per_layer_ratios=np.array([best_stats.layer_ratio(l) for l in range(layers)]),
    )
