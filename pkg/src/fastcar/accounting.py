"""FLOP ledger and wall-clock accounting for decode runs.

Two independent routes produce FLOP numbers:

  * the `Recorder`, fed by the kernels themselves while a run executes
    (`fastcar.tensorops` reports every kernel's count to the attached sink);
  * `flops_model`, a closed-form count written directly from the block
    arithmetic.

The two must agree exactly; the test suite holds them to integer equality.

Convention (see `fastcar.tensorops`): multiply-add = 2 FLOPs, softmax = 4 per
element, layer norm / SiLU / residual adds = 0. With this convention a replay
saves exactly the three MLP matmuls, 6*d*d_ff FLOPs per (token, layer).
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Tuple

import numpy as np

from . import tensorops
from .sparse import AttentionMask, allowed_count

PHASES = ("prefill", "decode")
MODULES = ("attention-proj", "attention-score", "mlp", "head", "norm")

Cell = Tuple[str, str]  # (phase, module)


class Recorder:
    """Accumulates per-(phase, module) FLOPs and wall time during one run.

    The engine brackets each kernel call with `begin`/`end`; kernels report
    their own FLOP counts through the tensorops sink while a region is open.
    Not reentrant; one recorder per run.
    """

    def __init__(self):
        self.flops: Dict[Cell, int] = {}
        self.times: Dict[Cell, float] = {}
        self.phase_walls: Dict[str, float] = {}
        self.phase = "prefill"
        self._module: Optional[str] = None
        self._t0 = 0.0
        self._pending = 0
        self._phase_t0: Optional[float] = None

    # -- attachment to the kernel layer ------------------------------------
    def __enter__(self):
        tensorops.set_flop_sink(self._sink)
        return self

    def __exit__(self, *exc):
        tensorops.set_flop_sink(None)
        self._close_phase()
        return False

    def _sink(self, n: int) -> None:
        self._pending += n

    def _close_phase(self) -> None:
        if self._phase_t0 is not None:
            self.phase_walls[self.phase] = (
                self.phase_walls.get(self.phase, 0.0)
                + time.perf_counter() - self._phase_t0
            )
            self._phase_t0 = None

    # -- region bracketing ---------------------------------------------------
    def set_phase(self, phase: str) -> None:
        self._close_phase()
        self.phase = phase
        self._phase_t0 = time.perf_counter()

    def begin(self, module: str) -> None:
        self._module = module
        self._pending = 0
        self._t0 = time.perf_counter()

    def end(self) -> None:
        dt = time.perf_counter() - self._t0
        cell = (self.phase, self._module)
        self.flops[cell] = self.flops.get(cell, 0) + self._pending
        self.times[cell] = self.times.get(cell, 0.0) + dt
        self._module = None
        self._pending = 0

    # -- results ---------------------------------------------------------------
    def ledger(self, replayed_evals: int = 0, mlp_flops_per_eval: int = 0) -> "FlopLedger":
        return FlopLedger(
            counts=dict(self.flops),
            replay_savings=replayed_evals * mlp_flops_per_eval,
        )


class _NoopRecorder:
    """Recorder stand-in for uninstrumented runs; every hook is a no-op."""

    phase = "decode"

    def set_phase(self, phase: str) -> None:
        pass

    def begin(self, module: str) -> None:
        pass

    def end(self) -> None:
        pass


NOOP_RECORDER = _NoopRecorder()


@dataclass
class FlopLedger:
    """Executed FLOPs per (phase, module), plus FLOPs avoided by replay."""

    counts: Dict[Cell, int] = field(default_factory=dict)
    replay_savings: int = 0

    def total(self) -> int:
        return sum(self.counts.values())

    def phase_total(self, phase: str) -> int:
        return sum(v for (p, _), v in self.counts.items() if p == phase)

    def module_total(self, module: str) -> int:
        return sum(v for (_, m), v in self.counts.items() if m == module)

    def get(self, phase: str, module: str) -> int:
        return self.counts.get((phase, module), 0)

    def rows(self) -> List[Tuple[str, str, int]]:
        out = []
        for phase in PHASES:
            for module in MODULES:
                out.append((phase, module, self.get(phase, module)))
        return out

    def __eq__(self, other):
        if not isinstance(other, FlopLedger):
            return NotImplemented
        mine = {k: v for k, v in self.counts.items() if v}
        theirs = {k: v for k, v in other.counts.items() if v}
        return mine == theirs and self.replay_savings == other.replay_savings


@dataclass
class LatencyReport:
    """Median wall-times per (phase, module) and per-phase totals, seconds."""

    times: Dict[Cell, float]
    phase_totals: Dict[str, float]
    sequence_length: int
    repetitions: int

    def get(self, phase: str, module: str) -> float:
        return self.times.get((phase, module), 0.0)

    def module_time(self, phase: str, modules: Iterable[str]) -> float:
        return sum(self.get(phase, m) for m in modules)

    def rows(self) -> List[Tuple[str, str, float]]:
        out = []
        for phase in PHASES:
            for module in MODULES:
                out.append((phase, module, self.get(phase, module)))
        return out


def mlp_flops_per_eval(config) -> int:
    """FLOPs of one token's gated-MLP matmuls at one layer."""
    return 6 * config.hidden_size * config.mlp_size


def _softmax_flops(ctx: int, num_heads: int) -> int:
    return 4 * num_heads * ctx


def flops_model(
    config,
    layout,
    replay_ratio: float = 0.0,
    mask: Optional[AttentionMask] = None,
    tas_active: Optional[bool] = None,
) -> FlopLedger:
    """Closed-form FLOP ledger for one decode run.

    Mirrors exactly what the engine executes: per token and layer, fused QKV
    projection (2*3*d^2) and output projection (2*d^2) under attention-proj;
    score and combine matvecs (2*2*d*ctx) plus softmax under attention-score;
    gated MLP (2*3*d*d_ff) under mlp; vocabulary projection under head for
    every token-producing position. `replay_ratio` is the fraction of
    eligible (token, layer) MLP evaluations skipped. `tas_active` adds the
    masked-runs-only score recovery cost for eligible positions whose aligned
    column the mask hides; it defaults to True whenever replay_ratio > 0.

    Phase convention: positions before `prefill_len` are prefill (including
    the head projection at the last prompt position, which emits the first
    video token); all later positions are decode.
    """
    if not 0.0 <= replay_ratio <= 1.0:
        raise ValueError("replay_ratio must be in [0, 1]")
    if tas_active is None:
        tas_active = replay_ratio > 0
    d = config.hidden_size
    heads = config.num_heads
    layers = config.num_layers
    prefill = layout.prefill_len
    total_positions = prefill + layout.video_len

    counts: Dict[Cell, int] = {(p, m): 0 for p in PHASES for m in MODULES}
    for pos in range(total_positions):
        phase = "prefill" if pos < prefill else "decode"
        ctx = allowed_count(pos, mask) if mask is not None else pos + 1
        counts[(phase, "attention-proj")] += layers * (2 * d * 3 * d + 2 * d * d)
        counts[(phase, "attention-score")] += layers * (
            4 * d * ctx + _softmax_flops(ctx, heads)
        )
        counts[(phase, "mlp")] += layers * mlp_flops_per_eval(config)
        if prefill - 1 <= pos < total_positions - 1:
            counts[(phase, "head")] += 2 * d * config.vocab_size
        if tas_active and mask is not None and pos >= prefill + layout.tokens_per_frame:
            if not mask.contains(pos, pos - layout.tokens_per_frame):
                counts[(phase, "attention-score")] += layers * 2 * d

    eligible = layout.eligible_evals(config.num_layers)
    replayed = int(round(replay_ratio * eligible))
    savings = replayed * mlp_flops_per_eval(config)
    counts[("decode", "mlp")] -= savings
    counts = {k: v for k, v in counts.items() if v}
    return FlopLedger(counts=counts, replay_savings=savings)


def profile(
    config,
    layout,
    policy=None,
    mask: Optional[AttentionMask] = None,
    repetitions: int = 5,
    weights=None,
    prompt=None,
    min_module_time: float = 1e-6,
) -> LatencyReport:
    """Median per-(phase, module) wall times over repeated identical decodes.

    The work is deterministic; only the times vary. If the fastest module is
    too close to the timer resolution to trust, the repetition count is
    doubled once and a warning is emitted.
    """
    from . import model as model_mod

    if repetitions < 3:
        raise ValueError("repetitions must be >= 3")
    if weights is None:
        weights = model_mod.init_weights(config)
    if prompt is None:
        prompt = model_mod.default_prompt(config, layout)

    def run_once() -> Recorder:
        rec = Recorder()
        with rec:
            model_mod.decode(
                config, layout, prompt, policy=policy, mask=mask,
                weights=weights, recorder=rec,
            )
        return rec

    samples: List[Recorder] = [run_once() for _ in range(repetitions)]
    nonzero = [t for rec in samples for t in rec.times.values() if t > 0]
    floor = max(time.get_clock_info("perf_counter").resolution * 1000, min_module_time)
    if nonzero and min(nonzero) < floor:
        import warnings

        warnings.warn(
            "module times close to timer resolution; doubling repetitions",
            stacklevel=2,
        )
        samples.extend(run_once() for _ in range(repetitions))

    # Per phase, report the whole breakdown of the repetition with the median
    # phase total, so module times stay mutually consistent (their sum never
    # exceeds the phase total they were measured inside).
    times: Dict[Cell, float] = {}
    phase_totals: Dict[str, float] = {}
    for phase in PHASES:
        totals = [rec.phase_walls.get(phase, 0.0) for rec in samples]
        median_idx = int(np.argsort(totals)[(len(totals) - 1) // 2])
        rec = samples[median_idx]
        phase_totals[phase] = totals[median_idx]
        for (p, module), t in rec.times.items():
            if p == phase:
                times[(phase, module)] = t
    return LatencyReport(
        times=times,
        phase_totals=phase_totals,
        sequence_length=layout.prefill_len + layout.video_len,
        repetitions=len(samples),
    )
