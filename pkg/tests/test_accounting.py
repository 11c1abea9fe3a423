import math

import numpy as np
import pytest

from fastcar.accounting import (
    LatencyReport,
    Recorder,
    flops_model,
    mlp_flops_per_eval,
    profile,
)
from fastcar.model import FrameLayout, ModelConfig, decode, default_prompt, init_weights
from fastcar.replay import ReplayPolicy
from fastcar.sparse import AttentionMask

SMALL = ModelConfig(hidden_size=16, mlp_size=24, num_heads=2, num_layers=3,
                    vocab_size=64, seed=7)
SMALL_LAYOUT = FrameLayout(num_frames=4, tokens_per_frame=4, prefill_len=5)


def instrumented_ledger(config, layout, policy=None, mask=None, prompt=None, weights=None):
    rec = Recorder()
    prompt = default_prompt(config, layout) if prompt is None else prompt
    with rec:
        trace = decode(config, layout, prompt, policy=policy, mask=mask,
                       recorder=rec, weights=weights)
    replayed = int(trace.replay_stats.replayed.sum())
    return rec.ledger(replayed, mlp_flops_per_eval(config)), trace


class TestAnalyticVsInstrumented:
    def test_dense_exact(self):
        measured, _ = instrumented_ledger(SMALL, SMALL_LAYOUT)
        predicted = flops_model(SMALL, SMALL_LAYOUT)
        assert predicted == measured

    def test_gated_run_exact(self):
        measured, trace = instrumented_ledger(SMALL, SMALL_LAYOUT,
                                              policy=ReplayPolicy(threshold=0.0))
        ratio = trace.replay_stats.ratio()
        assert 0 < ratio < 1
        predicted = flops_model(SMALL, SMALL_LAYOUT, replay_ratio=ratio)
        assert predicted == measured

    def test_masked_run_exact(self):
        lay = SMALL_LAYOUT
        mask = AttentionMask(sink_size=lay.prefill_len + lay.tokens_per_frame,
                             local_size=lay.tokens_per_frame)
        measured, _ = instrumented_ledger(SMALL, lay, mask=mask)
        predicted = flops_model(SMALL, lay, mask=mask)
        assert predicted == measured

    def test_masked_gated_run_exact_including_score_recovery(self):
        # local window of 2 hides the aligned column: the per-head recovery
        # dots must be counted on both routes.
        lay = SMALL_LAYOUT
        mask = AttentionMask(sink_size=lay.prefill_len, local_size=2)
        policy = ReplayPolicy(threshold=0.0)
        measured, trace = instrumented_ledger(SMALL, lay, policy=policy, mask=mask)
        predicted = flops_model(SMALL, lay, replay_ratio=trace.replay_stats.ratio(),
                                mask=mask)
        assert predicted == measured

    def test_toy_config_exact(self):
        toy, lay = ModelConfig(), FrameLayout()
        measured, _ = instrumented_ledger(toy, lay)
        assert flops_model(toy, lay) == measured


class TestLedgerLinearity:
    def test_zero_vs_full_replay_differ_by_mlp_term(self):
        full = flops_model(SMALL, SMALL_LAYOUT, replay_ratio=0.0)
        none = flops_model(SMALL, SMALL_LAYOUT, replay_ratio=1.0)
        eligible = SMALL_LAYOUT.eligible_evals(SMALL.num_layers)
        expected = eligible * 2 * 3 * SMALL.hidden_size * SMALL.mlp_size
        assert full.total() - none.total() == expected
        assert none.replay_savings == expected

    def test_exact_linearity_along_ratio(self):
        eligible = SMALL_LAYOUT.eligible_evals(SMALL.num_layers)
        base = flops_model(SMALL, SMALL_LAYOUT).total()
        for replayed in (0, 1, eligible // 2, eligible):
            ledger = flops_model(SMALL, SMALL_LAYOUT, replay_ratio=replayed / eligible)
            assert base - ledger.total() == replayed * mlp_flops_per_eval(SMALL)

    def test_ratio_validated(self):
        with pytest.raises(ValueError):
            flops_model(SMALL, SMALL_LAYOUT, replay_ratio=1.5)


class TestMaskLedger:
    def test_masked_never_exceeds_dense(self):
        lay = SMALL_LAYOUT
        dense = flops_model(SMALL, lay)
        for sink, local in [(0, 1), (2, 3), (lay.prefill_len, lay.tokens_per_frame)]:
            masked = flops_model(SMALL, lay, mask=AttentionMask(sink, local))
            assert masked.module_total("attention-score") <= dense.module_total("attention-score")
            assert masked.total() <= dense.total()

    def test_full_coverage_equality(self):
        mask = AttentionMask(sink_size=SMALL_LAYOUT.total_len, local_size=1)
        assert flops_model(SMALL, SMALL_LAYOUT, mask=mask) == flops_model(SMALL, SMALL_LAYOUT)


class TestLargeDimsSanity:
    def test_marginal_replay_saving_matches_published_arithmetic(self):
        # 7B-class dims: d=4096, d_ff=11008, 32 layers, 8 frames of 256 tokens.
        big = ModelConfig(hidden_size=4096, mlp_size=11008, num_heads=32,
                          num_layers=32, vocab_size=16384)
        lay = FrameLayout(num_frames=8, tokens_per_frame=256, prefill_len=256)
        per_eval = mlp_flops_per_eval(big)
        eligible = lay.eligible_evals(big.num_layers)
        predicted_per_10pct = 0.1 * eligible * per_eval / 1e12
        # Published totals drop from 30.09 TFLOPs at 10% replay to 19.42 at
        # 80%: about 1.455-1.524 TFLOPs per 10-point step.
        endpoint_slope = (30.09 - 19.42) / 7
        assert abs(predicted_per_10pct - endpoint_slope) / endpoint_slope <= 0.10
        assert abs(predicted_per_10pct - 1.455) / 1.455 <= 0.10

    def test_analytic_model_is_linear_at_large_dims(self):
        big = ModelConfig(hidden_size=4096, mlp_size=11008, num_heads=32,
                          num_layers=32, vocab_size=16384)
        lay = FrameLayout(num_frames=8, tokens_per_frame=256, prefill_len=256)
        l0 = flops_model(big, lay, replay_ratio=0.0).total()
        l8 = flops_model(big, lay, replay_ratio=0.8).total()
        eligible = lay.eligible_evals(big.num_layers)
        assert l0 - l8 == int(round(0.8 * eligible)) * mlp_flops_per_eval(big)


class TestProfile:
    def test_report_shape_and_totals(self):
        report = profile(SMALL, SMALL_LAYOUT, repetitions=3)
        assert report.repetitions >= 3
        assert report.sequence_length == SMALL_LAYOUT.total_len
        decode_time = sum(report.get("decode", m) for m in
                          ("attention-proj", "attention-score", "mlp", "head", "norm"))
        assert decode_time <= report.phase_totals["decode"] + 1e-9

    def test_repetitions_validated(self):
        with pytest.raises(ValueError):
            profile(SMALL, SMALL_LAYOUT, repetitions=2)

    def test_decode_dominates_prefill(self):
        report = profile(SMALL, SMALL_LAYOUT, repetitions=3)
        assert report.phase_totals["decode"] > report.phase_totals["prefill"]
