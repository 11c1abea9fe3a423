import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fastcar.accounting import Recorder, flops_model
from fastcar.model import FrameLayout, ModelConfig, decode, default_prompt, init_weights
from fastcar.replay import ReplayPolicy
from fastcar.sparse import AttentionMask, allowed_count, allowed_positions

SMALL = ModelConfig(hidden_size=16, mlp_size=24, num_heads=2, num_layers=3,
                    vocab_size=64, seed=7)
SMALL_LAYOUT = FrameLayout(num_frames=4, tokens_per_frame=4, prefill_len=5)


class TestAllowedPositions:
    def test_self_only(self):
        mask = AttentionMask(sink_size=0, local_size=1)
        assert list(allowed_positions(7, mask)) == [7]

    def test_inside_sink_full_prefix(self):
        mask = AttentionMask(sink_size=10, local_size=2)
        assert list(allowed_positions(6, mask)) == list(range(7))

    def test_hand_enumeration(self):
        mask = AttentionMask(sink_size=4, local_size=3)
        assert list(allowed_positions(10, mask)) == [0, 1, 2, 3, 8, 9, 10]

    def test_validation(self):
        with pytest.raises(ValueError):
            AttentionMask(sink_size=-1, local_size=4)
        with pytest.raises(ValueError):
            AttentionMask(sink_size=0, local_size=0)

    @settings(max_examples=200, deadline=None)
    @given(st.integers(0, 200), st.integers(0, 30), st.integers(1, 30))
    def test_invariants(self, j, sink, local):
        mask = AttentionMask(sink_size=sink, local_size=local)
        allowed = allowed_positions(j, mask)
        assert allowed[0] >= 0 and allowed[-1] <= j
        assert j in allowed
        assert len(allowed) == allowed_count(j, mask)
        assert np.all(np.diff(allowed) > 0)
        for p in allowed:
            assert mask.contains(j, int(p))
        for p in set(range(j + 1)) - set(int(a) for a in allowed):
            assert not mask.contains(j, p)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 100), st.integers(0, 20), st.integers(1, 20))
    def test_covers_all_agrees(self, j, sink, local):
        mask = AttentionMask(sink_size=sink, local_size=local)
        assert mask.covers_all(j) == (len(allowed_positions(j, mask)) == j + 1)


class TestMaskedDecode:
    def test_window_covering_everything_is_dense(self):
        prompt = default_prompt(SMALL, SMALL_LAYOUT)
        mask = AttentionMask(sink_size=0, local_size=SMALL_LAYOUT.total_len + 1)
        dense = decode(SMALL, SMALL_LAYOUT, prompt, collect_logits=True)
        masked = decode(SMALL, SMALL_LAYOUT, prompt, mask=mask, collect_logits=True)
        assert np.array_equal(dense.tokens, masked.tokens)
        assert np.array_equal(dense.logits, masked.logits)

    def test_sink_covering_everything_is_dense(self):
        prompt = default_prompt(SMALL, SMALL_LAYOUT)
        mask = AttentionMask(sink_size=SMALL_LAYOUT.total_len, local_size=1)
        dense = decode(SMALL, SMALL_LAYOUT, prompt, collect_logits=True)
        masked = decode(SMALL, SMALL_LAYOUT, prompt, mask=mask, collect_logits=True)
        assert np.array_equal(dense.logits, masked.logits)

    def test_narrow_mask_changes_decode(self):
        prompt = default_prompt(SMALL, SMALL_LAYOUT)
        mask = AttentionMask(sink_size=2, local_size=2)
        dense = decode(SMALL, SMALL_LAYOUT, prompt, collect_logits=True)
        masked = decode(SMALL, SMALL_LAYOUT, prompt, mask=mask, collect_logits=True)
        assert not np.array_equal(dense.logits, masked.logits)

    def test_sink_keeps_first_frame_visible(self):
        # Sink sized prefill + one frame: frame-1 keys stay visible forever.
        lay = SMALL_LAYOUT
        mask = AttentionMask(sink_size=lay.prefill_len + lay.tokens_per_frame,
                             local_size=2)
        last = lay.total_len - 1
        allowed = set(int(a) for a in allowed_positions(last, mask))
        first_frame = set(range(lay.prefill_len, lay.prefill_len + lay.tokens_per_frame))
        assert first_frame <= allowed

    def test_replay_composes_with_mask(self):
        # Replay decisions follow the same score rule under masking; gating at
        # -inf replays every eligible position, +inf reproduces the masked
        # dense run bitwise.
        prompt = default_prompt(SMALL, SMALL_LAYOUT)
        lay = SMALL_LAYOUT
        mask = AttentionMask(sink_size=lay.prefill_len + lay.tokens_per_frame,
                             local_size=lay.tokens_per_frame)
        masked_dense = decode(SMALL, lay, prompt, mask=mask, collect_logits=True)
        gated = decode(SMALL, lay, prompt, mask=mask,
                       policy=ReplayPolicy(threshold=math.inf), collect_logits=True)
        assert np.array_equal(masked_dense.logits, gated.logits)
        everything = decode(SMALL, lay, prompt, mask=mask,
                            policy=ReplayPolicy(threshold=-math.inf))
        assert everything.replay_stats.ratio() == 1.0

    def test_hidden_aligned_column_recovers_score(self):
        # local window too small to see one frame back and sink below the
        # video region: scores must come from the retained key cache and agree
        # with the dense run's scores at identical token prefixes.
        prompt = default_prompt(SMALL, SMALL_LAYOUT)
        lay = SMALL_LAYOUT
        mask = AttentionMask(sink_size=lay.prefill_len, local_size=2)
        aligned_hidden = [
            pos for pos in range(lay.prefill_len + lay.tokens_per_frame, lay.total_len)
            if not mask.contains(pos, pos - lay.tokens_per_frame)
        ]
        assert aligned_hidden, "fixture must exercise the recompute path"
        trace = decode(SMALL, lay, prompt, mask=mask, policy=ReplayPolicy(threshold=math.inf))
        assert len(trace.tas_records) == lay.eligible_evals(SMALL.num_layers)
        assert all(np.isfinite(r.mean) for r in trace.tas_records)

    def test_masked_attention_score_flops_not_higher(self):
        prompt = default_prompt(SMALL, SMALL_LAYOUT)
        lay = SMALL_LAYOUT
        mask = AttentionMask(sink_size=lay.prefill_len + lay.tokens_per_frame,
                             local_size=lay.tokens_per_frame)
        rec_dense, rec_masked = Recorder(), Recorder()
        with rec_dense:
            decode(SMALL, lay, prompt, recorder=rec_dense)
        with rec_masked:
            decode(SMALL, lay, prompt, mask=mask, recorder=rec_masked)
        dense_scores = rec_dense.ledger().module_total("attention-score")
        masked_scores = rec_masked.ledger().module_total("attention-score")
        assert masked_scores <= dense_scores

    def test_full_coverage_mask_equal_ledger(self):
        prompt = default_prompt(SMALL, SMALL_LAYOUT)
        mask = AttentionMask(sink_size=SMALL_LAYOUT.total_len, local_size=1)
        rec_dense, rec_masked = Recorder(), Recorder()
        with rec_dense:
            decode(SMALL, SMALL_LAYOUT, prompt, recorder=rec_dense)
        with rec_masked:
            decode(SMALL, SMALL_LAYOUT, prompt, mask=mask, recorder=rec_masked)
        assert rec_dense.ledger() == rec_masked.ledger()
