import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fastcar.drs import (
    REGISTER_WIDTH,
    ConfigError,
    IndexRegister,
    compare_with_static,
    dispatch,
    load_scenario,
    registers_from_replay_flags,
    round_robin_assign,
    save_scenario,
    Scenario,
    simulate,
    static_assign,
    uniform_stream,
)


def reference_dispatch(stream, idx, mapping, num_cores):
    """Straightforward dict-based enumerator used as the oracle."""
    queues = {c: [] for c in range(num_cores)}
    kept = 0
    for batch in stream:
        if idx.is_compute(batch):
            queues[mapping.core_for(batch)].append(batch)
            kept += 1
    return queues, kept


class TestIndexRegister:
    def test_bit_semantics(self):
        idx = IndexRegister.from_string("10110010")
        assert idx.is_compute(0)
        assert not idx.is_compute(1)
        assert idx.compute_batches()[:4] == [0, 2, 3, 6]

    def test_width_enforced(self):
        with pytest.raises(ConfigError):
            IndexRegister(1 << REGISTER_WIDTH)
        with pytest.raises(ConfigError):
            IndexRegister.from_flags([True] * (REGISTER_WIDTH + 1))

    def test_round_trip_string(self):
        idx = IndexRegister.from_string("0110")
        assert idx.to_string(4) == "0110"


class TestRoundRobin:
    def test_all_compute_uniform(self):
        idx = IndexRegister((1 << 32) - 1)
        mapping = round_robin_assign(idx, 4)
        loads = np.bincount(mapping.entries, minlength=4)
        assert list(loads) == [8, 8, 8, 8]

    def test_hand_example(self):
        idx = IndexRegister.from_flags([True] * 5)
        mapping = round_robin_assign(idx, 4)
        plan = dispatch(uniform_stream(5), idx, mapping)
        assert plan.loads() == [2, 1, 1, 1]

    def test_all_replay_empty(self):
        idx = IndexRegister(0)
        mapping = round_robin_assign(idx, 4)
        plan = dispatch(uniform_stream(8), idx, mapping)
        assert plan.loads() == [0, 0, 0, 0]
        assert plan.dispatch_cycles == 0

    def test_power_of_two_required(self):
        with pytest.raises(ConfigError):
            round_robin_assign(IndexRegister(1), 3)

    @settings(max_examples=200, deadline=None)
    @given(st.integers(0, 2**16 - 1), st.sampled_from([1, 2, 4, 8]))
    def test_balance_property(self, bits, cores):
        idx = IndexRegister(bits)
        plan = dispatch(uniform_stream(16), idx, round_robin_assign(idx, cores))
        loads = plan.loads()
        assert max(loads) - min(loads) <= 1
        assert sum(loads) == bin(bits).count("1")


class TestDispatch:
    def test_matches_reference_enumerator(self):
        idx = IndexRegister.from_string("10110010")
        mapping = round_robin_assign(idx, 4)
        stream = uniform_stream(8, instructions_per_batch=3)
        plan = dispatch(stream, idx, mapping)
        ref_queues, kept = reference_dispatch(stream, idx, mapping, 4)
        assert plan.queues == [ref_queues[c] for c in range(4)]
        assert plan.surviving == kept

    def test_replay_instructions_nowhere(self):
        idx = IndexRegister.from_string("0101")
        plan = dispatch(uniform_stream(4), idx, round_robin_assign(idx, 2))
        queued = [b for q in plan.queues for b in q]
        assert set(queued) == {1, 3}
        assert plan.discarded == 2

    def test_stream_order_preserved(self):
        idx = IndexRegister.from_flags([True] * 4)
        mapping = round_robin_assign(idx, 1)
        stream = [3, 1, 2, 0, 1]
        plan = dispatch(stream, idx, mapping)
        assert plan.queues[0] == stream

    def test_batch_id_validated(self):
        idx = IndexRegister(1)
        with pytest.raises(ConfigError):
            dispatch([32], idx, round_robin_assign(idx, 2))

    def test_conservation_invariant(self):
        for bits in range(256):
            idx = IndexRegister(bits)
            plan = dispatch(uniform_stream(8), idx, round_robin_assign(idx, 4))
            assert plan.surviving == bin(bits).count("1")


class TestSimulate:
    def test_single_core_serializes(self):
        idx = IndexRegister.from_flags([True] * 6)
        plan = dispatch(uniform_stream(6), idx, round_robin_assign(idx, 1))
        result = simulate(plan, exec_cycles_per_instr=10, dispatch_cost_per_instr=2)
        assert result.makespan == 6 * 2 + 6 * 10

    def test_drs_dominates_static_exhaustively(self):
        # All 2^8 replay patterns, 8 batches, 4 cores, unit costs.
        for bits in range(256):
            cmp = compare_with_static(IndexRegister(bits), num_batches=8,
                                      num_cores=4, exec_cycles_per_instr=1,
                                      dispatch_cost_per_instr=1)
            assert cmp.dynamic.makespan <= cmp.static.makespan

    def test_dispatch_overhead_negligible_at_scale(self):
        # exec:dispatch = 1000:1 with >= 8 surviving instructions.
        for bits in (0xFF, 0xF0F0 & 0xFF | 0xFF00, (1 << 12) - 1):
            idx = IndexRegister(bits)
            n = max(idx.compute_batches()) + 1
            plan = dispatch(uniform_stream(max(n, 8)), idx,
                            round_robin_assign(idx, 1))
            if plan.surviving < 8:
                continue
            result = simulate(plan, exec_cycles_per_instr=1000,
                              dispatch_cost_per_instr=1)
            assert result.dispatch_cycles / result.makespan < 0.01

    def test_utilization_bounds(self):
        idx = IndexRegister.from_string("1111")
        plan = dispatch(uniform_stream(4), idx, round_robin_assign(idx, 2))
        result = simulate(plan, exec_cycles_per_instr=100, dispatch_cost_per_instr=1)
        assert all(0 <= u <= 1 for u in result.utilization)
        busy_share = max(result.core_busy) / result.makespan
        assert max(result.utilization) == busy_share

    def test_cost_validation(self):
        idx = IndexRegister(1)
        plan = dispatch([0], idx, round_robin_assign(idx, 1))
        with pytest.raises(ConfigError):
            simulate(plan, exec_cycles_per_instr=0)


class TestScenarioIO:
    def test_round_trip(self, tmp_path):
        scenario = Scenario(
            num_cores=4,
            exec_cycles_per_instr=1000,
            dispatch_cost_per_instr=1,
            num_batches=8,
            instructions_per_batch=2,
            registers=[IndexRegister.from_string("10110010"), IndexRegister(0)],
            labels=["step0", "step1"],
        )
        path = tmp_path / "scenario.json"
        save_scenario(scenario, path)
        loaded = load_scenario(path)
        assert loaded.num_cores == scenario.num_cores
        assert [r.bits for r in loaded.registers] == [r.bits for r in scenario.registers]
        assert loaded.labels == scenario.labels


class TestReplayBridge:
    def test_flags_to_registers(self):
        # two batches (runs), 2 layers x 3 steps
        a = np.array([[True, False, True], [False, False, True]])
        b = np.array([[False, False, True], [True, True, False]])
        regs = registers_from_replay_flags([a, b])
        assert len(regs) == 6
        # (layer0, step0): batch a replays, batch b computes
        assert regs[0].to_string(2) == "01"
        # (layer0, step2): both replay
        assert regs[2].to_string(2) == "00"
        # (layer1, step2): a computes... a[1,2]=True -> replays; b computes
        assert regs[5].to_string(2) == "01"

    def test_threshold_semantics(self):
        flags = [np.array([[True]]), np.array([[False]])]
        strict = registers_from_replay_flags(flags, replay_threshold=1.0)
        assert strict[0].to_string(2) == "01"
        lenient = registers_from_replay_flags(flags, replay_threshold=0.5)
        assert lenient[0].to_string(2) == "01"
