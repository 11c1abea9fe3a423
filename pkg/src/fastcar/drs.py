"""Discrete simulator of the dynamic dispatch logic for replayed batches.

Hardware model: a 32-bit index register holds one status bit per batch
(0 = replay, 1 = compute); 32 mapping registers, each log2(num_cores) bits
wide, route compute batches to cores. Assignment is round-robin over the
compute batches so surviving work stays balanced no matter which batches
replay. The dispatcher walks the pre-compiled instruction stream, discards
instructions belonging to replayed batches, and appends the rest to the
mapped core's queue.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

REGISTER_WIDTH = 32


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class IndexRegister:
    """Per-batch replay/compute status bits (bit set = compute)."""

    bits: int

    def __post_init__(self):
        if not 0 <= self.bits < (1 << REGISTER_WIDTH):
            raise ConfigError(f"index register must fit in {REGISTER_WIDTH} bits")

    @classmethod
    def from_flags(cls, compute_flags: Sequence[bool]) -> "IndexRegister":
        if len(compute_flags) > REGISTER_WIDTH:
            raise ConfigError(f"at most {REGISTER_WIDTH} batches")
        bits = 0
        for i, flag in enumerate(compute_flags):
            if flag:
                bits |= 1 << i
        return cls(bits)

    @classmethod
    def from_string(cls, s: str) -> "IndexRegister":
        """Parse a bit string, batch 0 first: '1011' means batch 1 replays."""
        return cls.from_flags([c == "1" for c in s.strip()])

    def is_compute(self, batch: int) -> bool:
        return bool((self.bits >> batch) & 1)

    def compute_batches(self) -> List[int]:
        return [b for b in range(REGISTER_WIDTH) if self.is_compute(b)]

    def to_string(self, width: int = REGISTER_WIDTH) -> str:
        return "".join("1" if self.is_compute(b) else "0" for b in range(width))


@dataclass
class MappingRegisters:
    """Target core per batch; entries for replay batches are unused (0)."""

    entries: np.ndarray
    num_cores: int

    def core_for(self, batch: int) -> int:
        return int(self.entries[batch])


def round_robin_assign(idx: IndexRegister, num_cores: int) -> MappingRegisters:
    """Map the k-th compute batch (ascending batch id) to core k mod cores."""
    if num_cores < 1 or num_cores & (num_cores - 1):
        raise ConfigError("num_cores must be a power of two (register width)")
    entries = np.zeros(REGISTER_WIDTH, dtype=np.int64)
    for k, batch in enumerate(idx.compute_batches()):
        entries[batch] = k % num_cores
    return MappingRegisters(entries=entries, num_cores=num_cores)


def static_assign(num_cores: int) -> MappingRegisters:
    """The dense-mode baseline: batch b always executes on core b mod cores."""
    if num_cores < 1 or num_cores & (num_cores - 1):
        raise ConfigError("num_cores must be a power of two (register width)")
    entries = np.arange(REGISTER_WIDTH, dtype=np.int64) % num_cores
    return MappingRegisters(entries=entries, num_cores=num_cores)


@dataclass
class DispatchPlan:
    queues: List[List[int]]       # per-core instruction batch ids, in order
    dispatch_cycles: int
    surviving: int
    discarded: int

    def loads(self) -> List[int]:
        return [len(q) for q in self.queues]


def dispatch(
    instr_stream: Sequence[int],
    idx: IndexRegister,
    mapping: MappingRegisters,
    dispatch_cost_per_instr: int = 1,
) -> DispatchPlan:
    """Route the instruction stream: discard replay batches, queue the rest."""
    queues: List[List[int]] = [[] for _ in range(mapping.num_cores)]
    discarded = 0
    for batch in instr_stream:
        if not 0 <= batch < REGISTER_WIDTH:
            raise ConfigError(f"instruction batch id {batch} out of range")
        if idx.is_compute(batch):
            queues[mapping.core_for(batch)].append(batch)
        else:
            discarded += 1
    surviving = len(instr_stream) - discarded
    return DispatchPlan(
        queues=queues,
        dispatch_cycles=dispatch_cost_per_instr * surviving,
        surviving=surviving,
        discarded=discarded,
    )


@dataclass
class SimulationResult:
    makespan: int
    dispatch_cycles: int
    core_busy: List[int]
    utilization: List[float]


def simulate(
    plan: DispatchPlan,
    exec_cycles_per_instr: int,
    dispatch_cost_per_instr: Optional[int] = None,
) -> SimulationResult:
    """Makespan = dispatch + slowest core; all instructions cost the same."""
    if exec_cycles_per_instr < 1:
        raise ConfigError("exec_cycles_per_instr must be >= 1")
    if dispatch_cost_per_instr is None:
        dispatch_cycles = plan.dispatch_cycles
    else:
        if dispatch_cost_per_instr < 1:
            raise ConfigError("dispatch_cost_per_instr must be >= 1")
        dispatch_cycles = dispatch_cost_per_instr * plan.surviving
    busy = [len(q) * exec_cycles_per_instr for q in plan.queues]
    makespan = dispatch_cycles + (max(busy) if busy else 0)
    util = [b / makespan if makespan else 0.0 for b in busy]
    return SimulationResult(
        makespan=makespan,
        dispatch_cycles=dispatch_cycles,
        core_busy=busy,
        utilization=util,
    )


def uniform_stream(num_batches: int, instructions_per_batch: int = 1) -> List[int]:
    """One round of instructions per batch, repeated in batch order."""
    return [b for _ in range(instructions_per_batch) for b in range(num_batches)]


@dataclass
class StepComparison:
    label: str
    index: IndexRegister
    dynamic: SimulationResult
    static: SimulationResult
    surviving: int
    discarded: int

    @property
    def speedup(self) -> float:
        if self.dynamic.makespan == 0:
            return 1.0
        return self.static.makespan / self.dynamic.makespan


def compare_with_static(
    idx: IndexRegister,
    num_batches: int,
    num_cores: int,
    exec_cycles_per_instr: int = 1000,
    dispatch_cost_per_instr: int = 1,
    instructions_per_batch: int = 1,
    label: str = "",
) -> StepComparison:
    """Simulate one index register under dynamic and static mapping."""
    stream_ids = uniform_stream(num_batches, instructions_per_batch)
    dyn_plan = dispatch(stream_ids, idx, round_robin_assign(idx, num_cores),
                        dispatch_cost_per_instr)
    stat_plan = dispatch(stream_ids, idx, static_assign(num_cores),
                         dispatch_cost_per_instr)
    return StepComparison(
        label=label,
        index=idx,
        dynamic=simulate(dyn_plan, exec_cycles_per_instr),
        static=simulate(stat_plan, exec_cycles_per_instr),
        surviving=dyn_plan.surviving,
        discarded=dyn_plan.discarded,
    )


# ---------------------------------------------------------------------------
# Scenario files and decode-run bridging
# ---------------------------------------------------------------------------


@dataclass
class Scenario:
    num_cores: int
    exec_cycles_per_instr: int
    dispatch_cost_per_instr: int
    num_batches: int
    instructions_per_batch: int
    registers: List[IndexRegister]
    labels: List[str]


def load_scenario(path) -> Scenario:
    with open(Path(path), "r", encoding="utf-8") as fh:
        raw = json.load(fh)
    regs = []
    for entry in raw["index_registers"]:
        if isinstance(entry, str):
            regs.append(IndexRegister.from_string(entry))
        else:
            regs.append(IndexRegister(int(entry)))
    num_batches = int(raw.get("num_batches", REGISTER_WIDTH))
    labels = [str(raw.get("labels", [])[i]) if i < len(raw.get("labels", [])) else str(i)
              for i in range(len(regs))]
    return Scenario(
        num_cores=int(raw["num_cores"]),
        exec_cycles_per_instr=int(raw.get("exec_cycles_per_instr", 1000)),
        dispatch_cost_per_instr=int(raw.get("dispatch_cost_per_instr", 1)),
        num_batches=num_batches,
        instructions_per_batch=int(raw.get("instructions_per_batch", 1)),
        registers=regs,
        labels=labels,
    )


def save_scenario(scenario: Scenario, path) -> None:
    raw = {
        "num_cores": scenario.num_cores,
        "exec_cycles_per_instr": scenario.exec_cycles_per_instr,
        "dispatch_cost_per_instr": scenario.dispatch_cost_per_instr,
        "num_batches": scenario.num_batches,
        "instructions_per_batch": scenario.instructions_per_batch,
        "index_registers": [r.to_string(scenario.num_batches) for r in scenario.registers],
        "labels": scenario.labels,
    }
    with open(Path(path), "w", encoding="utf-8") as fh:
        json.dump(raw, fh, indent=2, sort_keys=True)
        fh.write("\n")


def registers_from_replay_flags(
    flag_sets: Sequence[np.ndarray],
    replay_threshold: float = 1.0,
) -> List[IndexRegister]:
    """Aggregate per-run replay flags into per-(step, layer) index registers.

    Each element of `flag_sets` is one batch's (layers, steps) boolean replay
    matrix from a decode run. A batch counts as replaying a (step, layer)
    when the fraction of its tokens replayed reaches `replay_threshold`;
    with token-level runs each entry is a single token, so the default
    threshold 1.0 means "replay iff that token replayed".
    """
    if not flag_sets:
        return []
    if len(flag_sets) > REGISTER_WIDTH:
        raise ConfigError(f"at most {REGISTER_WIDTH} batches")
    layers, steps = flag_sets[0].shape
    regs = []
    for layer in range(layers):
        for step in range(steps):
            compute = [
                float(flags[layer, step]) < replay_threshold for flags in flag_sets
            ]
            regs.append(IndexRegister.from_flags(compute))
    return regs
