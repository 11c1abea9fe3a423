"""Report emission and re-parsing.

Every file the CLI writes can be re-read by the matching parser into the
same in-memory values: floats are serialized with `repr` (shortest
round-trip form), ints stay ints, and writes go through a temp file plus
rename so readers never observe partial output. No timestamps anywhere;
identical runs must produce byte-identical files.
"""

from __future__ import annotations

import csv
import io as _io
import json
import os
from pathlib import Path
from typing import Any, Dict, Iterable, List, Sequence, Tuple


def _format(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> None:
    buf = _io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_format(v) for v in row])
    atomic_write_text(path, buf.getvalue())


def read_csv(path, types: Sequence[type]) -> List[Tuple]:
    """Read back a CSV written by `write_csv`, applying the column types."""

    def convert(tp, raw):
        if tp is bool:
            return raw == "true"
        return tp(raw)

    out = []
    with open(Path(path), "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        next(reader)  # header
        for row in reader:
            out.append(tuple(convert(tp, raw) for tp, raw in zip(types, row)))
    return out


def write_json(path, payload: Dict[str, Any]) -> None:
    atomic_write_text(path, json.dumps(payload, indent=2, sort_keys=True) + "\n")


def read_json(path) -> Dict[str, Any]:
    with open(Path(path), "r", encoding="utf-8") as fh:
        return json.load(fh)


# ---------------------------------------------------------------------------
# Typed report writers / parsers
# ---------------------------------------------------------------------------

TRACE_HEADER = ("seq_pos", "frame", "slot", "token")
TAS_HEADER = ("layer", "frame", "slot", "head", "score", "mean", "replayed")
REPLAY_STATS_HEADER = ("layer", "eligible", "replayed", "ratio")
FLOPS_HEADER = ("phase", "module", "flops")
LATENCY_HEADER = ("phase", "module", "seconds")
DRS_HEADER = (
    "label", "index_bits", "surviving", "discarded",
    "makespan_dynamic", "makespan_static", "speedup",
    "min_utilization", "max_utilization",
)


def write_trace(path, layout, trace) -> None:
    rows = []
    for vpos, token in enumerate(trace.tokens):
        pos = layout.prefill_len + vpos
        frame, slot = layout.frame_and_slot(pos)
        rows.append((pos, frame, slot, int(token)))
    write_csv(path, TRACE_HEADER, rows)


def read_trace(path) -> List[Tuple[int, int, int, int]]:
    return read_csv(path, (int, int, int, int))


def write_tas(path, layout, trace) -> None:
    rows = []
    for rec in trace.tas_records:
        vpos = (rec.frame - 1) * layout.tokens_per_frame + rec.slot
        replayed = bool(trace.replay_flags[rec.layer, vpos])
        for head, score in enumerate(rec.per_head):
            rows.append((rec.layer, rec.frame, rec.slot, head,
                         float(score), rec.mean, replayed))
    write_csv(path, TAS_HEADER, rows)


def read_tas(path) -> List[Tuple[int, int, int, int, float, float, bool]]:
    return read_csv(path, (int, int, int, int, float, float, bool))


def write_replay_stats(path, stats) -> None:
    write_csv(path, REPLAY_STATS_HEADER, stats.rows())


def read_replay_stats(path) -> List[Tuple[int, int, int, float]]:
    return read_csv(path, (int, int, int, float))


def write_flops(path, ledger) -> None:
    write_csv(path, FLOPS_HEADER, ledger.rows())


def read_flops(path) -> List[Tuple[str, str, int]]:
    return read_csv(path, (str, str, int))


def write_latency(path, report) -> None:
    rows = list(report.rows())
    for phase, total in sorted(report.phase_totals.items()):
        rows.append((phase, "_total", total))
    write_csv(path, LATENCY_HEADER, rows)


def read_latency(path) -> List[Tuple[str, str, float]]:
    return read_csv(path, (str, str, float))
