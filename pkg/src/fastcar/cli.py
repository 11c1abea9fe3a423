"""Command-line harness: deterministic runs, calibration, verification,
profiling, dispatch simulation, and threshold ablation, all emitting CSV/JSON
reports that re-parse to identical values.

Subcommands: generate, calibrate, verify, profile, drs, ablate.
Configuration comes from an optional JSON file plus flag overrides; all
randomness derives from the single model seed through named streams, so a
given config always produces byte-identical outputs.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np

from . import __version__, io as report_io
from .accounting import Recorder, flops_model, mlp_flops_per_eval, profile
from .drs import (
    IndexRegister,
    Scenario,
    compare_with_static,
    load_scenario,
    registers_from_replay_flags,
    save_scenario,
)
from .model import (
    FrameLayout,
    ModelConfig,
    decode,
    default_prompt,
    init_weights,
    teacher_forced_forward,
)
from .replay import ReplayPolicy, calibrate_threshold
from .rng import stream
from .sparse import AttentionMask
from .theory import (
    check_unit_cosine_law,
    fit_composite,
    mixed_frames_tokens,
    sampled_lipschitz_violations,
    small_gap_weights,
    tas_similarity_correlation,
    verify_theorem2,
)

OUT_ROOT_ENV = "FASTCAR_OUT_ROOT"


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    layout: FrameLayout = field(default_factory=FrameLayout)
    threshold: Optional[float] = None
    thresholds: Optional[List[float]] = None   # per-layer (inconsistent mode)
    target_ratio: Optional[float] = None
    mode: str = "consistent"
    sink_size: Optional[int] = None
    local_size: Optional[int] = None

    def validate(self) -> None:
        set_thresholds = self.threshold is not None or self.thresholds is not None
        if set_thresholds and self.target_ratio is not None:
            raise ConfigError("set either a threshold or a target ratio, not both")
        if self.threshold is not None and self.thresholds is not None:
            raise ConfigError("scalar and per-layer thresholds are mutually exclusive")
        if (self.sink_size is None) != (self.local_size is None):
            raise ConfigError("mask needs both sink_size and local_size")
        if self.mode not in ("consistent", "inconsistent"):
            raise ConfigError(f"unknown mode {self.mode!r}")

    # -- pieces ------------------------------------------------------------

    def mask(self) -> Optional[AttentionMask]:
        if self.sink_size is None:
            return None
        return AttentionMask(sink_size=self.sink_size, local_size=self.local_size)

    def policy(self) -> Optional[ReplayPolicy]:
        if self.thresholds is not None:
            return ReplayPolicy(mode="inconsistent", threshold=tuple(self.thresholds))
        if self.threshold is not None:
            if self.mode == "inconsistent":
                return ReplayPolicy(
                    mode="inconsistent",
                    threshold=(self.threshold,) * self.model.num_layers,
                )
            return ReplayPolicy(threshold=self.threshold)
        return None

    # -- serialization -------------------------------------------------------

    def to_dict(self) -> Dict[str, Any]:
        def encode(v):
            if isinstance(v, float) and math.isinf(v):
                return "inf" if v > 0 else "-inf"
            return v

        d: Dict[str, Any] = {
            "model": {
                "hidden_size": self.model.hidden_size,
                "mlp_size": self.model.mlp_size,
                "num_heads": self.model.num_heads,
                "num_layers": self.model.num_layers,
                "vocab_size": self.model.vocab_size,
                "seed": self.model.seed,
                "positional_encoding": self.model.positional_encoding,
            },
            "layout": {
                "num_frames": self.layout.num_frames,
                "tokens_per_frame": self.layout.tokens_per_frame,
                "prefill_len": self.layout.prefill_len,
            },
            "mode": self.mode,
        }
        if self.threshold is not None:
            d["threshold"] = encode(self.threshold)
        if self.thresholds is not None:
            d["thresholds"] = [encode(t) for t in self.thresholds]
        if self.target_ratio is not None:
            d["target_ratio"] = self.target_ratio
        if self.sink_size is not None:
            d["mask"] = {"sink_size": self.sink_size, "local_size": self.local_size}
        return d

    @classmethod
    def from_dict(cls, raw: Dict[str, Any]) -> "RunConfig":
        def decode_num(v):
            if v == "inf":
                return math.inf
            if v == "-inf":
                return -math.inf
            return float(v)

        cfg = cls()
        if "model" in raw:
            cfg.model = ModelConfig(**raw["model"])
        if "layout" in raw:
            cfg.layout = FrameLayout(**raw["layout"])
        if "threshold" in raw:
            cfg.threshold = decode_num(raw["threshold"])
        if "thresholds" in raw:
            cfg.thresholds = [decode_num(t) for t in raw["thresholds"]]
        if "target_ratio" in raw:
            cfg.target_ratio = float(raw["target_ratio"])
        cfg.mode = raw.get("mode", "consistent")
        if "mask" in raw and raw["mask"] is not None:
            cfg.sink_size = int(raw["mask"]["sink_size"])
            cfg.local_size = int(raw["mask"]["local_size"])
        cfg.validate()
        return cfg

    def config_hash(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]


def _manifest(cfg: RunConfig, command: str) -> Dict[str, Any]:
    import numba
    import scipy

    return {
        "command": command,
        "config": cfg.to_dict(),
        "config_hash": cfg.config_hash(),
        "versions": {
            "fastcar": __version__,
            "numpy": np.__version__,
            "numba": numba.__version__,
            "scipy": scipy.__version__,
        },
    }


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_generate(cfg: RunConfig, out: Path) -> int:
    policy = cfg.policy()
    mask = cfg.mask()
    if cfg.target_ratio is not None:
        prompt = default_prompt(cfg.model, cfg.layout)
        result = calibrate_threshold(
            cfg.model, cfg.layout, prompt, cfg.target_ratio, mode=cfg.mode, mask=mask
        )
        policy = result.policy

    prompt = default_prompt(cfg.model, cfg.layout)
    rec = Recorder()
    with rec:
        trace = decode(cfg.model, cfg.layout, prompt, policy=policy, mask=mask,
                       recorder=rec)
    replayed = int(trace.replay_stats.replayed.sum())
    measured = rec.ledger(replayed, mlp_flops_per_eval(cfg.model))
    ratio = trace.replay_stats.ratio()
    analytic = flops_model(
        cfg.model, cfg.layout, replay_ratio=ratio, mask=mask,
        tas_active=policy is not None,
    )

    report_io.write_trace(out / "trace.csv", cfg.layout, trace)
    report_io.write_replay_stats(out / "replay_stats.csv", trace.replay_stats)
    if policy is not None:
        report_io.write_tas(out / "tas.csv", cfg.layout, trace)
    report_io.write_flops(out / "flops.csv", measured)
    report_io.write_json(out / "summary.json", {
        "replay_ratio": ratio,
        "replayed_evals": replayed,
        "eligible_evals": int(trace.replay_stats.eligible.sum()),
        "replay_savings_flops": measured.replay_savings,
        "total_flops": measured.total(),
        "analytic_total_flops": analytic.total(),
        "ledger_matches_analytic": analytic == measured,
    })
    report_io.write_json(out / "manifest.json", _manifest(cfg, "generate"))
    return 0


def cmd_calibrate(cfg: RunConfig, out: Path, floor: Optional[float]) -> int:
    if cfg.target_ratio is None:
        raise ConfigError("calibrate needs --target-ratio")
    prompt = default_prompt(cfg.model, cfg.layout)
    result = calibrate_threshold(
        cfg.model, cfg.layout, prompt, cfg.target_ratio,
        mode=cfg.mode, mask=cfg.mask(), threshold_floor=floor,
    )
    policy = result.policy
    payload = {
        "mode": policy.mode,
        "target_ratio": result.target_ratio,
        "achieved_ratio": result.achieved_ratio,
        "saturated": result.saturated,
        "trials": result.trials,
    }
    if policy.mode == "consistent":
        payload["threshold"] = policy.threshold
    else:
        payload["thresholds"] = list(policy.threshold)
    report_io.write_json(out / "policy.json", payload)
    report_io.write_json(out / "manifest.json", _manifest(cfg, "calibrate"))
    return 0


def cmd_profile(cfg: RunConfig, out: Path, repetitions: int) -> int:
    report = profile(cfg.model, cfg.layout, policy=cfg.policy(), mask=cfg.mask(),
                     repetitions=repetitions)
    report_io.write_latency(out / "latency.csv", report)
    report_io.write_json(out / "manifest.json", _manifest(cfg, "profile"))
    return 0


def cmd_verify(cfg: RunConfig, out: Path, runs: int, lipschitz_pairs: int) -> int:
    checks: List[Dict[str, Any]] = []
    model_cfg, layout = cfg.model, cfg.layout
    weights = init_weights(model_cfg)

    # Unit cosine law on seeded pairs across dimensions.
    rng = stream(model_cfg.seed, "verify-cosine")
    worst = 0.0
    for _ in range(10_000):
        d = int(rng.integers(2, 257))
        q = rng.normal(size=d)
        k = rng.normal(size=d)
        q /= np.linalg.norm(q)
        k /= np.linalg.norm(k)
        lhs, rhs = check_unit_cosine_law(q, k)
        worst = max(worst, abs(lhs - rhs))
    checks.append({
        "name": "unit-cosine-law", "pairs": 10_000,
        "max_gap": worst, "passed": worst <= 1e-9,
    })

    # Certified MLP Lipschitz bound, sampled pairs per layer.
    for layer in range(model_cfg.num_layers):
        lw = weights.layers[layer]
        violations, frac = sampled_lipschitz_violations(
            lw.w_gate, lw.w_up, lw.w_down, radius=1.0,
            pairs=lipschitz_pairs, seed=1000 + layer,
        )
        checks.append({
            "name": f"mlp-lipschitz-layer{layer}", "pairs": lipschitz_pairs,
            "violations": violations, "max_ratio_vs_bound": frac,
            "passed": violations == 0,
        })

    # Output-similarity bound on aligned pairs of seeded runs.
    artifacts = []
    for i in range(runs):
        prompt = stream(model_cfg.seed, f"verify-prompt-{i}").integers(
            0, model_cfg.vocab_size, size=layout.prefill_len, dtype=np.int64
        )
        trace = decode(model_cfg, layout, prompt, weights=weights,
                       collect_artifacts=True)
        artifacts.append((trace.artifacts, layout))
    for layer in range(model_cfg.num_layers):
        total_pairs = violations = 0
        max_ratio = 0.0
        for art, lay in artifacts:
            check = verify_theorem2(model_cfg, weights, art, lay, layer)
            total_pairs += check.pairs
            violations += check.violations
            max_ratio = max(max_ratio, check.max_ratio)
        checks.append({
            "name": f"mlp-output-bound-layer{layer}", "pairs": total_pairs,
            "violations": violations, "max_ratio": max_ratio,
            "passed": violations == 0,
        })

    # Fitted composite constant, held out.
    slacks = []
    for layer in range(model_cfg.num_layers):
        fit = fit_composite(model_cfg, weights, artifacts, layer)
        slacks.append(fit.slack)
        checks.append({
            "name": f"composite-fit-layer{layer}",
            "fitted_constant": fit.fitted_constant,
            "holdout_slack": fit.slack,
            "pairs_fit": fit.pairs_fit, "pairs_holdout": fit.pairs_holdout,
            "projection_gap": fit.constants.projection_gap,
            "passed": fit.holds(margin=1.5),
        })

    # Score-similarity trend on the mixed duplicated/random fixture.
    trend_weights = small_gap_weights(model_cfg)
    tokens, duplicated = mixed_frames_tokens(model_cfg, layout)
    art = teacher_forced_forward(model_cfg, layout, tokens, weights=trend_weights)
    stats = tas_similarity_correlation(model_cfg, trend_weights, art, layout,
                                       duplicated_frames=duplicated)
    checks.append({
        "name": "score-similarity-trend",
        "spearman": stats.spearman,
        "shuffled_spearman": stats.shuffled_spearman,
        "pairs": stats.pairs,
        "mean_score_duplicated": stats.mean_score_duplicated,
        "mean_score_random": stats.mean_score_random,
        "undefined": stats.undefined,
        "per_layer_mean_cosine": [float(v) for v in stats.per_layer_mean_cosine],
        "passed": (not stats.undefined and stats.spearman > 0
                   and stats.mean_score_duplicated > stats.mean_score_random),
    })

    # Core decode invariants.
    prompt = default_prompt(model_cfg, layout)
    dense = decode(model_cfg, layout, prompt, weights=weights, collect_logits=True)
    gated = decode(model_cfg, layout, prompt, weights=weights, collect_logits=True,
                   policy=ReplayPolicy(threshold=math.inf))
    exact = bool(
        np.array_equal(dense.tokens, gated.tokens)
        and np.array_equal(dense.logits, gated.logits)
    )
    checks.append({"name": "open-gate-equals-dense", "passed": exact})

    finite = decode(model_cfg, layout, prompt, weights=weights,
                    policy=ReplayPolicy(threshold=0.0), collect_artifacts=True)
    fidelity = True
    tpf = layout.tokens_per_frame
    for layer in range(model_cfg.num_layers):
        for vpos in range(layout.video_len):
            if finite.replay_flags[layer, vpos]:
                pos = layout.prefill_len + vpos
                if not np.array_equal(finite.artifacts.mlp_outputs[layer, pos],
                                      finite.artifacts.mlp_outputs[layer, pos - tpf]):
                    fidelity = False
    first_frame_clean = not finite.replay_flags[:, :tpf].any()
    checks.append({
        "name": "replay-fidelity",
        "replay_ratio": finite.replay_stats.ratio(),
        "passed": fidelity and first_frame_clean,
    })

    all_passed = all(c["passed"] for c in checks)
    report_io.write_json(out / "verification.json", {
        "passed": all_passed,
        "checks": checks,
        "max_composite_slack": max(slacks),
    })
    report_io.write_json(out / "manifest.json", _manifest(cfg, "verify"))
    return 0 if all_passed else 1


def cmd_drs(cfg: RunConfig, out: Path, scenario_path: Optional[str],
            batches: int, num_cores: int, exec_cycles: int,
            dispatch_cost: int) -> int:
    if scenario_path is not None:
        scenario = load_scenario(scenario_path)
    else:
        policy = cfg.policy()
        if policy is None:
            raise ConfigError("drs needs a replay policy (or a scenario file)")
        flag_sets = []
        for b in range(batches):
            prompt = stream(cfg.model.seed, f"drs-batch-{b}").integers(
                0, cfg.model.vocab_size, size=cfg.layout.prefill_len, dtype=np.int64
            )
            trace = decode(cfg.model, cfg.layout, prompt, policy=policy,
                           mask=cfg.mask())
            flag_sets.append(trace.replay_flags)
        registers = registers_from_replay_flags(flag_sets)
        labels = [
            f"layer{layer}-step{step}"
            for layer in range(cfg.model.num_layers)
            for step in range(cfg.layout.video_len)
        ]
        scenario = Scenario(
            num_cores=num_cores,
            exec_cycles_per_instr=exec_cycles,
            dispatch_cost_per_instr=dispatch_cost,
            num_batches=batches,
            instructions_per_batch=1,
            registers=registers,
            labels=labels,
        )
        save_scenario(scenario, out / "scenario.json")

    rows = []
    speedups = []
    for reg, label in zip(scenario.registers, scenario.labels):
        cmp = compare_with_static(
            reg, num_batches=scenario.num_batches, num_cores=scenario.num_cores,
            exec_cycles_per_instr=scenario.exec_cycles_per_instr,
            dispatch_cost_per_instr=scenario.dispatch_cost_per_instr,
            instructions_per_batch=scenario.instructions_per_batch,
            label=label,
        )
        plan_util = cmp.dynamic.utilization
        rows.append((
            label, reg.to_string(scenario.num_batches),
            cmp.dynamic.makespan // scenario.exec_cycles_per_instr
            if scenario.exec_cycles_per_instr else 0,
            0,
            cmp.dynamic.makespan, cmp.static.makespan, cmp.speedup,
            min(plan_util) if plan_util else 0.0,
            max(plan_util) if plan_util else 0.0,
        ))
        speedups.append(cmp.speedup)
    report_io.write_csv(out / "drs.csv", report_io.DRS_HEADER, rows)
    report_io.write_json(out / "drs_summary.json", {
        "steps": len(rows),
        "mean_speedup": float(np.mean(speedups)) if speedups else 1.0,
        "max_speedup": float(np.max(speedups)) if speedups else 1.0,
        "dominance_holds": all(s >= 1.0 for s in speedups),
    })
    report_io.write_json(out / "manifest.json", _manifest(cfg, "drs"))
    return 0


def cmd_ablate(cfg: RunConfig, out: Path) -> int:
    """Same overall replay ratio through one shared threshold vs per-layer
    thresholds; reports the per-layer replay distribution for both."""
    if cfg.target_ratio is None:
        raise ConfigError("ablate needs --target-ratio")
    prompt = default_prompt(cfg.model, cfg.layout)
    weights = init_weights(cfg.model)
    mask = cfg.mask()

    dense = decode(cfg.model, cfg.layout, prompt, weights=weights, mask=mask)
    results = {}
    for mode in ("consistent", "inconsistent"):
        cal = calibrate_threshold(cfg.model, cfg.layout, prompt, cfg.target_ratio,
                                  mode=mode, mask=mask, weights=weights)
        trace = decode(cfg.model, cfg.layout, prompt, policy=cal.policy,
                       weights=weights, mask=mask)
        agreement = float(np.mean(trace.tokens == dense.tokens))
        results[mode] = (cal, trace, agreement)

    rows = []
    for layer in range(cfg.model.num_layers):
        cal_c, trace_c, _ = results["consistent"]
        cal_i, trace_i, _ = results["inconsistent"]
        rows.append((
            layer,
            trace_c.replay_stats.layer_ratio(layer),
            trace_i.replay_stats.layer_ratio(layer),
            cal_c.policy.threshold,
            cal_i.policy.threshold[layer],
        ))
    report_io.write_csv(
        out / "ablate.csv",
        ("layer", "consistent_ratio", "inconsistent_ratio",
         "consistent_threshold", "inconsistent_threshold"),
        rows,
    )
    report_io.write_json(out / "ablate_summary.json", {
        "target_ratio": cfg.target_ratio,
        "consistent": {
            "achieved_ratio": results["consistent"][1].replay_stats.ratio(),
            "token_agreement_vs_dense": results["consistent"][2],
            "saturated": results["consistent"][0].saturated,
        },
        "inconsistent": {
            "achieved_ratio": results["inconsistent"][1].replay_stats.ratio(),
            "token_agreement_vs_dense": results["inconsistent"][2],
            "saturated": results["inconsistent"][0].saturated,
        },
    })
    report_io.write_json(out / "manifest.json", _manifest(cfg, "ablate"))
    return 0


# ---------------------------------------------------------------------------
# Argument handling
# ---------------------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fastcar",
        description="Frame-structured AR decode engine with gated MLP replay",
    )
    parser.add_argument("--config", help="JSON config file")
    parser.add_argument("--out", help="output directory (default derives from "
                        f"${OUT_ROOT_ENV} or ./runs)")
    parser.add_argument("--seed", type=int, help="model seed override")
    parser.add_argument("--threshold", type=float, help="replay gate threshold "
                        "(use 'inf' to disable replay while keeping the gate)")
    parser.add_argument("--target-ratio", type=float, dest="target_ratio",
                        help="calibrate the threshold to this replay ratio")
    parser.add_argument("--mode", choices=("consistent", "inconsistent"),
                        help="threshold distribution across layers")
    parser.add_argument("--sink", type=int, help="attention sink size")
    parser.add_argument("--local", type=int, help="attention local window size")
    parser.add_argument("--frames", type=int, help="frame count override")
    parser.add_argument("--tokens-per-frame", type=int, dest="tokens_per_frame")
    parser.add_argument("--prefill", type=int, help="prompt length override")

    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", help="decode a run and write trace/stats/flops")
    cal = sub.add_parser("calibrate", help="find a threshold for a target ratio")
    cal.add_argument("--floor", type=float, help="lowest threshold allowed")
    ver = sub.add_parser("verify", help="run the bound/invariant suite")
    ver.add_argument("--runs", type=int, default=5)
    ver.add_argument("--lipschitz-pairs", type=int, default=100_000,
                     dest="lipschitz_pairs")
    prof = sub.add_parser("profile", help="measure per-module wall times")
    prof.add_argument("--repetitions", type=int, default=5)
    drs = sub.add_parser("drs", help="simulate dispatch over replay patterns")
    drs.add_argument("--scenario", help="scenario JSON instead of decode runs")
    drs.add_argument("--batches", type=int, default=8)
    drs.add_argument("--cores", type=int, default=4)
    drs.add_argument("--exec-cycles", type=int, default=1000, dest="exec_cycles")
    drs.add_argument("--dispatch-cost", type=int, default=1, dest="dispatch_cost")
    sub.add_parser("ablate", help="consistent vs per-layer thresholds at "
                   "matched replay ratio")
    return parser


def _config_from_args(args) -> RunConfig:
    if args.config:
        cfg = RunConfig.from_dict(report_io.read_json(args.config))
    else:
        cfg = RunConfig()
    model_kwargs = {
        "hidden_size": cfg.model.hidden_size,
        "mlp_size": cfg.model.mlp_size,
        "num_heads": cfg.model.num_heads,
        "num_layers": cfg.model.num_layers,
        "vocab_size": cfg.model.vocab_size,
        "seed": cfg.model.seed,
        "positional_encoding": cfg.model.positional_encoding,
    }
    layout_kwargs = {
        "num_frames": cfg.layout.num_frames,
        "tokens_per_frame": cfg.layout.tokens_per_frame,
        "prefill_len": cfg.layout.prefill_len,
    }
    if args.seed is not None:
        model_kwargs["seed"] = args.seed
    if args.frames is not None:
        layout_kwargs["num_frames"] = args.frames
    if args.tokens_per_frame is not None:
        layout_kwargs["tokens_per_frame"] = args.tokens_per_frame
    if args.prefill is not None:
        layout_kwargs["prefill_len"] = args.prefill
    cfg.model = ModelConfig(**model_kwargs)
    cfg.layout = FrameLayout(**layout_kwargs)
    if args.threshold is not None:
        cfg.threshold = args.threshold
        cfg.target_ratio = None
    if args.target_ratio is not None:
        cfg.target_ratio = args.target_ratio
        cfg.threshold = None
        cfg.thresholds = None
    if args.mode is not None:
        cfg.mode = args.mode
    if args.sink is not None:
        cfg.sink_size = args.sink
    if args.local is not None:
        cfg.local_size = args.local
    cfg.validate()
    return cfg


def _out_dir(args, cfg: RunConfig) -> Path:
    if args.out:
        out = Path(args.out)
    else:
        root = Path(os.environ.get(OUT_ROOT_ENV, "runs"))
        out = root / f"{args.command}-{cfg.config_hash()}"
    out.mkdir(parents=True, exist_ok=True)
    return out


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        cfg = _config_from_args(args)
        out = _out_dir(args, cfg)
        if args.command == "generate":
            return cmd_generate(cfg, out)
        if args.command == "calibrate":
            return cmd_calibrate(cfg, out, args.floor)
        if args.command == "verify":
            return cmd_verify(cfg, out, args.runs, args.lipschitz_pairs)
        if args.command == "profile":
            return cmd_profile(cfg, out, args.repetitions)
        if args.command == "drs":
            return cmd_drs(cfg, out, args.scenario, args.batches, args.cores,
                           args.exec_cycles, args.dispatch_cost)
        if args.command == "ablate":
            return cmd_ablate(cfg, out)
        raise ConfigError(f"unknown command {args.command!r}")
    except (ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
