"""Command-line interface.

Each subcommand wraps one pipeline stage with file-based inputs and
outputs so stages can interleave with external fine-tuning between
prune-stage invocations; `run` chains them from a single JSON config.
Exit code 0 on success, 1 with a stage-tagged diagnostic on failure.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import pipeline
from .data_files import resolve_path
from .datasets import generate_dataset, synthetic_samples
from .graph import validate
from .model_io import load_model, save_model
from .models import BUNDLED_MODELS, build_bundled_model, fit_classifier
from .pipeline import PipelineConfig, PipelineError


def _parse_schedule(text: str) -> list[float]:
    return [float(f) for f in text.split(",") if f.strip()]


def _cmd_run(args) -> int:
    config = PipelineConfig.load(args.config)
    if args.out:
        config.output_dir = args.out
    if args.seed is not None:
        config.seed = args.seed
    report = pipeline.run_pipeline(config, stop_after=args.stage)
    if report is not None:
        print(f"report written to {Path(config.output_dir) / 'report.json'}")
        quant = report["stages"]["quantized"]
        print(
            f"quantized accuracy {quant['accuracy']:.4f}, "
            f"flash reduction {report['flash_reduction_pct']:.1f}%, "
            f"downlink reduction {report['downlink']['reduction_pct']:.2f}%"
        )
    else:
        print(f"stopped after stage {args.stage}; outputs in {config.output_dir}")
    return 0


def _cmd_validate_model(args) -> int:
    graph = load_model(args.model)
    report = validate(graph)
    if report.ok:
        print(f"{graph.name}: ok ({len(graph.nodes)} nodes, {len(graph.tensors)} tensors)")
        return 0
    for violation in report.violations:
        print(f"violation: {violation}", file=sys.stderr)
    return 1


def _cmd_evaluate(args) -> int:
    count, accuracy = pipeline.stage_evaluate(args.model, resolve_path(args.dataset), args.out)
    print(f"{count} samples, top-1 accuracy {accuracy:.4f}")
    return 0


def _cmd_prune_stage(args) -> int:
    plan = pipeline.stage_prune_step(
        args.model,
        args.plan,
        args.out_masked,
        _parse_schedule(args.schedule),
        out_pruned=args.out_pruned,
        checkpoint_in=args.checkpoint_in,
        checkpoint_out=args.checkpoint_out,
        expect_stage=args.stage,
    )
    removed = sum(len(v) for v in plan.stages[-1].values())
    print(f"stage {len(plan.stages)}/{len(plan.schedule)}: removed {removed} structures")
    if plan.complete and args.out_pruned:
        print(f"masks made permanent: {args.out_pruned}")
    return 0


def _cmd_calibrate(args) -> int:
    used = pipeline.stage_calibrate(
        args.model, resolve_path(args.dataset), args.samples, args.seed, args.out
    )
    print(f"calibrated on {used} samples -> {args.out}")
    return 0


def _cmd_quantize(args) -> int:
    pipeline.stage_quantize(args.model, args.ranges, args.out)
    print(f"quantized model written to {args.out}")
    return 0


def _cmd_map(args) -> int:
    plan = pipeline.stage_map(args.model, args.profile, args.out, args.report)
    print(
        f"plan: {len(plan.fused_groups)} groups, makespan {plan.makespan_us:.1f} us, "
        f"arena peak {plan.memory_plan.arena_peak_bytes} B"
    )
    return 0


def _cmd_estimate(args) -> int:
    est = pipeline.stage_estimate(args.model, args.plan, args.profile, args.out)
    print(
        f"latency {est.latency_ms:.3f} ms, energy {est.energy_mj:.3f} mJ, "
        f"ram {est.ram_peak_bytes} B, flash {est.flash_bytes} B"
    )
    return 0


def _cmd_simulate_downlink(args) -> int:
    records, ground = args.records, args.ground_records
    threshold, bps = args.threshold, args.bytes_per_sample
    if args.scenario:
        scenario = json.loads(Path(args.scenario).read_text())
        records = records or scenario.get("records")
        ground = ground or scenario.get("ground_records")
        threshold = scenario.get("threshold", threshold)
        bps = scenario.get("bytes_per_sample", bps)
    if not records:
        print("error: no records CSV given (flag --records or scenario file)", file=sys.stderr)
        return 1
    report = pipeline.stage_downlink(
        records,
        args.link,
        threshold,
        bps,
        args.out,
        ground_csv=ground,
        out_text=args.summary,
    )
    print(report.summary(), end="")
    return 0


def _cmd_report(args) -> int:
    config = PipelineConfig.load(args.config)
    report = pipeline.stage_report(args.run_dir, config)
    print(f"report written to {Path(args.run_dir) / 'report.json'}")
    return 0


def _cmd_make_assets(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dataset_dir = generate_dataset(
        out / "dataset", num_samples=args.samples, seed=args.seed
    )
    train = synthetic_samples(
        num_samples=args.train_samples, seed=args.seed, noise_seed=args.seed + 8668
    )
    for name in BUNDLED_MODELS:
        graph = fit_classifier(build_bundled_model(name), train)
        save_model(graph, out / name)
        print(f"model: {out / name}.json")
    print(f"dataset: {dataset_dir} ({args.samples} samples)")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tinydeploy",
        description="ConvNet compression and deployment planning for CPU/NPU microcontrollers",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run the full pipeline from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--out", help="override the config's output directory")
    p.add_argument("--seed", type=int, help="override the config's seed")
    p.add_argument("--stage", choices=pipeline.STAGE_ORDER, help="stop after this stage")
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("validate-model", help="check graph invariants")
    p.add_argument("--model", required=True)
    p.set_defaults(func=_cmd_validate_model)

    p = sub.add_parser("evaluate", help="evaluate a model on a dataset directory")
    p.add_argument("--model", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True, help="output prefix for records (.csv/.json)")
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("prune-stage", help="run one prune iteration of the schedule")
    p.add_argument("--model", required=True)
    p.add_argument("--plan", required=True, help="plan JSON, created on first stage")
    p.add_argument("--schedule", default="0.10,0.05,0.05")
    p.add_argument("--out-masked", required=True)
    p.add_argument("--out-pruned", help="materialized model, written after the final stage")
    p.add_argument("--checkpoint-in", help="fine-tuned checkpoint to import before ranking")
    p.add_argument("--checkpoint-out", help="checkpoint export for external fine-tuning")
    p.add_argument("--stage", type=int, help="expected 0-based stage index (sanity check)")
    p.set_defaults(func=_cmd_prune_stage)

    p = sub.add_parser("calibrate", help="record activation ranges on a dataset subset")
    p.add_argument("--model", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--samples", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_calibrate)

    p = sub.add_parser("quantize", help="quantize a model with calibration ranges")
    p.add_argument("--model", required=True)
    p.add_argument("--ranges", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_quantize)

    p = sub.add_parser("map", help="partition, fuse, schedule and plan memory")
    p.add_argument("--model", required=True)
    p.add_argument("--profile", default="builtin:profile_default")
    p.add_argument("--out", required=True)
    p.add_argument("--report", help="also write a human-readable plan table")
    p.set_defaults(func=_cmd_map)

    p = sub.add_parser("estimate", help="cost-estimate a deployment plan")
    p.add_argument("--model", required=True)
    p.add_argument("--plan", required=True)
    p.add_argument("--profile", default="builtin:profile_default")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_estimate)

    p = sub.add_parser("simulate-downlink", help="confidence-threshold transmission tradeoff")
    p.add_argument("--records", help="onboard records CSV from evaluate")
    p.add_argument("--ground-records", help="ground model records CSV for hybrid accuracy")
    p.add_argument("--scenario", help="scenario JSON (records, ground_records, threshold, bytes_per_sample)")
    p.add_argument("--link", default="builtin:link_sband_256k")
    p.add_argument("--threshold", type=float, default=0.95)
    p.add_argument("--bytes-per-sample", type=float, default=12288.0)
    p.add_argument("--out", required=True)
    p.add_argument("--summary", help="also write a human-readable summary")
    p.set_defaults(func=_cmd_simulate_downlink)

    p = sub.add_parser("report", help="combine stage artifacts into the final report")
    p.add_argument("--run-dir", required=True)
    p.add_argument("--config", required=True)
    p.set_defaults(func=_cmd_report)

    p = sub.add_parser("make-assets", help="generate the bundled models and dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--samples", type=int, default=200)
    p.add_argument("--train-samples", type=int, default=300)
    p.set_defaults(func=_cmd_make_assets)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except PipelineError as exc:
        print(f"error [{exc}]", file=sys.stderr)
        return 1
    except (ValueError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
