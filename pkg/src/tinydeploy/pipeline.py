"""End-to-end pipeline: load -> baseline eval -> staged pruning with
checkpoint round-trips -> calibrate -> quantize -> map -> estimate ->
downlink simulation -> combined report.

Every stage is a file-in/file-out function shared between run_pipeline
and the CLI subcommands, so running the stages one file at a time is
bit-identical to the monolithic run (given no external fine-tuning).
All randomness (calibration subset sampling) derives from the config
seed; re-running a config produces byte-identical output trees.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import costmodel
from .data_files import load_link_budget, load_profile, resolve_path
from .datasets import load_dataset
from .downlink import DownlinkScenario, simulate
from .executor import (
    calibrate,
    evaluate,
    ranges_from_json,
    ranges_to_json,
    read_records_csv,
    write_records_csv,
    write_records_json,
)
from .graph import parameter_count, validate
from .mapping import build_deployment_plan, load_plan, render_report
from .model_io import load_model, save_model
from .pruning import (
    Checkpoint,
    PrunePlan,
    apply_masks,
    export_checkpoint,
    import_checkpoint,
    materialize,
    new_plan,
    plan_next_stage,
)
from .quantization import quantize_graph

STAGE_ORDER = (
    "evaluate-float",
    "prune",
    "evaluate-pruned",
    "calibrate",
    "quantize",
    "evaluate-quantized",
    "map",
    "estimate",
    "simulate-downlink",
    "report",
)

# Artifact name patterns a pipeline run owns; stale ones are purged at setup
# so re-running a config in place regenerates everything from scratch.
_ARTIFACT_PATTERNS = (
    "model_float.*", "eval_float.*", "prune_plan.json",
    "model_masked_stage*.*", "checkpoint_stage*.*", "model_pruned.*",
    "eval_pruned.*", "calibration_ranges.json", "model_quantized.*",
    "eval_quantized.*", "deployment_plan.*", "cost_estimate.json",
    "downlink_report.*", "report.json", "report.csv", "plot_latency_energy.csv",
)


class PipelineError(RuntimeError):
    pass


@dataclass
class PipelineConfig:
    model: str
    dataset: str
    output_dir: str
    calibration_samples: int = 32
    prune_schedule: list[float] = field(default_factory=lambda: [0.10, 0.05, 0.05])
    prune_skip: bool = False
    confidence_threshold: float = 0.95
    bytes_per_sample: float = 12288.0
    hardware_profile: str = "builtin:profile_desk_calibrated"
    link_budget: str = "builtin:link_sband_256k"
    seed: int = 0

    def to_json(self) -> dict:
        return {
            "model": self.model,
            "dataset": self.dataset,
            "output_dir": self.output_dir,
            "calibration_samples": self.calibration_samples,
            "prune": {"schedule": list(self.prune_schedule), "skip": self.prune_skip},
            "confidence_threshold": self.confidence_threshold,
            "bytes_per_sample": self.bytes_per_sample,
            "hardware_profile": self.hardware_profile,
            "link_budget": self.link_budget,
            "seed": self.seed,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "PipelineConfig":
        prune = obj.get("prune", {})
        try:
            return cls(
                model=obj["model"],
                dataset=obj["dataset"],
                output_dir=obj["output_dir"],
                calibration_samples=int(obj.get("calibration_samples", 32)),
                prune_schedule=[float(f) for f in prune.get("schedule", [0.10, 0.05, 0.05])],
                prune_skip=bool(prune.get("skip", False)),
                confidence_threshold=float(obj.get("confidence_threshold", 0.95)),
                bytes_per_sample=float(obj.get("bytes_per_sample", 12288.0)),
                hardware_profile=obj.get("hardware_profile", "builtin:profile_desk_calibrated"),
                link_budget=obj.get("link_budget", "builtin:link_sband_256k"),
                seed=int(obj.get("seed", 0)),
            )
        except KeyError as exc:
            raise PipelineError(f"config missing required field {exc}") from None

    @classmethod
    def load(cls, path: str | Path) -> "PipelineConfig":
        try:
            obj = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise PipelineError(f"{path}: malformed config: {exc}") from None
        return cls.from_json(obj)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# stage functions (file in, file out)


def stage_evaluate(model_path, dataset_path, out_prefix) -> tuple[int, float]:
    """Evaluate a model on a dataset; writes <prefix>.csv and <prefix>.json."""
    graph = load_model(model_path)
    samples = load_dataset(dataset_path)
    records, accuracy = evaluate(graph, samples)
    out_prefix = Path(out_prefix)
    write_records_csv(records, out_prefix.with_suffix(".csv"))
    write_records_json(records, out_prefix.with_suffix(".json"))
    return len(records), accuracy


def stage_prune_step(
    model_in,
    plan_path,
    out_masked,
    schedule,
    out_pruned=None,
    checkpoint_in=None,
    checkpoint_out=None,
    expect_stage: int | None = None,
) -> PrunePlan:
    """One prune iteration: rank, extend the plan, mask, export checkpoint.

    `checkpoint_in` imports externally fine-tuned weights before ranking.
    When the plan reaches its last scheduled stage and `out_pruned` is
    given, masks are made permanent into a materialized model.
    """
    graph = load_model(model_in)
    plan_path = Path(plan_path)
    if plan_path.exists():
        plan = PrunePlan.load(plan_path)
    else:
        plan = new_plan(graph, schedule)
    if expect_stage is not None and len(plan.stages) != expect_stage:
        raise PipelineError(
            f"prune plan at stage {len(plan.stages)}, expected {expect_stage}"
        )
    if checkpoint_in is not None:
        graph = import_checkpoint(graph, Checkpoint.load(checkpoint_in))
    plan = plan_next_stage(graph, plan)
    masked = apply_masks(graph, plan)
    plan.save(plan_path)
    save_model(masked, out_masked)
    if checkpoint_out is not None:
        export_checkpoint(masked).save(checkpoint_out)
    if plan.complete and out_pruned is not None:
        save_model(materialize(masked, plan), out_pruned)
    return plan


def stage_calibrate(model_path, dataset_path, num_samples, seed, out_json) -> int:
    """Calibration ranges over a seeded subset of the dataset."""
    graph = load_model(model_path)
    samples = load_dataset(dataset_path)
    num_samples = min(int(num_samples), len(samples))
    rng = np.random.default_rng(seed)
    picked = sorted(rng.choice(len(samples), size=num_samples, replace=False).tolist())
    ranges = calibrate(graph, [samples[i][1] for i in picked])
    _write_json(Path(out_json), ranges_to_json(ranges))
    return num_samples


def stage_quantize(model_path, ranges_json, out_model) -> None:
    graph = load_model(model_path)
    ranges = ranges_from_json(json.loads(Path(ranges_json).read_text()))
    save_model(quantize_graph(graph, ranges), out_model)


def stage_map(model_path, profile_ref, out_plan, out_text=None):
    graph = load_model(model_path)
    profile = load_profile(profile_ref)
    plan = build_deployment_plan(graph, profile)
    plan.save(out_plan)
    if out_text is not None:
        Path(out_text).write_text(render_report(plan))
    return plan


def stage_estimate(model_path, plan_path, profile_ref, out_json):
    graph = load_model(model_path)
    plan = load_plan(plan_path)
    profile = load_profile(profile_ref)
    est = costmodel.estimate_deployment(plan, graph, profile)
    _write_json(Path(out_json), est.to_json())
    return est


def stage_downlink(
    records_csv,
    link_ref,
    threshold,
    bytes_per_sample,
    out_json,
    ground_csv=None,
    out_text=None,
):
    records = read_records_csv(records_csv)
    ground = read_records_csv(ground_csv) if ground_csv else None
    link = load_link_budget(link_ref)
    scenario = DownlinkScenario(
        num_samples=len(records),
        bytes_per_sample=float(bytes_per_sample),
        threshold=float(threshold),
        onboard_records=records,
        ground_records=ground,
    )
    report = simulate(scenario, link)
    _write_json(Path(out_json), report.to_json())
    if out_text is not None:
        Path(out_text).write_text(report.summary())
    return report


# ---------------------------------------------------------------------------
# orchestration


def _accuracy_from_csv(path: Path) -> float:
    records = read_records_csv(path)
    return float(np.mean([r.correct for r in records])) if records else 0.0


def stage_report(out_dir, config: PipelineConfig) -> dict:
    """Combine stage artifacts into report.json / report.csv / plot data."""
    out = Path(out_dir)
    profile = load_profile(config.hardware_profile)

    stages: dict[str, dict | None] = {}
    for stage, model_file, eval_prefix in (
        ("float", "model_float", "eval_float"),
        ("pruned", "model_pruned", "eval_pruned"),
        ("quantized", "model_quantized", "eval_quantized"),
    ):
        model_path = out / f"{model_file}.json"
        if not model_path.exists():
            stages[stage] = None
            continue
        graph = load_model(model_path)
        stages[stage] = {
            "accuracy": _accuracy_from_csv(out / f"{eval_prefix}.csv"),
            "parameters": parameter_count(graph),
            "flash_bytes": costmodel.flash_bytes(graph, profile),
        }

    estimates = json.loads((out / "cost_estimate.json").read_text())
    downlink_report = json.loads((out / "downlink_report.json").read_text())
    float_flash = stages["float"]["flash_bytes"]
    quant_flash = stages["quantized"]["flash_bytes"]
    report = {
        "model": load_model(out / "model_float.json").name,
        "config": config.to_json(),
        "stages": stages,
        "flash_reduction_pct": 100.0 * (1.0 - quant_flash / float_flash),
        "deployment": estimates,
        "downlink": downlink_report,
    }
    _write_json(out / "report.json", report)

    dataset_name = Path(config.dataset).name
    with open(out / "report.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["model", "dataset", "stage", "accuracy", "parameters", "flash_bytes",
             "ram_peak_bytes", "latency_ms", "energy_mj"]
        )
        for stage in ("float", "pruned", "quantized"):
            entry = stages[stage]
            if entry is None:
                continue
            deployed = stage == "quantized"
            writer.writerow([
                report["model"], dataset_name, stage, repr(entry["accuracy"]),
                entry["parameters"], entry["flash_bytes"],
                estimates["ram_peak_bytes"] if deployed else "",
                repr(estimates["latency_ms"]) if deployed else "",
                repr(estimates["energy_mj"]) if deployed else "",
            ])

    with open(out / "plot_latency_energy.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["model", "latency_ms", "energy_mj"])
        writer.writerow([report["model"], repr(estimates["latency_ms"]), repr(estimates["energy_mj"])])
    return report


def run_pipeline(config: PipelineConfig, stop_after: str | None = None) -> dict | None:
    """Run all stages into config.output_dir; returns the combined report.

    A failing stage removes the files it created and raises PipelineError
    tagged with the stage name. `stop_after` ends the run early after the
    named stage (see STAGE_ORDER).
    """
    if stop_after is not None and stop_after not in STAGE_ORDER:
        raise PipelineError(f"unknown stage {stop_after!r}; choose from {STAGE_ORDER}")
    model_path = resolve_path(config.model)
    dataset_path = resolve_path(config.dataset)
    for path, what in ((model_path, "model"), (dataset_path, "dataset")):
        if not Path(path).exists():
            raise PipelineError(f"config {what} path does not exist: {path}")

    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    for pattern in _ARTIFACT_PATTERNS:
        for stale in out.glob(pattern):
            stale.unlink()
    created: list[Path] = []
    current_stage = "setup"

    def track(*names: str) -> list[Path]:
        paths = [out / n for n in names]
        created.extend(paths)
        return paths

    def snapshot(func):
        try:
            return func()
        except Exception as exc:
            for p in created:
                p.unlink(missing_ok=True)
            raise PipelineError(f"{current_stage}: {exc}") from exc

    def run() -> dict | None:
        nonlocal current_stage

        current_stage = "setup"
        graph = load_model(model_path)
        report = validate(graph)
        if not report.ok:
            raise ValueError("input model invalid: " + "; ".join(report.violations))
        float_model, _ = track("model_float.json", "model_float.bin")
        save_model(graph, float_model)

        current_stage = "evaluate-float"
        track("eval_float.csv", "eval_float.json")
        stage_evaluate(out / "model_float.json", dataset_path, out / "eval_float")
        if stop_after == "evaluate-float":
            return None

        quant_source = out / "model_float.json"
        if not config.prune_skip:
            current_stage = "prune"
            track("prune_plan.json")
            n_stages = len(config.prune_schedule)
            prev_ckpt = None
            for k in range(1, n_stages + 1):
                track(
                    f"model_masked_stage{k}.json", f"model_masked_stage{k}.bin",
                    f"checkpoint_stage{k}.json", f"checkpoint_stage{k}.bin",
                )
                last = k == n_stages
                if last:
                    track("model_pruned.json", "model_pruned.bin")
                model_in = out / ("model_float.json" if k == 1 else f"model_masked_stage{k-1}.json")
                stage_prune_step(
                    model_in,
                    out / "prune_plan.json",
                    out / f"model_masked_stage{k}",
                    config.prune_schedule,
                    out_pruned=(out / "model_pruned") if last else None,
                    checkpoint_in=prev_ckpt,
                    checkpoint_out=out / f"checkpoint_stage{k}",
                )
                # Identity fine-tuning: re-import the unmodified checkpoint.
                prev_ckpt = out / f"checkpoint_stage{k}.json"
            if stop_after == "prune":
                return None

            current_stage = "evaluate-pruned"
            track("eval_pruned.csv", "eval_pruned.json")
            stage_evaluate(out / "model_pruned.json", dataset_path, out / "eval_pruned")
            quant_source = out / "model_pruned.json"
            if stop_after == "evaluate-pruned":
                return None
        elif stop_after in ("prune", "evaluate-pruned"):
            return None

        current_stage = "calibrate"
        track("calibration_ranges.json")
        stage_calibrate(
            quant_source, dataset_path, config.calibration_samples,
            config.seed, out / "calibration_ranges.json",
        )
        if stop_after == "calibrate":
            return None

        current_stage = "quantize"
        track("model_quantized.json", "model_quantized.bin")
        stage_quantize(quant_source, out / "calibration_ranges.json", out / "model_quantized")
        if stop_after == "quantize":
            return None

        current_stage = "evaluate-quantized"
        track("eval_quantized.csv", "eval_quantized.json")
        stage_evaluate(out / "model_quantized.json", dataset_path, out / "eval_quantized")
        if stop_after == "evaluate-quantized":
            return None

        current_stage = "map"
        track("deployment_plan.json", "deployment_plan.txt")
        stage_map(
            out / "model_quantized.json", config.hardware_profile,
            out / "deployment_plan.json", out / "deployment_plan.txt",
        )
        if stop_after == "map":
            return None

        current_stage = "estimate"
        track("cost_estimate.json")
        stage_estimate(
            out / "model_quantized.json", out / "deployment_plan.json",
            config.hardware_profile, out / "cost_estimate.json",
        )
        if stop_after == "estimate":
            return None

        current_stage = "simulate-downlink"
        track("downlink_report.json", "downlink_report.txt")
        stage_downlink(
            out / "eval_quantized.csv",
            config.link_budget,
            config.confidence_threshold,
            config.bytes_per_sample,
            out / "downlink_report.json",
            ground_csv=out / "eval_float.csv",
            out_text=out / "downlink_report.txt",
        )
        if stop_after == "simulate-downlink":
            return None

        current_stage = "report"
        track("report.json", "report.csv", "plot_latency_energy.csv")
        return stage_report(out, config)

    return snapshot(run)
