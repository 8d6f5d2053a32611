"""Structured iterative pruning.

Output structures (Conv2D filters, FullyConnected neurons) are ranked by
the L2 norm of their weight slice; each stage removes the lowest-ranked
floor(fraction * original_count) structures per layer, fractions relative
to the original count. Masking zeroes the structures in place;
materializing removes them physically and slices every consumer's input
channels.

Channel propagation rule: a removal travels from a layer's output through
channel-preserving ops (ReLU, MaxPool2D, AvgPool2D) and DepthwiseConv2D
(whose per-channel kernels and bias entries are removed along the way)
until it is absorbed by the input-channel axis of a Conv2D or, through
Flatten, by the matching column block of a FullyConnected layer. Layers
whose removals would reach Add, Concat, Softmax or a graph output are
excluded from pruning; this keeps cross-branch masks consistent and
always protects the final classifier.

Fine-tuning happens externally: export_checkpoint/import_checkpoint move
weights across the boundary in the model blob layout.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .graph import (
    CHANNEL_PRESERVING_OPS,
    GraphIR,
    OpKind,
    infer_shapes,
    validate,
)

PRUNABLE_OPS = (OpKind.CONV2D, OpKind.FULLY_CONNECTED)
DEFAULT_SCHEDULE = (0.10, 0.05, 0.05)


class PruneError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class FilterScore:
    layer_id: str
    filter_index: int
    l2_norm: float


@dataclass
class PrunePlan:
    """Staged removal sets plus derived keep-masks (True = kept)."""

    schedule: list[float]
    original_counts: dict[str, int]
    stages: list[dict[str, list[int]]] = field(default_factory=list)
    basis: str = "original_count"

    def removed(self, layer_id: str) -> set[int]:
        out: set[int] = set()
        for stage in self.stages:
            out.update(stage.get(layer_id, []))
        return out

    @property
    def masks(self) -> dict[str, list[bool]]:
        return {
            layer: [i not in self.removed(layer) for i in range(count)]
            for layer, count in self.original_counts.items()
        }

    @property
    def complete(self) -> bool:
        return len(self.stages) >= len(self.schedule)

    def to_json(self) -> dict:
        return {
            "schedule": list(self.schedule),
            "basis": self.basis,
            "original_counts": dict(sorted(self.original_counts.items())),
            "stages": [
                {layer: list(idx) for layer, idx in sorted(stage.items())}
                for stage in self.stages
            ],
            "masks": {layer: mask for layer, mask in sorted(self.masks.items())},
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def from_json(cls, obj: dict) -> "PrunePlan":
        return cls(
            schedule=[float(f) for f in obj["schedule"]],
            original_counts={k: int(v) for k, v in obj["original_counts"].items()},
            stages=[
                {layer: [int(i) for i in idx] for layer, idx in stage.items()}
                for stage in obj["stages"]
            ],
            basis=obj.get("basis", "original_count"),
        )

    @classmethod
    def load(cls, path: str | Path) -> "PrunePlan":
        return cls.from_json(json.loads(Path(path).read_text()))


def _validate_schedule(schedule) -> list[float]:
    schedule = [float(f) for f in schedule]
    if not schedule:
        raise PruneError("empty prune schedule")
    if any(not 0.0 < f < 1.0 for f in schedule):
        raise PruneError(f"schedule fractions must lie in (0, 1): {schedule}")
    if sum(schedule) >= 1.0:
        raise PruneError(f"schedule fractions must sum below 1: {schedule}")
    return schedule


# ---------------------------------------------------------------------------
# channel propagation


def _propagation_actions(graph: GraphIR, layer_id: str):
    """Downstream actions for removing output structures of `layer_id`.

    Returns a list of ("dw"|"conv_in"|"fc_in", node_id, positions) where
    positions is the Flatten spatial expansion factor for "fc_in" (1 when
    the input was already 2-D), or None when the layer is not prunable.
    """
    g, _ = infer_shapes(graph)
    consumers = g.consumer_map()
    actions = []
    # (tensor_id, flatten positions or None while still channel-shaped)
    queue: list[tuple[str, int | None]] = [(g.node(layer_id).outputs[0], None)]
    seen: set[tuple[str, int | None]] = set()
    while queue:
        tid, positions = queue.pop(0)
        if (tid, positions) in seen:
            continue
        seen.add((tid, positions))
        if tid in g.graph_outputs:
            return None
        for consumer in consumers.get(tid, []):
            kind = consumer.kind
            if kind in (OpKind.ADD, OpKind.CONCAT, OpKind.SOFTMAX):
                return None
            if kind in CHANNEL_PRESERVING_OPS:
                queue.append((consumer.outputs[0], positions))
            elif kind == OpKind.DEPTHWISE_CONV2D:
                if positions is not None:
                    return None
                actions.append(("dw", consumer.id, None))
                queue.append((consumer.outputs[0], None))
            elif kind == OpKind.CONV2D:
                if positions is not None:
                    return None
                actions.append(("conv_in", consumer.id, None))
            elif kind == OpKind.FULLY_CONNECTED:
                actions.append(("fc_in", consumer.id, positions or 1))
            elif kind == OpKind.FLATTEN:
                if positions is not None:
                    return None
                shape = g.tensors[tid].shape
                spatial = int(np.prod(shape[1:-1])) if len(shape) > 2 else 1
                queue.append((consumer.outputs[0], spatial))
            else:
                return None
    return actions


def prunable_layers(graph: GraphIR) -> list[str]:
    """Conv2D/FullyConnected layers whose channel removals stay absorbable."""
    out = []
    for node in graph.nodes:
        if node.kind in PRUNABLE_OPS and _propagation_actions(graph, node.id) is not None:
            out.append(node.id)
    return out


def _layer_weight(graph: GraphIR, layer_id: str):
    node = graph.node(layer_id)
    return graph.tensors[node.inputs[1]]


def rank_filters(graph: GraphIR) -> dict[str, list[FilterScore]]:
    """Per-layer L2 norms of every output structure, prunable layers only."""
    scores: dict[str, list[FilterScore]] = {}
    for layer_id in prunable_layers(graph):
        w = _layer_weight(graph, layer_id).data
        if w.dtype != np.float32:
            raise PruneError(f"layer {layer_id}: pruning requires Float32 weights")
        flat = np.asarray(w, dtype=np.float64).reshape(w.shape[0], -1)
        norms = np.sqrt((flat * flat).sum(axis=1))
        scores[layer_id] = [
            FilterScore(layer_id, i, float(n)) for i, n in enumerate(norms)
        ]
    return scores


def plan_next_stage(graph: GraphIR, plan: PrunePlan) -> PrunePlan:
    """Append one stage: rank current weights, remove the lowest-L2 unmasked.

    Ranking is recomputed on the graph as passed in, so weights fine-tuned
    between stages influence later removals.
    """
    if plan.complete:
        raise PruneError("prune plan already has all scheduled stages")
    fraction = plan.schedule[len(plan.stages)]
    scores = rank_filters(graph)
    stage: dict[str, list[int]] = {}
    for layer_id, layer_scores in scores.items():
        if layer_id not in plan.original_counts:
            raise PruneError(f"layer {layer_id} missing from plan's original counts")
        original = plan.original_counts[layer_id]
        count = math.floor(fraction * original)
        if count == 0:
            continue
        already = plan.removed(layer_id)
        live = [s for s in layer_scores if s.filter_index not in already]
        if count >= len(live):
            raise PruneError(f"layer {layer_id}: stage would remove all remaining filters")
        live.sort(key=lambda s: (s.l2_norm, s.filter_index))
        stage[layer_id] = sorted(s.filter_index for s in live[:count])
    return PrunePlan(
        schedule=list(plan.schedule),
        original_counts=dict(plan.original_counts),
        stages=[*[dict(s) for s in plan.stages], stage],
        basis=plan.basis,
    )


def new_plan(graph: GraphIR, schedule=DEFAULT_SCHEDULE) -> PrunePlan:
    schedule = _validate_schedule(schedule)
    counts = {
        layer_id: int(_layer_weight(graph, layer_id).shape[0])
        for layer_id in prunable_layers(graph)
    }
    return PrunePlan(schedule=schedule, original_counts=counts)


def build_prune_plan(graph: GraphIR, schedule=DEFAULT_SCHEDULE) -> PrunePlan:
    """All stages at once (no fine-tuning between: weights never change)."""
    plan = new_plan(graph, schedule)
    for _ in plan.schedule:
        plan = plan_next_stage(graph, plan)
    return plan


def apply_masks(graph: GraphIR, plan: PrunePlan) -> GraphIR:
    """Zero removed structures; shapes unchanged.

    Besides the pruned layer's weight rows and bias entries, per-channel
    kernels and biases of depthwise consumers on the propagation path are
    zeroed too, so the masked graph computes exactly what the
    materialized one does.
    """
    g = graph.copy()
    for layer_id, count in plan.original_counts.items():
        node = g.node(layer_id)
        w = g.tensors[node.inputs[1]]
        if w.shape[0] != count:
            raise PruneError(
                f"layer {layer_id}: mask length {count} != filter count {w.shape[0]}"
            )
        removed = sorted(plan.removed(layer_id))
        if not removed:
            continue
        actions = _propagation_actions(graph, layer_id)
        if actions is None:
            raise PruneError(f"layer {layer_id} is not prunable in this graph")
        w.data[removed] = 0
        if len(node.inputs) == 3:
            g.tensors[node.inputs[2]].data[removed] = 0
        for action, consumer_id, _ in actions:
            if action == "dw":
                dw = g.node(consumer_id)
                g.tensors[dw.inputs[1]].data[:, :, :, removed] = 0
                if len(dw.inputs) == 3:
                    g.tensors[dw.inputs[2]].data[removed] = 0
    return g


def materialize(graph: GraphIR, plan: PrunePlan) -> GraphIR:
    """Physically remove pruned structures and re-infer shapes."""
    g = graph.copy()
    for layer_id, count in plan.original_counts.items():
        node = g.node(layer_id)
        w = g.tensors[node.inputs[1]]
        if w.shape[0] != count:
            raise PruneError(
                f"layer {layer_id}: plan count {count} != filter count {w.shape[0]}"
            )
        removed = sorted(plan.removed(layer_id))
        if not removed:
            continue
        actions = _propagation_actions(g, layer_id)
        if actions is None:
            raise PruneError(f"layer {layer_id} is not prunable in this graph")

        w.data = np.delete(w.data, removed, axis=0)
        w.shape = w.data.shape
        if len(node.inputs) == 3:
            b = g.tensors[node.inputs[2]]
            b.data = np.delete(b.data, removed, axis=0)
            b.shape = b.data.shape

        for action, consumer_id, positions in actions:
            consumer = g.node(consumer_id)
            cw = g.tensors[consumer.inputs[1]]
            if action == "dw":
                cw.data = np.delete(cw.data, removed, axis=3)
                cw.shape = cw.data.shape
                if len(consumer.inputs) == 3:
                    cb = g.tensors[consumer.inputs[2]]
                    cb.data = np.delete(cb.data, removed, axis=0)
                    cb.shape = cb.data.shape
            elif action == "conv_in":
                cw.data = np.delete(cw.data, removed, axis=3)
                cw.shape = cw.data.shape
            else:  # fc_in: columns p*C + c for every spatial position p
                cols = [p * count + c for p in range(positions) for c in removed]
                cw.data = np.delete(cw.data, cols, axis=1)
                cw.shape = cw.data.shape

    g, _ = infer_shapes(g)
    report = validate(g)
    if not report.ok:
        raise PruneError("materialized graph invalid: " + "; ".join(report.violations))
    return g


# ---------------------------------------------------------------------------
# fine-tuning interface: checkpoint export/import


@dataclass
class Checkpoint:
    """Constant-tensor snapshot in the model blob layout."""

    index: dict[str, dict]  # tensor id -> {offset, length, dtype, shape}
    blob: bytes

    def save(self, path: str | Path) -> tuple[Path, Path]:
        path = Path(path)
        if path.suffix == ".json":
            path = path.with_suffix("")
        manifest = {"checkpoint_version": 1, "tensors": self.index}
        path.with_suffix(".json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        path.with_suffix(".bin").write_bytes(self.blob)
        return path.with_suffix(".json"), path.with_suffix(".bin")

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        path = Path(path)
        if path.suffix == ".json":
            path = path.with_suffix("")
        manifest = json.loads(path.with_suffix(".json").read_text())
        if manifest.get("checkpoint_version") != 1:
            raise CheckpointError(f"unsupported checkpoint version in {path}")
        return cls(index=manifest["tensors"], blob=path.with_suffix(".bin").read_bytes())


def export_checkpoint(graph: GraphIR) -> Checkpoint:
    blob = bytearray()
    index: dict[str, dict] = {}
    for tid, t in sorted(graph.tensors.items()):  # model blob layout order
        if not t.is_constant:
            continue
        raw = np.ascontiguousarray(t.data, dtype=t.dtype.np_dtype)
        payload = raw.astype(raw.dtype.newbyteorder("<")).tobytes()
        index[tid] = {
            "offset": len(blob),
            "length": len(payload),
            "dtype": t.dtype.value,
            "shape": list(t.shape),
        }
        blob.extend(payload)
    return Checkpoint(index=index, blob=bytes(blob))


def import_checkpoint(graph: GraphIR, checkpoint: Checkpoint) -> GraphIR:
    """Replace constant tensors from a checkpoint, validating layout first."""
    g = graph.copy()
    expected = {tid for tid, t in g.tensors.items() if t.is_constant}
    for tid in sorted(expected):
        if tid not in checkpoint.index:
            raise CheckpointError(f"checkpoint missing tensor {tid}")
    for tid in sorted(checkpoint.index):
        if tid not in expected:
            raise CheckpointError(f"checkpoint has unknown tensor {tid}")
    for tid, t in g.tensors.items():
        if not t.is_constant:
            continue
        entry = checkpoint.index[tid]
        if entry["dtype"] != t.dtype.value:
            raise CheckpointError(
                f"tensor {tid}: checkpoint dtype {entry['dtype']} != {t.dtype.value}"
            )
        if entry["length"] != t.size_bytes:
            raise CheckpointError(
                f"tensor {tid}: checkpoint length {entry['length']} != expected {t.size_bytes}"
            )
        if entry["offset"] + entry["length"] > len(checkpoint.blob):
            raise CheckpointError(f"tensor {tid}: checkpoint blob too short")
        raw = checkpoint.blob[entry["offset"]:entry["offset"] + entry["length"]]
        data = np.frombuffer(raw, dtype=np.dtype(t.dtype.value).newbyteorder("<"))
        t.data = data.astype(t.dtype.np_dtype).reshape(t.shape)
    return g
