"""Reference interpreters for the graph IR.

`run_f32` executes Float32 graphs; `run_int8` executes quantized graphs
with integer-only arithmetic between the quantize/dequantize boundaries:
convolutions and matmuls accumulate in 32-bit (checked, not wrapped),
outputs are requantized with fixed-point multipliers and saturated to
[-128, 127]. Softmax always runs in Float32 on dequantized logits.

Both interpreters are pure functions of (graph, input) and are
bit-reproducible run to run.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .graph import (
    DType,
    GraphIR,
    OpKind,
    OpNode,
    conv_output_hw,
    infer_shapes,
    same_padding_amounts,
)
from .quantization import (
    QMAX,
    QMIN,
    dequantize_tensor,
    fixed_point_multiplier,
    quantize_tensor,
    requantize_fixed_point,
)

_INT32_MAX = 2**31 - 1


class ExecutionError(ValueError):
    pass


class AccumulatorOverflowError(ExecutionError):
    """32-bit accumulator range exceeded; reported instead of wrapping."""


@dataclass
class TensorRange:
    """Observed value range of one tensor over a calibration run."""

    tensor_id: str
    min_r: float
    max_r: float

    def __post_init__(self) -> None:
        self.min_r = float(self.min_r)
        self.max_r = float(self.max_r)
        if not (math.isfinite(self.min_r) and math.isfinite(self.max_r)):
            raise ValueError(f"{self.tensor_id}: non-finite range")
        if self.min_r > self.max_r:
            raise ValueError(f"{self.tensor_id}: min {self.min_r} > max {self.max_r}")

    @property
    def degenerate(self) -> bool:
        return self.min_r == self.max_r

    def merged(self, other: "TensorRange") -> "TensorRange":
        return TensorRange(
            self.tensor_id, min(self.min_r, other.min_r), max(self.max_r, other.max_r)
        )


@dataclass
class InferenceRecord:
    sample_id: str
    predicted_class: int
    confidence: float
    true_label: int

    def __post_init__(self) -> None:
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"{self.sample_id}: confidence {self.confidence} outside [0, 1]")

    @property
    def correct(self) -> bool:
        return self.predicted_class == self.true_label


# ---------------------------------------------------------------------------
# shared window machinery


def _window_patches(
    x: np.ndarray,
    kernel: tuple[int, int],
    stride: tuple[int, int],
    padding: str,
    pad_value,
) -> np.ndarray:
    """(1,H,W,C) -> (1,Ho,Wo,kh,kw,C) window view with constant padding."""
    kh, kw = kernel
    sh, sw = stride
    h, w = x.shape[1:3]
    if padding == "SAME":
        ph = same_padding_amounts(h, kh, sh)
        pw = same_padding_amounts(w, kw, sw)
    else:
        ph = pw = (0, 0)
    oh, ow = conv_output_hw((h, w), kernel, stride, padding)
    xp = np.pad(
        x, ((0, 0), ph, pw, (0, 0)), mode="constant", constant_values=pad_value
    )
    rows = np.arange(oh)[:, None] * sh + np.arange(kh)[None, :]
    cols = np.arange(ow)[:, None] * sw + np.arange(kw)[None, :]
    return xp[:, rows[:, None, :, None], cols[None, :, None, :], :]


def _window_valid_counts(
    hw: tuple[int, int], kernel: tuple[int, int], stride: tuple[int, int], padding: str
) -> np.ndarray:
    """Number of in-bounds cells per pooling window, shape (Ho, Wo)."""
    ones = np.ones((1, hw[0], hw[1], 1), dtype=np.int64)
    patches = _window_patches(ones, kernel, stride, padding, 0)
    return patches.sum(axis=(3, 4))[0, :, :, 0]


def _pool_attrs(node: OpNode) -> tuple[tuple[int, int], tuple[int, int], str]:
    return (
        (node.attrs["kernel_h"], node.attrs["kernel_w"]),
        (node.attrs["stride_h"], node.attrs["stride_w"]),
        node.attrs["padding"],
    )


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return (e / e.sum(axis=-1, keepdims=True)).astype(np.float32)


# ---------------------------------------------------------------------------
# Float32 interpreter


def _f32_node(graph: GraphIR, node: OpNode, env: dict[str, np.ndarray]) -> np.ndarray:
    kind = node.kind
    # Reductions go through einsum(optimize=False): numpy's own fixed-order
    # loops, so results cannot vary with BLAS backend or thread count.
    if kind in (OpKind.CONV2D, OpKind.DEPTHWISE_CONV2D):
        x = env[node.inputs[0]]
        w = graph.tensors[node.inputs[1]].data
        kernel, stride, padding = _pool_attrs(node)
        patches = _window_patches(x, kernel, stride, padding, 0.0)
        if kind == OpKind.CONV2D:
            cols = patches.reshape(-1, kernel[0] * kernel[1] * x.shape[3])
            out = np.einsum("xk,ok->xo", cols, w.reshape(w.shape[0], -1), optimize=False)
            out = out.reshape(patches.shape[:3] + (w.shape[0],))
        else:
            out = np.einsum("nhwijc,ijc->nhwc", patches, w[0], optimize=False)
        if len(node.inputs) == 3:
            out = out + graph.tensors[node.inputs[2]].data
        return out.astype(np.float32)

    if kind == OpKind.FULLY_CONNECTED:
        x = env[node.inputs[0]]
        w = graph.tensors[node.inputs[1]].data
        out = np.einsum("nf,of->no", x, w, optimize=False)
        if len(node.inputs) == 3:
            out = out + graph.tensors[node.inputs[2]].data
        return out.astype(np.float32)

    if kind == OpKind.RELU:
        return np.maximum(env[node.inputs[0]], np.float32(0.0))

    if kind == OpKind.MAX_POOL2D:
        kernel, stride, padding = _pool_attrs(node)
        patches = _window_patches(env[node.inputs[0]], kernel, stride, padding, -np.inf)
        return patches.max(axis=(3, 4)).astype(np.float32)

    if kind == OpKind.AVG_POOL2D:
        x = env[node.inputs[0]]
        kernel, stride, padding = _pool_attrs(node)
        patches = _window_patches(x, kernel, stride, padding, 0.0)
        counts = _window_valid_counts(x.shape[1:3], kernel, stride, padding)
        total = patches.astype(np.float64).sum(axis=(3, 4))
        return (total / counts[None, :, :, None]).astype(np.float32)

    if kind == OpKind.ADD:
        a, b = env[node.inputs[0]], env[node.inputs[1]]
        if a.shape != b.shape:
            raise ExecutionError(f"node {node.id}: Add operand shapes {a.shape} != {b.shape}")
        return a + b

    if kind == OpKind.CONCAT:
        return np.concatenate([env[t] for t in node.inputs], axis=node.attrs["axis"])

    if kind == OpKind.FLATTEN:
        x = env[node.inputs[0]]
        return x.reshape(x.shape[0], -1)

    if kind == OpKind.SOFTMAX:
        return _softmax(env[node.inputs[0]])

    raise ExecutionError(f"node {node.id}: unsupported kind {kind}")


def run_f32(
    graph: GraphIR,
    x: np.ndarray,
    trace: dict[str, np.ndarray] | None = None,
) -> dict[str, np.ndarray]:
    """Execute a Float32 graph on one input; returns {output_id: array}.

    Pass a dict as `trace` to also capture every intermediate activation.
    """
    g, order = infer_shapes(graph)
    if len(g.graph_inputs) != 1:
        raise ExecutionError("run_f32 expects exactly one graph input")
    spec = g.tensors[g.graph_inputs[0]]
    if spec.dtype != DType.FLOAT32:
        raise ExecutionError(f"graph input {spec.id} is {spec.dtype.value}, expected float32")
    x = np.asarray(x, dtype=np.float32)
    if x.shape != spec.shape:
        raise ExecutionError(f"input shape {x.shape} != graph input shape {spec.shape}")
    for t in g.tensors.values():
        if t.is_constant and t.dtype != DType.FLOAT32:
            raise ExecutionError(f"tensor {t.id}: Float32 graph carries {t.dtype.value} constants")

    env: dict[str, np.ndarray] = {spec.id: x}
    nodes = {n.id: n for n in g.nodes}
    for nid in order:
        node = nodes[nid]
        env[node.outputs[0]] = _f32_node(g, node, env)
    if trace is not None:
        trace.update(env)
    return {t: env[t] for t in g.graph_outputs}


# ---------------------------------------------------------------------------
# calibration


def calibrate(
    graph: GraphIR, calibration_set: Sequence[np.ndarray]
) -> dict[str, TensorRange]:
    """Observed min/max per tensor over the calibration runs.

    Activation ranges come from executing the Float32 graph on every
    sample; constant tensors get ranges from their data. Adding samples
    can only widen ranges.
    """
    if len(calibration_set) == 0:
        raise ExecutionError("empty calibration set")
    ranges: dict[str, TensorRange] = {}
    for sample in calibration_set:
        trace: dict[str, np.ndarray] = {}
        run_f32(graph, sample, trace=trace)
        for tid, values in trace.items():
            r = TensorRange(tid, float(values.min()), float(values.max()))
            ranges[tid] = ranges[tid].merged(r) if tid in ranges else r
    for tid, t in graph.tensors.items():
        if t.is_constant:
            ranges[tid] = TensorRange(tid, float(t.data.min()), float(t.data.max()))
    return ranges


def ranges_to_json(ranges: dict[str, TensorRange]) -> dict:
    return {tid: {"min": r.min_r, "max": r.max_r} for tid, r in sorted(ranges.items())}


def ranges_from_json(obj: dict) -> dict[str, TensorRange]:
    return {tid: TensorRange(tid, e["min"], e["max"]) for tid, e in obj.items()}


# ---------------------------------------------------------------------------
# INT8 interpreter


def _check_acc32(acc: np.ndarray, node_id: str) -> None:
    if acc.size and np.abs(acc).max() > _INT32_MAX:
        raise AccumulatorOverflowError(f"node {node_id}: 32-bit accumulator overflow")


def _requant_from_attr(attr: dict) -> tuple[np.ndarray, np.ndarray]:
    return (
        np.asarray(attr["significand"], dtype=np.int64),
        np.asarray(attr["shift"], dtype=np.int64),
    )


def _require_quant(graph: GraphIR, tid: str):
    qp = graph.tensors[tid].quant
    if qp is None:
        raise ExecutionError(f"tensor {tid}: missing quantization parameters")
    return qp


def _assert_inherited(graph: GraphIR, node: OpNode) -> None:
    qin = _require_quant(graph, node.inputs[0])
    qout = _require_quant(graph, node.outputs[0])
    if not qin.equals(qout):
        raise ExecutionError(
            f"node {node.id}: {node.kind.value} requires matching input/output quant params"
        )


def _int8_matmul_group(
    graph: GraphIR,
    node: OpNode,
    env: dict[str, np.ndarray],
    fused_relu: bool,
) -> np.ndarray:
    """Conv2D / DepthwiseConv2D / FullyConnected, optionally with fused ReLU."""
    x = env[node.inputs[0]]
    qx = _require_quant(graph, node.inputs[0])
    w = graph.tensors[node.inputs[1]].data
    if graph.tensors[node.inputs[1]].dtype != DType.INT8:
        raise ExecutionError(f"node {node.id}: weights are not Int8")
    centered = x.astype(np.int64) - qx.zero_point

    if node.kind == OpKind.FULLY_CONNECTED:
        acc = centered @ w.astype(np.int64).T
    else:
        kernel, stride, padding = _pool_attrs(node)
        patches = _window_patches(centered, kernel, stride, padding, 0)
        if node.kind == OpKind.CONV2D:
            cols = patches.reshape(-1, kernel[0] * kernel[1] * x.shape[3])
            acc = cols @ w.reshape(w.shape[0], -1).astype(np.int64).T
            acc = acc.reshape(patches.shape[:3] + (w.shape[0],))
        else:
            acc = np.einsum(
                "nhwijc,ijc->nhwc", patches, w[0].astype(np.int64), optimize=False
            )
    if len(node.inputs) == 3:
        acc = acc + graph.tensors[node.inputs[2]].data.astype(np.int64)
    _check_acc32(acc, node.id)

    if "requant" not in node.attrs:
        raise ExecutionError(f"node {node.id}: missing precomputed requant multipliers")
    sig, shift = _requant_from_attr(node.attrs["requant"])
    qout = _require_quant(graph, node.outputs[0])
    q = requantize_fixed_point(acc, sig, shift) + qout.zero_point
    if fused_relu:
        q = np.maximum(q, qout.zero_point)
    return np.clip(q, QMIN, QMAX).astype(np.int8)


def _int8_node(graph: GraphIR, node: OpNode, env: dict[str, np.ndarray]) -> np.ndarray:
    kind = node.kind
    if kind in (OpKind.CONV2D, OpKind.DEPTHWISE_CONV2D, OpKind.FULLY_CONNECTED):
        return _int8_matmul_group(graph, node, env, fused_relu=False)

    if kind == OpKind.RELU:
        _assert_inherited(graph, node)
        zp = _require_quant(graph, node.inputs[0]).zero_point
        return np.maximum(env[node.inputs[0]], np.int8(zp))

    if kind == OpKind.MAX_POOL2D:
        # max is order-preserving under affine maps with S > 0; QMIN padding
        # can never beat a real cell.
        _assert_inherited(graph, node)
        kernel, stride, padding = _pool_attrs(node)
        patches = _window_patches(env[node.inputs[0]], kernel, stride, padding, QMIN)
        return patches.max(axis=(3, 4))

    if kind == OpKind.AVG_POOL2D:
        x = env[node.inputs[0]]
        qx = _require_quant(graph, node.inputs[0])
        qout = _require_quant(graph, node.outputs[0])
        kernel, stride, padding = _pool_attrs(node)
        centered = x.astype(np.int64) - qx.zero_point
        total = _window_patches(centered, kernel, stride, padding, 0).sum(axis=(3, 4))
        _check_acc32(total, node.id)
        counts = _window_valid_counts(x.shape[1:3], kernel, stride, padding)
        q = np.zeros_like(total)
        for count in np.unique(counts):
            sig, shift = fixed_point_multiplier(qx.scale / (float(count) * qout.scale))
            mask = counts == count
            q[:, mask, :] = requantize_fixed_point(total[:, mask, :], sig, shift)
        q = q + qout.zero_point
        return np.clip(q, QMIN, QMAX).astype(np.int8)

    if kind == OpKind.ADD:
        qa = _require_quant(graph, node.inputs[0])
        qb = _require_quant(graph, node.inputs[1])
        qout = _require_quant(graph, node.outputs[0])
        for key in ("requant_a", "requant_b"):
            if key not in node.attrs:
                raise ExecutionError(f"node {node.id}: missing precomputed requant multipliers")
        # Both operands requantize to the output scale before adding.
        ta = requantize_fixed_point(
            env[node.inputs[0]].astype(np.int64) - qa.zero_point,
            *_requant_from_attr(node.attrs["requant_a"]),
        )
        tb = requantize_fixed_point(
            env[node.inputs[1]].astype(np.int64) - qb.zero_point,
            *_requant_from_attr(node.attrs["requant_b"]),
        )
        q = ta + tb + qout.zero_point
        return np.clip(q, QMIN, QMAX).astype(np.int8)

    if kind == OpKind.CONCAT:
        qout = _require_quant(graph, node.outputs[0])
        parts = []
        for tid in node.inputs:
            qi = _require_quant(graph, tid)
            sig, shift = fixed_point_multiplier(qi.scale / qout.scale)
            t = requantize_fixed_point(env[tid].astype(np.int64) - qi.zero_point, sig, shift)
            parts.append(np.clip(t + qout.zero_point, QMIN, QMAX).astype(np.int8))
        return np.concatenate(parts, axis=node.attrs["axis"])

    if kind == OpKind.FLATTEN:
        _assert_inherited(graph, node)
        x = env[node.inputs[0]]
        return x.reshape(x.shape[0], -1)

    if kind == OpKind.SOFTMAX:
        x = env[node.inputs[0]]
        if x.dtype == np.int8:
            x = dequantize_tensor(x, _require_quant(graph, node.inputs[0]))
        return _softmax(x)

    raise ExecutionError(f"node {node.id}: unsupported kind {kind}")


def run_int8(
    graph: GraphIR,
    x: np.ndarray,
    fused_groups: Sequence[Sequence[str]] | None = None,
    trace: dict[str, np.ndarray] | None = None,
) -> dict[str, np.ndarray]:
    """Execute a quantized graph: quantize input, run integers, dequantize.

    `fused_groups` (node-id sequences from a deployment plan) executes
    producer+ReLU pairs as single kernels without materializing the
    intermediate tensor; the math is unchanged. Returns Float32 outputs.
    """
    if not graph.is_quantized():
        raise ExecutionError("run_int8 requires a fully quantized graph")
    g, order = infer_shapes(graph)
    if len(g.graph_inputs) != 1:
        raise ExecutionError("run_int8 expects exactly one graph input")
    spec = g.tensors[g.graph_inputs[0]]
    x = np.asarray(x, dtype=np.float32)
    if x.shape != spec.shape:
        raise ExecutionError(f"input shape {x.shape} != graph input shape {spec.shape}")

    nodes = {n.id: n for n in g.nodes}
    if fused_groups is None:
        groups = [[nid] for nid in order]
    else:
        groups = [list(grp) for grp in fused_groups]
        seen = [nid for grp in groups for nid in grp]
        if sorted(seen) != sorted(order):
            raise ExecutionError("fused groups must cover every node exactly once")
        pos = {nid: i for i, nid in enumerate(order)}
        groups.sort(key=lambda grp: pos[grp[0]])

    env: dict[str, np.ndarray] = {spec.id: quantize_tensor(x, spec.quant)}
    for grp in groups:
        if (
            len(grp) == 2
            and nodes[grp[0]].kind in (OpKind.CONV2D, OpKind.DEPTHWISE_CONV2D, OpKind.FULLY_CONNECTED)
            and nodes[grp[1]].kind == OpKind.RELU
        ):
            producer, relu = nodes[grp[0]], nodes[grp[1]]
            _assert_inherited(g, relu)
            env[relu.outputs[0]] = _int8_matmul_group(g, producer, env, fused_relu=True)
        else:
            for nid in grp:
                node = nodes[nid]
                env[node.outputs[0]] = _int8_node(g, node, env)
    if trace is not None:
        trace.update(env)

    outputs: dict[str, np.ndarray] = {}
    for tid in g.graph_outputs:
        t = g.tensors[tid]
        value = env[tid]
        outputs[tid] = (
            dequantize_tensor(value, t.quant).astype(np.float32)
            if t.dtype == DType.INT8
            else value
        )
    return outputs


# ---------------------------------------------------------------------------
# dataset evaluation


def run_model(graph: GraphIR, x: np.ndarray) -> dict[str, np.ndarray]:
    """Dispatch to the Float32 or INT8 interpreter based on graph dtypes."""
    return run_int8(graph, x) if graph.is_quantized() else run_f32(graph, x)


def evaluate(
    graph: GraphIR,
    dataset: Iterable[tuple],
) -> tuple[list[InferenceRecord], float]:
    """Per-sample records plus top-1 accuracy.

    Dataset items are (input, label) or (sample_id, input, label); the
    graph must end in Softmax over class logits.
    """
    g, order = infer_shapes(graph)
    last = g.producer_map().get(g.graph_outputs[0])
    if last is None or last.kind != OpKind.SOFTMAX:
        raise ExecutionError("evaluate requires a graph ending in Softmax")
    num_classes = g.tensors[g.graph_outputs[0]].shape[-1]

    records: list[InferenceRecord] = []
    for i, item in enumerate(dataset):
        if len(item) == 3:
            sample_id, x, label = item
        else:
            x, label = item
            sample_id = f"s{i:05d}"
        label = int(label)
        if not 0 <= label < num_classes:
            raise ExecutionError(f"sample {sample_id}: label {label} outside [0, {num_classes})")
        probs = run_model(graph, x)[g.graph_outputs[0]].reshape(-1)
        predicted = int(np.argmax(probs))
        records.append(
            InferenceRecord(
                sample_id=str(sample_id),
                predicted_class=predicted,
                confidence=float(probs[predicted]),
                true_label=label,
            )
        )
    accuracy = float(np.mean([r.correct for r in records])) if records else 0.0
    return records, accuracy


RECORD_FIELDS = ("sample_id", "predicted_class", "confidence", "true_label", "correct")


def write_records_csv(records: Sequence[InferenceRecord], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(RECORD_FIELDS)
        for r in records:
            writer.writerow(
                [r.sample_id, r.predicted_class, repr(r.confidence), r.true_label, int(r.correct)]
            )


def read_records_csv(path: str | Path) -> list[InferenceRecord]:
    records = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            records.append(
                InferenceRecord(
                    sample_id=row["sample_id"],
                    predicted_class=int(row["predicted_class"]),
                    confidence=float(row["confidence"]),
                    true_label=int(row["true_label"]),
                )
            )
    return records


def write_records_json(records: Sequence[InferenceRecord], path: str | Path) -> None:
    payload = [
        {
            "sample_id": r.sample_id,
            "predicted_class": r.predicted_class,
            "confidence": r.confidence,
            "true_label": r.true_label,
            "correct": r.correct,
        }
        for r in records
    ]
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
