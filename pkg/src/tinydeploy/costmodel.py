"""Latency / energy / RAM / Flash estimation for deployment plans.

MAC counts follow the usual closed forms (Conv2D =
outH*outW*outC*kh*kw*inC, DepthwiseConv2D = outH*outW*C*kh*kw,
FullyConnected = in*out) with 1 MAC = 2 ops. Ops without a MAC form
(pools, elementwise, Softmax, reshapes) use a byte-count proxy: one op
per byte moved (inputs read + outputs written). Group latency is
ops / (throughput * utilization) plus one dispatch overhead per group;
energy is active power * time per group plus idle power over the whole
makespan.

Flash is the sum of constant-tensor payloads, quantization tables and a
fixed per-op metadata overhead. All power/overhead numbers come from the
hardware profile and are illustrative, not measured.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

from .graph import GraphIR, OpKind, OpNode
from .hardware import HardwareProfile
from .quantization import quantization_table_bytes

MAC_OPS = (OpKind.CONV2D, OpKind.DEPTHWISE_CONV2D, OpKind.FULLY_CONNECTED)


@dataclass
class GroupCost:
    group_id: str
    target: str
    macs: int
    latency_us: float
    energy_uj: float

    def to_json(self) -> dict:
        return {
            "group": self.group_id,
            "target": self.target,
            "macs": self.macs,
            "latency_us": self.latency_us,
            "energy_uj": self.energy_uj,
        }


@dataclass
class CostEstimate:
    latency_ms: float
    energy_mj: float
    ram_peak_bytes: int
    flash_bytes: int
    per_group_breakdown: list[GroupCost] = field(default_factory=list)
    budget_flags: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "latency_ms": self.latency_ms,
            "energy_mj": self.energy_mj,
            "ram_peak_bytes": self.ram_peak_bytes,
            "flash_bytes": self.flash_bytes,
            "per_group_breakdown": [g.to_json() for g in self.per_group_breakdown],
            "budget_flags": dict(self.budget_flags),
        }


def node_macs(graph: GraphIR, node: OpNode) -> int:
    """Multiply-accumulate count; 0 for ops costed by the byte proxy."""
    if node.kind not in MAC_OPS:
        return 0
    out = graph.tensors[node.outputs[0]].shape
    w = graph.tensors[node.inputs[1]].shape
    if node.kind == OpKind.CONV2D:
        _, oh, ow, oc = out
        _, kh, kw, ic = w
        return oh * ow * oc * kh * kw * ic
    if node.kind == OpKind.DEPTHWISE_CONV2D:
        _, oh, ow, c = out
        _, kh, kw, _ = w
        return oh * ow * c * kh * kw
    return w[0] * w[1]  # FullyConnected: out * in


def node_proxy_ops(graph: GraphIR, node: OpNode) -> int:
    """Byte-count proxy for non-MAC ops: bytes read plus bytes written."""
    if node.kind in MAC_OPS:
        return 0
    total = 0
    for tid in node.inputs:
        t = graph.tensors[tid]
        if not t.is_constant:
            total += t.size_bytes
    for tid in node.outputs:
        total += graph.tensors[tid].size_bytes
    return total


def estimate_group(
    group: Sequence[str],
    target: str,
    profile: HardwareProfile,
    graph: GraphIR,
) -> GroupCost:
    """(macs, latency, energy) for one fused group on one target."""
    nodes = {n.id: n for n in graph.nodes}
    macs = 0
    ops = 0
    for nid in group:
        if nid not in nodes:
            raise ValueError(f"plan group references unknown node {nid}; wrong model?")
        node = nodes[nid]
        macs += node_macs(graph, node)
        ops += 2 * node_macs(graph, node) + node_proxy_ops(graph, node)
    latency_us = ops / profile.throughput_ops_per_us(target) + profile.per_op_overhead_us
    energy_uj = latency_us * profile.active_power_w(target)
    return GroupCost(
        group_id="+".join(group),
        target=target,
        macs=macs,
        latency_us=latency_us,
        energy_uj=energy_uj,
    )


def flash_bytes(graph: GraphIR, profile: HardwareProfile) -> int:
    """Constant payload bytes + quantization tables + per-op metadata."""
    payload = sum(t.size_bytes for t in graph.tensors.values() if t.is_constant)
    tables = quantization_table_bytes(graph)
    metadata = profile.op_metadata_bytes * len(graph.nodes)
    return payload + tables + metadata


def estimate_deployment(plan, graph: GraphIR, profile: HardwareProfile) -> CostEstimate:
    """Full-plan estimate; latency is the schedule makespan, not the op sum."""
    breakdown = []
    target_of = {entry.group_id: entry.target for entry in plan.timeline}
    for group in plan.fused_groups:
        gid = "+".join(group)
        breakdown.append(estimate_group(group, target_of[gid], profile, graph))

    makespan_us = max((entry.end_us for entry in plan.timeline), default=0.0)
    active_uj = sum(g.energy_uj for g in breakdown)
    energy_mj = (active_uj + profile.idle_power_w * makespan_us) / 1000.0
    latency_ms = makespan_us / 1000.0

    ram_peak = plan.memory_plan.arena_peak_bytes + profile.runtime_ram_overhead_bytes
    flash = flash_bytes(graph, profile)
    deadline_ms = 1000.0 / profile.deadline_fps
    flags = {
        "ram_ok": ram_peak <= profile.ram_budget_bytes,
        "flash_ok": flash <= profile.flash_budget_bytes,
        "deadline_ok": latency_ms <= deadline_ms,
    }
    return CostEstimate(
        latency_ms=latency_ms,
        energy_mj=energy_mj,
        ram_peak_bytes=ram_peak,
        flash_bytes=flash,
        per_group_breakdown=breakdown,
        budget_flags=flags,
    )
