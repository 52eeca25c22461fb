"""MAC / weight / activation / bandwidth accounting for conv layers.

Conventions (chosen to reproduce the SID and EDSR reference totals):

* weights count kernel elements only, biases excluded;
* one multiply-accumulate is one MAC;
* a transposed conv does ``i*o*k*k`` MACs per *input* pixel;
* activations of a layer are the elements it reads plus the elements it
  writes, i.e. its input tensor and its output tensor;
* bandwidth = (weights + activations) * bytes_per_element.

All counts are Python ints, so totals are exact.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import depgraph
from .nir import NetworkGraph, Node, NodeKind, Shape, node_shapes

# floor for MAC efficiency so threshold products stay positive
MAC_EFFICIENCY_FLOOR = 0.01


@dataclass(frozen=True)
class LayerCost:
    node_id: str
    macs: int
    weights: int
    input_activations: int
    output_activations: int
    r: float | None  # log10(macs / weights); None for an empty layer

    @property
    def activations(self) -> int:
        return self.input_activations + self.output_activations


@dataclass
class NetworkCost:
    layers: list[LayerCost]
    bytes_per_element: int = 4
    sparsity: float = 0.0
    macs: int = field(init=False)
    weights: int = field(init=False)
    activations: int = field(init=False)

    def __post_init__(self):
        self.macs = sum(l.macs for l in self.layers)
        self.weights = sum(l.weights for l in self.layers)
        self.activations = sum(l.activations for l in self.layers)

    @property
    def bandwidth(self) -> int:
        return bandwidth_bytes(self, self.bytes_per_element)

    def layer(self, node_id: str) -> LayerCost:
        for l in self.layers:
            if l.node_id == node_id:
                return l
        raise KeyError(node_id)


def mac_efficiency(macs: int, weights: int) -> float | None:
    """log10(MAC / weight); clamped below at MAC_EFFICIENCY_FLOOR."""
    if macs <= 0 or weights <= 0:
        return None
    return max(math.log10(macs / weights), MAC_EFFICIENCY_FLOOR)


def layer_cost(node: Node, in_shape: Shape, out_shape: Shape,
               kept_in: int | None = None, kept_out: int | None = None) -> LayerCost:
    if not node.is_conv:
        raise ValueError(f"{node.id}: not a convolution ({node.kind.value})")
    a = node.attrs
    i = a["in_channels"] if kept_in is None else kept_in
    o = a["out_channels"] if kept_out is None else kept_out
    k = a["kernel"]
    _, hi, wi = in_shape
    _, ho, wo = out_shape
    weights = i * o * k * k
    extent = hi * wi if node.kind is NodeKind.CONV2D_TRANSPOSE else ho * wo
    macs = weights * extent
    return LayerCost(node.id, macs, weights, i * hi * wi, o * ho * wo,
                     mac_efficiency(macs, weights))


def _kept_counts(graph, mask, flow=None):
    if mask is None:
        return {}, {}
    kin = depgraph.kept_inputs(graph, mask, flow)
    kout = {nid: int(np.count_nonzero(m)) for nid, m in mask.items()}
    return {n: int(np.count_nonzero(v)) for n, v in kin.items()}, kout


def layer_costs(graph: NetworkGraph, mask=None, flow=None) -> list[LayerCost]:
    shapes = node_shapes(graph)
    kin, kout = _kept_counts(graph, mask, flow)
    out = []
    for nid in graph.conv_ids():
        (src,) = graph.inputs_of(nid)
        out.append(layer_cost(graph.nodes[nid], shapes[src], shapes[nid],
                              kin.get(nid), kout.get(nid)))
    return out


def network_cost(graph: NetworkGraph, mask=None, bytes_per_element: int = 4,
                 flow=None) -> NetworkCost:
    """Per-layer and total costs of ``graph`` with ``mask`` applied (if any)."""
    layers = layer_costs(graph, mask, flow)
    sparsity = network_sparsity(graph, mask, flow) if mask is not None else 0.0
    return NetworkCost(layers, bytes_per_element, sparsity)


def layer_sparsity(i: int, o: int, pruned_in: int, pruned_out: int) -> float:
    """1 - ((i - i')(o - o')) / (i * o)."""
    return 1.0 - ((i - pruned_in) * (o - pruned_out)) / (i * o)


def network_sparsity(reference: NetworkGraph, mask, flow=None) -> float:
    """Fraction of the reference network's kernel weights removed by ``mask``."""
    if mask is None:
        return 0.0
    kin, kout = _kept_counts(reference, mask, flow)
    total = kept = 0
    for nid in reference.conv_ids():
        a = reference.nodes[nid].attrs
        kk = a["kernel"] ** 2
        total += a["in_channels"] * a["out_channels"] * kk
        kept += kin.get(nid, a["in_channels"]) * kout.get(nid, a["out_channels"]) * kk
    return 1.0 - kept / total if total else 0.0


def bandwidth_bytes(cost: NetworkCost, bytes_per_element: int) -> int:
    if bytes_per_element not in (1, 2, 4):
        raise ValueError(f"bytes_per_element must be 1, 2 or 4, got {bytes_per_element}")
    return (cost.weights + cost.activations) * bytes_per_element


# bw_elements is bandwidth at one byte per element; bw_bytes uses the
# configured element width
REPORT_COLUMNS = ("layer", "macs", "weights", "activations", "bw_elements", "bw_bytes", "r",
                  "sparsity", "pct_of_original")


def cost_rows(cost: NetworkCost, reference: NetworkCost | None = None) -> list[dict]:
    """Table-like rows: one per layer plus a TOTAL row."""
    ref = {l.node_id: l for l in reference.layers} if reference else {}
    bpe = cost.bytes_per_element
    rows = []
    for l in cost.layers:
        r0 = ref.get(l.node_id)
        rows.append({
            "layer": l.node_id, "macs": l.macs, "weights": l.weights,
            "activations": l.activations,
            "bw_elements": l.weights + l.activations,
            "bw_bytes": (l.weights + l.activations) * bpe,
            "r": "" if l.r is None else f"{l.r:.6f}",
            "sparsity": f"{1 - l.weights / r0.weights:.6f}" if r0 and r0.weights else "0.000000",
            "pct_of_original": f"{100 * l.macs / r0.macs:.2f}" if r0 and r0.macs else "100.00",
        })
    base = reference or cost
    rows.append({
        "layer": "TOTAL", "macs": cost.macs, "weights": cost.weights,
        "activations": cost.activations, "bw_elements": cost.weights + cost.activations,
        "bw_bytes": cost.bandwidth, "r": "",
        "sparsity": f"{1 - cost.weights / base.weights:.6f}" if base.weights else "0.000000",
        "pct_of_original": f"{100 * cost.macs / base.macs:.2f}" if base.macs else "100.00",
    })
    return rows
