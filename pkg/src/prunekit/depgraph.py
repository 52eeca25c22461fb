"""Channel dependency analysis.

Every tensor channel in the graph is traced back to the set of *source*
channels it is built from. Sources are conv output channels, Input channels
and pixel-shuffle outputs. Element-wise adds sum index-aligned channels, so
their sources are united into one group that must be kept or pruned together.
Concat just routes channels with an index offset.

A group is frozen (never prunable) when any member is not a conv channel or
reaches a pixel shuffle or an Output node.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.cluster.hierarchy import DisjointSet

from .nir import NetworkGraph, NodeKind, PASSTHROUGH_KINDS
from .tensorstore import WeightStore, max_abs_per_output_channel

Channel = tuple[str, int]


class MaskError(ValueError):
    """A mask prunes part of a group, or a frozen channel."""


@dataclass(frozen=True)
class ChannelGroup:
    id: int
    members: tuple[Channel, ...]

    def layers(self) -> set[str]:
        return {n for n, _ in self.members}


@dataclass
class ChannelFlow:
    graph: NetworkGraph
    # per node: for each output channel, the source channels summed into it
    origins: dict[str, list[frozenset[Channel]]]
    groups: list[ChannelGroup]
    frozen: frozenset[Channel]
    group_of: dict[Channel, int]

    def conv_input_origins(self, conv_id: str) -> list[frozenset[Channel]]:
        (src,) = self.graph.inputs_of(conv_id)
        return self.origins[src]


def analyze(graph: NetworkGraph) -> ChannelFlow:
    order = graph.topo_order()
    pos = {nid: i for i, nid in enumerate(order)}
    ds = DisjointSet()
    origins: dict[str, list[frozenset[Channel]]] = {}
    frozen_seed: set[Channel] = set()
    all_sources: list[Channel] = []

    def new_sources(nid, count, freeze):
        chans = [(nid, c) for c in range(count)]
        for ch in chans:
            ds.add(ch)
        all_sources.extend(chans)
        if freeze:
            frozen_seed.update(chans)
        return [frozenset([ch]) for ch in chans]

    for nid in order:
        node = graph.nodes[nid]
        ins = [origins[s] for s in graph.inputs_of(nid)]
        k = node.kind
        if k is NodeKind.INPUT:
            origins[nid] = new_sources(nid, node.attrs["channels"], True)
        elif node.is_conv:
            origins[nid] = new_sources(nid, node.attrs["out_channels"], False)
        elif k in PASSTHROUGH_KINDS:
            origins[nid] = ins[0]
        elif k is NodeKind.CONCAT:
            origins[nid] = [s for x in ins for s in x]
        elif k is NodeKind.ELTWISE_ADD:
            merged = []
            for sets in zip(*ins):
                u = frozenset().union(*sets)
                first = next(iter(u), None)
                for ch in u:
                    ds.merge(first, ch)
                merged.append(u)
            origins[nid] = merged
        elif k is NodeKind.PIXEL_SHUFFLE:
            for s in ins[0]:
                frozen_seed.update(s)
            r = node.attrs["factor"]
            origins[nid] = new_sources(nid, len(ins[0]) // (r * r), True)
        elif k is NodeKind.OUTPUT:
            for s in ins[0]:
                frozen_seed.update(s)
            origins[nid] = ins[0]
        else:  # pragma: no cover
            raise ValueError(f"unhandled node kind {k}")

    frozen_roots = {ds[ch] for ch in frozen_seed}
    buckets: dict[Channel, list[Channel]] = {}
    for ch in all_sources:
        buckets.setdefault(ds[ch], []).append(ch)
    frozen = set()
    groups = []
    for root, members in buckets.items():
        if root in frozen_roots or any(not graph.nodes[n].is_conv for n, _ in members):
            frozen.update(members)
            continue
        members.sort(key=lambda ch: (pos[ch[0]], ch[1]))
        groups.append(tuple(members))
    groups.sort(key=lambda m: (pos[m[0][0]], m[0][1]))
    groups = [ChannelGroup(i, m) for i, m in enumerate(groups)]
    group_of = {ch: g.id for g in groups for ch in g.members}
    return ChannelFlow(graph, origins, groups, frozenset(frozen), group_of)


def build_groups(graph: NetworkGraph) -> list[ChannelGroup]:
    """Partition of all prunable (conv, output-channel) pairs into atomic groups."""
    return analyze(graph).groups


def frozen_layers(flow: ChannelFlow) -> set[str]:
    """Conv layers with no prunable output channel at all."""
    convs = flow.graph.conv_ids()
    prunable = {n for g in flow.groups for n, _ in g.members}
    return {n for n in convs if n not in prunable}


def group_stat(group: ChannelGroup, store: WeightStore) -> float:
    """Largest per-channel max-abs kernel weight over the group's members."""
    cache: dict[str, np.ndarray] = {}
    best = 0.0
    for nid, c in group.members:
        if nid not in cache:
            cache[nid] = max_abs_per_output_channel(store, nid)
        best = max(best, float(cache[nid][c]))
    return best


def full_mask(graph: NetworkGraph) -> dict[str, np.ndarray]:
    """All-kept mask over every conv layer."""
    return {nid: np.ones(graph.nodes[nid].attrs["out_channels"], dtype=bool)
            for nid in graph.conv_ids()}


def check_mask(flow: ChannelFlow, mask: dict[str, np.ndarray]) -> None:
    graph = flow.graph
    for nid in graph.conv_ids():
        m = mask.get(nid)
        if m is not None and len(m) != graph.nodes[nid].attrs["out_channels"]:
            raise MaskError(f"{nid}: mask length {len(m)} != out_channels")

    def pruned(ch):
        m = mask.get(ch[0])
        return m is not None and not m[ch[1]]

    for ch in flow.frozen:
        if graph.nodes[ch[0]].is_conv and pruned(ch):
            raise MaskError(f"{ch[0]}: channel {ch[1]} is frozen and cannot be pruned")
    for g in flow.groups:
        states = {pruned(ch) for ch in g.members}
        if len(states) > 1:
            raise MaskError(f"group {g.id} is partially pruned: {list(g.members)}")


def propagate_removal(graph: NetworkGraph, mask: dict[str, np.ndarray],
                      flow: ChannelFlow | None = None) -> dict[str, list[int]]:
    """Input-channel indices each conv loses when ``mask`` is applied.

    Concat offsets are resolved; an input channel disappears when every source
    channel summed into it is pruned.
    """
    flow = flow or analyze(graph)
    check_mask(flow, mask)

    def pruned(ch):
        m = mask.get(ch[0])
        return m is not None and not m[ch[1]]

    plan = {}
    for nid in graph.conv_ids():
        plan[nid] = [j for j, srcs in enumerate(flow.conv_input_origins(nid))
                     if srcs and all(pruned(ch) for ch in srcs)]
    return plan


def kept_inputs(graph: NetworkGraph, mask: dict[str, np.ndarray],
                flow: ChannelFlow | None = None) -> dict[str, np.ndarray]:
    """Boolean keep-vector over each conv's original input channels."""
    plan = propagate_removal(graph, mask, flow)
    out = {}
    for nid, removed in plan.items():
        keep = np.ones(graph.nodes[nid].attrs["in_channels"], dtype=bool)
        keep[removed] = False
        out[nid] = keep
    return out


def groups_to_json(groups: list[ChannelGroup]) -> dict:
    return {"groups": [{"id": g.id, "members": [[n, c] for n, c in g.members]}
                       for g in groups]}
