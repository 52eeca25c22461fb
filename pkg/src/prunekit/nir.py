"""Network IR: a typed operator DAG with channel/spatial shape inference.

Graphs are treated as immutable once built. Rewrites (see ``pruner.apply_mask``)
return new graphs. Shape annotations are never stored; they are re-inferred
from ``input_resolution`` whenever needed.
"""

from __future__ import annotations

import copy
import enum
import json
from collections import defaultdict, deque
from dataclasses import dataclass, field
from typing import Any



class NodeKind(str, enum.Enum):
    INPUT = "Input"
    OUTPUT = "Output"
    CONV2D = "Conv2d"
    CONV2D_TRANSPOSE = "Conv2dTranspose"
    ELTWISE_ADD = "EltwiseAdd"
    CONCAT = "Concat"
    PIXEL_SHUFFLE = "PixelShuffle"
    LEAKY_RELU = "LeakyRelu"
    RELU = "Relu"
    MAX_POOL2D = "MaxPool2d"


CONV_KINDS = (NodeKind.CONV2D, NodeKind.CONV2D_TRANSPOSE)
# channel-transparent: output channel c depends only on input channel c
PASSTHROUGH_KINDS = (NodeKind.RELU, NodeKind.LEAKY_RELU, NodeKind.MAX_POOL2D)


class GraphError(ValueError):
    """Raised for malformed graphs or graph files."""


class ShapeError(GraphError):
    pass


@dataclass(frozen=True)
class Node:
    id: str
    kind: NodeKind
    attrs: dict[str, Any] = field(default_factory=dict, hash=False, compare=True)

    @property
    def is_conv(self) -> bool:
        return self.kind in CONV_KINDS


@dataclass(frozen=True)
class Edge:
    src: str
    dst: str
    dst_slot: int = 0
    src_slot: int = 0


Shape = tuple[int, int, int]


@dataclass
class NetworkGraph:
    nodes: dict[str, Node]
    edges: list[Edge]
    input_resolution: tuple[int, int]

    # -- queries -----------------------------------------------------------

    def inputs_of(self, node_id: str) -> list[str]:
        """Producer ids feeding ``node_id``, ordered by consumer slot."""
        es = sorted((e for e in self.edges if e.dst == node_id), key=lambda e: e.dst_slot)
        return [e.src for e in es]

    def consumers_of(self, node_id: str) -> list[str]:
        return [e.dst for e in self.edges if e.src == node_id]

    def conv_ids(self) -> list[str]:
        return [n for n in self.topo_order() if self.nodes[n].is_conv]

    def input_id(self) -> str:
        ids = [n.id for n in self.nodes.values() if n.kind is NodeKind.INPUT]
        if len(ids) != 1:
            raise GraphError(f"expected exactly one Input node, found {len(ids)}")
        return ids[0]

    def output_ids(self) -> list[str]:
        return [n.id for n in self.nodes.values() if n.kind is NodeKind.OUTPUT]

    def topo_order(self) -> list[str]:
        """Kahn's algorithm; ties broken by node insertion order."""
        order_index = {nid: i for i, nid in enumerate(self.nodes)}
        indeg = {nid: 0 for nid in self.nodes}
        succ = defaultdict(list)
        for e in self.edges:
            if e.src in indeg and e.dst in indeg:
                indeg[e.dst] += 1
                succ[e.src].append(e.dst)
        ready = deque(sorted((n for n, d in indeg.items() if d == 0), key=order_index.get))
        out = []
        while ready:
            n = ready.popleft()
            out.append(n)
            newly = []
            for m in succ[n]:
                indeg[m] -= 1
                if indeg[m] == 0:
                    newly.append(m)
            ready.extend(sorted(newly, key=order_index.get))
        if len(out) != len(self.nodes):
            raise GraphError("graph contains a cycle")
        return out

    # -- serialization -----------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "version": 1,
            "input_resolution": list(self.input_resolution),
            "nodes": [
                {"id": n.id, "kind": n.kind.value, "attrs": dict(sorted(n.attrs.items()))}
                for n in self.nodes.values()
            ],
            "edges": [
                {"from": e.src, "from_slot": e.src_slot, "to": e.dst, "to_slot": e.dst_slot}
                for e in self.edges
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkGraph":
        if d.get("version") != 1:
            raise GraphError(f"unsupported graph version {d.get('version')!r}")
        nodes: dict[str, Node] = {}
        for nd in d["nodes"]:
            nid = nd.get("id")
            if not isinstance(nid, str) or not nid:
                raise GraphError(f"node id must be a non-empty string, got {nid!r}")
            if nid in nodes:
                raise GraphError(f"duplicate node id {nid!r}")
            try:
                kind = NodeKind(nd["kind"])
            except ValueError:
                raise GraphError(f"node {nid!r}: unknown kind {nd['kind']!r}") from None
            nodes[nid] = Node(nid, kind, dict(nd.get("attrs", {})))
        edges = [
            Edge(e["from"], e["to"], int(e.get("to_slot", 0)), int(e.get("from_slot", 0)))
            for e in d["edges"]
        ]
        h, w = d["input_resolution"]
        return cls(nodes, edges, (int(h), int(w)))

    @classmethod
    def from_json(cls, text: str) -> "NetworkGraph":
        return cls.from_dict(json.loads(text))

    def save(self, path) -> None:
        with open(path, "w") as f:
            f.write(self.to_json())

    @classmethod
    def load(cls, path) -> "NetworkGraph":
        with open(path) as f:
            return cls.from_json(f.read())

    def copy(self) -> "NetworkGraph":
        return copy.deepcopy(self)


class GraphBuilder:
    """Small helper for constructing graphs in code.

    Every ``add_*`` method returns the new node id so calls chain naturally::

        b = GraphBuilder((16, 16))
        x = b.input(1)
        x = b.conv(x, 8, 3, name="conv1")
        b.output(x)
        graph = b.build()
    """

    def __init__(self, input_resolution: tuple[int, int]):
        self.input_resolution = tuple(input_resolution)
        self._nodes: dict[str, Node] = {}
        self._edges: list[Edge] = []
        self._channels: dict[str, int] = {}
        self._count = 0

    def _name(self, prefix: str, name: str | None) -> str:
        if name is None:
            self._count += 1
            name = f"{prefix}{self._count}"
        if name in self._nodes:
            raise GraphError(f"duplicate node id {name!r}")
        return name

    def add(self, kind: NodeKind, inputs: list[str], attrs: dict | None = None,
            name: str | None = None, channels: int | None = None) -> str:
        nid = self._name(kind.value.lower(), name)
        self._nodes[nid] = Node(nid, kind, dict(attrs or {}))
        for slot, src in enumerate(inputs):
            self._edges.append(Edge(src, nid, slot))
        if channels is None and inputs:
            channels = self._channels.get(inputs[0])
        if channels is not None:
            self._channels[nid] = channels
        return nid

    def input(self, channels: int, name: str = "input") -> str:
        return self.add(NodeKind.INPUT, [], {"channels": channels}, name, channels)

    def output(self, x: str, name: str = "output") -> str:
        return self.add(NodeKind.OUTPUT, [x], {}, name)

    def conv(self, x: str, out_channels: int, kernel: int, stride: int = 1,
             padding: int | None = None, bias: bool = True, name: str | None = None) -> str:
        if padding is None:
            padding = kernel // 2
        attrs = {"in_channels": self._channels[x], "out_channels": out_channels,
                 "kernel": kernel, "stride": stride, "padding": padding, "bias": bias}
        return self.add(NodeKind.CONV2D, [x], attrs, name, out_channels)

    def conv_transpose(self, x: str, out_channels: int, kernel: int, stride: int,
                       padding: int = 0, bias: bool = True, name: str | None = None) -> str:
        attrs = {"in_channels": self._channels[x], "out_channels": out_channels,
                 "kernel": kernel, "stride": stride, "padding": padding, "bias": bias}
        return self.add(NodeKind.CONV2D_TRANSPOSE, [x], attrs, name, out_channels)

    def relu(self, x: str, name: str | None = None) -> str:
        return self.add(NodeKind.RELU, [x], {}, name)

    def leaky_relu(self, x: str, slope: float = 0.2, name: str | None = None) -> str:
        return self.add(NodeKind.LEAKY_RELU, [x], {"slope": slope}, name)

    def max_pool(self, x: str, kernel: int = 2, stride: int | None = None,
                 name: str | None = None) -> str:
        return self.add(NodeKind.MAX_POOL2D, [x],
                        {"kernel": kernel, "stride": stride or kernel}, name)

    def add_(self, a: str, b: str, name: str | None = None) -> str:
        return self.add(NodeKind.ELTWISE_ADD, [a, b], {}, name)

    def concat(self, xs: list[str], name: str | None = None) -> str:
        return self.add(NodeKind.CONCAT, list(xs), {}, name,
                        sum(self._channels[x] for x in xs))

    def pixel_shuffle(self, x: str, factor: int, name: str | None = None) -> str:
        return self.add(NodeKind.PIXEL_SHUFFLE, [x], {"factor": factor}, name,
                        self._channels[x] // (factor * factor))

    def build(self) -> NetworkGraph:
        return NetworkGraph(dict(self._nodes), list(self._edges), self.input_resolution)


# -- shape inference -------------------------------------------------------

def conv_out_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def conv_transpose_out_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size - 1) * stride - 2 * padding + kernel


def _node_out_shape(node: Node, in_shapes: list[Shape], resolution) -> Shape:
    k = node.kind
    a = node.attrs
    if k is NodeKind.INPUT:
        return (int(a["channels"]), *resolution)
    if not in_shapes:
        raise ShapeError(f"{node.id}: no inputs")
    c, h, w = in_shapes[0]
    if k in (NodeKind.OUTPUT, NodeKind.RELU, NodeKind.LEAKY_RELU):
        return (c, h, w)
    if k is NodeKind.CONV2D:
        if c != a["in_channels"]:
            raise ShapeError(f"{node.id}: expects {a['in_channels']} input channels, got {c}")
        shape = (a["out_channels"], conv_out_size(h, a["kernel"], a["stride"], a["padding"]),
                 conv_out_size(w, a["kernel"], a["stride"], a["padding"]))
    elif k is NodeKind.CONV2D_TRANSPOSE:
        if c != a["in_channels"]:
            raise ShapeError(f"{node.id}: expects {a['in_channels']} input channels, got {c}")
        shape = (a["out_channels"],
                 conv_transpose_out_size(h, a["kernel"], a["stride"], a["padding"]),
                 conv_transpose_out_size(w, a["kernel"], a["stride"], a["padding"]))
    elif k is NodeKind.MAX_POOL2D:
        shape = (c, conv_out_size(h, a["kernel"], a["stride"], 0),
                 conv_out_size(w, a["kernel"], a["stride"], 0))
    elif k is NodeKind.PIXEL_SHUFFLE:
        r = a["factor"]
        if r < 1 or c % (r * r):
            raise ShapeError(f"{node.id}: {c} channels not divisible by factor^2={r * r}")
        shape = (c // (r * r), h * r, w * r)
    elif k is NodeKind.ELTWISE_ADD:
        if any(s != in_shapes[0] for s in in_shapes):
            raise ShapeError(f"{node.id}: operand shapes differ: {in_shapes}")
        shape = in_shapes[0]
    elif k is NodeKind.CONCAT:
        if any(s[1:] != (h, w) for s in in_shapes):
            raise ShapeError(f"{node.id}: spatial sizes differ: {in_shapes}")
        shape = (sum(s[0] for s in in_shapes), h, w)
    else:  # pragma: no cover
        raise ShapeError(f"{node.id}: unhandled kind {k}")
    if shape[1] <= 0 or shape[2] <= 0:
        raise ShapeError(f"{node.id}: non-positive spatial size {shape}")
    return shape


def node_shapes(graph: NetworkGraph) -> dict[str, Shape]:
    """Output (C, H, W) of every node."""
    shapes: dict[str, Shape] = {}
    for nid in graph.topo_order():
        ins = [shapes[s] for s in graph.inputs_of(nid)]
        shapes[nid] = _node_out_shape(graph.nodes[nid], ins, graph.input_resolution)
    return shapes


def infer_shapes(graph: NetworkGraph) -> dict[Edge, Shape]:
    """Annotate every edge with the (C, H, W) of the tensor it carries."""
    shapes = node_shapes(graph)
    return {e: shapes[e.src] for e in graph.edges}


# -- validation ------------------------------------------------------------

_ARITY = {
    NodeKind.INPUT: (0, 0),
    NodeKind.OUTPUT: (1, 1),
    NodeKind.CONV2D: (1, 1),
    NodeKind.CONV2D_TRANSPOSE: (1, 1),
    NodeKind.RELU: (1, 1),
    NodeKind.LEAKY_RELU: (1, 1),
    NodeKind.MAX_POOL2D: (1, 1),
    NodeKind.PIXEL_SHUFFLE: (1, 1),
    NodeKind.ELTWISE_ADD: (2, None),
    NodeKind.CONCAT: (1, None),
}


def validate(graph: NetworkGraph) -> list[str]:
    """Return a list of ``"<node-id>: <rule>: <detail>"`` violations (empty if valid)."""
    out = []
    kinds = [n.kind for n in graph.nodes.values()]
    if kinds.count(NodeKind.INPUT) != 1:
        out.append(f"<graph>: input-count: expected exactly one Input, found {kinds.count(NodeKind.INPUT)}")
    if NodeKind.OUTPUT not in kinds:
        out.append("<graph>: output-count: no Output node")

    for e in graph.edges:
        for end in (e.src, e.dst):
            if end not in graph.nodes:
                out.append(f"{end}: dangling-edge: edge {e.src}->{e.dst} references unknown node")
        if e.src_slot != 0:
            out.append(f"{e.src}: output-slot: nodes have a single output slot, got {e.src_slot}")

    for nid, node in graph.nodes.items():
        slots = sorted(e.dst_slot for e in graph.edges if e.dst == nid)
        lo, hi = _ARITY[node.kind]
        if len(slots) < lo or (hi is not None and len(slots) > hi):
            out.append(f"{nid}: arity: {node.kind.value} takes {lo}..{hi or 'n'} inputs, got {len(slots)}")
        elif slots != list(range(len(slots))):
            out.append(f"{nid}: slots: input slots must be 0..n-1, got {slots}")
        if node.is_conv:
            for key in ("in_channels", "out_channels", "kernel", "stride", "padding"):
                if key not in node.attrs:
                    out.append(f"{nid}: attrs: missing {key!r}")
            if node.attrs.get("kernel", 1) < 1 or node.attrs.get("stride", 1) < 1:
                out.append(f"{nid}: attrs: kernel and stride must be positive")
        if node.kind is NodeKind.PIXEL_SHUFFLE and node.attrs.get("factor", 0) < 1:
            out.append(f"{nid}: attrs: pixel shuffle factor must be >= 1")
    if out:
        return out

    try:
        order = graph.topo_order()
    except GraphError:
        return ["<graph>: acyclicity: graph contains a cycle"]

    shapes: dict[str, Shape] = {}
    for nid in order:
        node = graph.nodes[nid]
        ins = [shapes.get(s) for s in graph.inputs_of(nid)]
        if any(s is None for s in ins):
            continue
        try:
            shapes[nid] = _node_out_shape(node, ins, graph.input_resolution)
        except ShapeError as exc:
            rule = {NodeKind.ELTWISE_ADD: "add-shape", NodeKind.CONCAT: "concat-shape",
                    NodeKind.PIXEL_SHUFFLE: "pixel-shuffle"}.get(node.kind, "channels")
            out.append(f"{nid}: {rule}: {exc}")
    return out


# -- reference topologies --------------------------------------------------

def build_sid_topology(input_resolution=(1424, 2128)) -> NetworkGraph:
    """Learning-to-see-in-the-dark U-Net on a packed 4-channel Bayer tensor.

    Encoder pairs of 3x3 convs (32, 64, 128, 256, 512) with 2x2 max pooling,
    decoder 2x2 stride-2 transposed convs concatenated with the matching
    encoder output, a 1x1 conv to 12 channels and a depth-to-space by 2.
    """
    b = GraphBuilder(input_resolution)
    x = b.input(4)
    widths = [32, 64, 128, 256, 512]
    skips = []
    for lvl, ch in enumerate(widths, start=1):
        x = b.leaky_relu(b.conv(x, ch, 3, name=f"conv{lvl}_1"), 0.2, name=f"lrelu{lvl}_1")
        x = b.leaky_relu(b.conv(x, ch, 3, name=f"conv{lvl}_2"), 0.2, name=f"lrelu{lvl}_2")
        if lvl < len(widths):
            skips.append(x)
            x = b.max_pool(x, 2, name=f"pool{lvl}")
    for lvl, ch in zip(range(6, 10), reversed(widths[:-1])):
        up = b.conv_transpose(x, ch, 2, 2, name=f"up{lvl}")
        x = b.concat([up, skips.pop()], name=f"concat{lvl}")
        x = b.leaky_relu(b.conv(x, ch, 3, name=f"conv{lvl}_1"), 0.2, name=f"lrelu{lvl}_1")
        x = b.leaky_relu(b.conv(x, ch, 3, name=f"conv{lvl}_2"), 0.2, name=f"lrelu{lvl}_2")
    x = b.conv(x, 12, 1, name="conv10")
    x = b.pixel_shuffle(x, 2, name="depth_to_space")
    b.output(x)
    return b.build()


def build_edsr_topology(input_resolution=(1020, 1020), n_blocks: int = 16,
                        n_feats: int = 64, scale: int = 2) -> NetworkGraph:
    """EDSR baseline super-resolution network (x2 by default)."""
    b = GraphBuilder(input_resolution)
    x = b.input(3)
    head = b.conv(x, n_feats, 3, name="head")
    x = head
    for i in range(n_blocks):
        r = b.conv(x, n_feats, 3, name=f"block{i}_conv1")
        r = b.relu(r, name=f"block{i}_relu")
        r = b.conv(r, n_feats, 3, name=f"block{i}_conv2")
        x = b.add_(r, x, name=f"block{i}_add")
    x = b.conv(x, n_feats, 3, name="body_end")
    x = b.add_(x, head, name="long_skip")
    x = b.conv(x, n_feats * scale * scale, 3, name="upsample")
    x = b.pixel_shuffle(x, scale, name="pixel_shuffle")
    x = b.conv(x, 3, 3, name="tail")
    b.output(x)
    return b.build()



def build_denoise_topology(input_resolution=(16, 16), width: int = 16,
                           channels: int = 1) -> NetworkGraph:
    """Three-conv ReLU denoiser for desk-scale pruning experiments."""
    b = GraphBuilder(input_resolution)
    x = b.input(channels)
    x = b.relu(b.conv(x, width, 3, name="conv1"), name="relu1")
    x = b.relu(b.conv(x, width, 3, name="conv2"), name="relu2")
    x = b.conv(x, channels, 3, name="conv3")
    b.output(x)
    return b.build()


TOPOLOGIES = {
    "sid": build_sid_topology,
    "edsr": build_edsr_topology,
    "denoise3": build_denoise_topology,
}
