"""Network graphs, unique channel assignment and parameter accounting.

A network is a DAG whose nodes are feature-map depths and whose edges are
operators.  Conv edges (``conv``, ``pointwise_conv``) may change depth;
every other edge (``depthwise``, ``skip``, ``pool``, ``other_nonconv``) must
preserve it.  :func:`assign_unique_channels` finds the independent channel
variables: each node depth becomes a sum of variables (plus a constant for
depths tied to the input), and concatenation nodes hold the sum of their
inbound contributions.
"""
from __future__ import annotations

import heapq
import json
import re
from collections import defaultdict
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import yaml

from .errors import ConstraintConflict, GraphError, InputError

COMBINE_MODES = ("single", "summation", "concatenation")
CONV_KINDS = ("conv", "pointwise_conv")
NONCONV_KINDS = ("depthwise", "skip", "pool", "other_nonconv")
EDGE_KINDS = CONV_KINDS + NONCONV_KINDS
WEIGHTED_KINDS = CONV_KINDS + ("depthwise",)


def natural_key(s: str):
    return [int(tok) if tok.isdigit() else tok for tok in re.split(r"(\d+)", s)]


@dataclass(frozen=True)
class Node:
    id: str
    combine: str = "single"
    width: int | None = None


@dataclass(frozen=True)
class Edge:
    id: str
    tail: str
    head: str
    kind: str
    kernel: tuple[int, int] = (1, 1)
    bias: bool = False
    bn: bool = False
    width: int | None = None

    @property
    def is_conv(self) -> bool:
        return self.kind in CONV_KINDS

    @property
    def has_weights(self) -> bool:
        return self.kind in WEIGHTED_KINDS


@dataclass
class NetGraph:
    nodes: list[Node]
    edges: list[Edge]
    input_channels: int = 3
    num_classes: int = 10
    name: str = ""

    def __post_init__(self):
        self.nodes = list(self.nodes)
        self.edges = list(self.edges)
        self._nodes = {}
        for n in self.nodes:
            if n.id in self._nodes:
                raise GraphError(f"duplicate node id {n.id!r}", node=n.id)
            if n.combine not in COMBINE_MODES:
                raise GraphError(f"node {n.id!r}: unknown combine mode {n.combine!r}", node=n.id)
            self._nodes[n.id] = n
        self._edges = {}
        self._in = defaultdict(list)
        self._out = defaultdict(list)
        for e in self.edges:
            if e.id in self._edges or e.id in self._nodes:
                raise GraphError(f"duplicate id {e.id!r} (edge ids must differ from all node ids)",
                                 edge=e.id)
            if e.kind not in EDGE_KINDS:
                raise GraphError(f"edge {e.id!r}: unknown kind {e.kind!r}", edge=e.id)
            for end in (e.tail, e.head):
                if end not in self._nodes:
                    raise GraphError(f"edge {e.id!r} references unknown node {end!r}", edge=e.id)
            if len(e.kernel) != 2 or min(e.kernel) < 1:
                raise GraphError(f"edge {e.id!r}: bad kernel {e.kernel}", edge=e.id)
            if e.kind == "pointwise_conv" and tuple(e.kernel) != (1, 1):
                raise GraphError(f"edge {e.id!r}: pointwise kernel must be 1x1", edge=e.id)
            self._edges[e.id] = e
            self._in[e.head].append(e)
            self._out[e.tail].append(e)
        for n in self.nodes:
            k = len(self._in[n.id])
            if n.combine == "single" and k > 1:
                raise GraphError(f"node {n.id!r} has {k} inbound edges but combine mode 'single'",
                                 node=n.id)
            if n.combine == "summation" and k < 1:
                raise GraphError(f"summation node {n.id!r} needs an inbound edge", node=n.id)
            if n.combine == "concatenation" and k < 2:
                raise GraphError(f"concatenation node {n.id!r} needs >= 2 inbound edges",
                                 node=n.id)
        if self.input_channels < 1 or self.num_classes < 1:
            raise GraphError("input_channels and num_classes must be >= 1")

    def node(self, node_id: str) -> Node:
        return self._nodes[node_id]

    def edge(self, edge_id: str) -> Edge:
        return self._edges[edge_id]

    def inbound(self, node_id: str) -> list[Edge]:
        return list(self._in.get(node_id, ()))

    def outbound(self, node_id: str) -> list[Edge]:
        return list(self._out.get(node_id, ()))

    @property
    def sources(self) -> list[str]:
        return [n.id for n in self.nodes if not self._in.get(n.id)]

    @property
    def sinks(self) -> list[str]:
        return [n.id for n in self.nodes if not self._out.get(n.id)]

    @property
    def output(self) -> str:
        sinks = self.sinks
        if len(sinks) != 1:
            raise GraphError(f"graph needs exactly one output node, found {sinks}")
        return sinks[0]

    @property
    def conv_edges(self) -> list[Edge]:
        return [e for e in self.edges if e.is_conv]

    @property
    def weighted_edges(self) -> list[Edge]:
        return [e for e in self.edges if e.has_weights]


# ---------------------------------------------------------------------------
# depth expressions
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Expr:
    """Positive integer combination of channel variables plus an integer constant.

    The constant may be negative, but the expression is >= 1 whenever every
    variable is >= 1.
    """

    terms: tuple[tuple[str, int], ...] = ()
    const: int = 0

    @classmethod
    def var(cls, name: str) -> "Expr":
        return cls(((name, 1),), 0)

    @classmethod
    def constant(cls, value: int) -> "Expr":
        return cls((), int(value))

    @classmethod
    def from_counts(cls, counts: dict, const: int = 0) -> "Expr":
        return cls(tuple(sorted((k, v) for k, v in counts.items() if v)), const)

    def __add__(self, other: "Expr") -> "Expr":
        counts = dict(self.terms)
        for k, v in other.terms:
            counts[k] = counts.get(k, 0) + v
        return Expr.from_counts(counts, self.const + other.const)

    @property
    def variables(self) -> tuple[str, ...]:
        return tuple(k for k, _ in self.terms)

    @property
    def single(self) -> str | None:
        if self.const == 0 and len(self.terms) == 1 and self.terms[0][1] == 1:
            return self.terms[0][0]
        return None

    @property
    def min_value(self) -> int:
        """Value with every variable at its smallest size, 1."""
        return self.const + sum(c for _, c in self.terms)

    def evaluate(self, sizes) -> int:
        try:
            return self.const + sum(c * int(sizes[v]) for v, c in self.terms)
        except KeyError as exc:
            raise InputError(f"channel variable {exc.args[0]!r} is not bound") from None

    def rename(self, mapping) -> "Expr":
        counts = {}
        for k, v in self.terms:
            counts[mapping.get(k, k)] = counts.get(mapping.get(k, k), 0) + v
        return Expr.from_counts(counts, self.const)

    def __str__(self):
        parts = [k if c == 1 else f"{c}*{k}" for k, c in self.terms]
        text = " + ".join(parts)
        if self.const > 0 or not parts:
            text = f"{text} + {self.const}" if parts else str(self.const)
        elif self.const < 0:
            text = f"{text} - {-self.const}"
        return text


class _Closure:
    """Union-find over channel atoms; a root may be bound to a sum of other roots."""

    def __init__(self):
        self.parent = {}
        self.rank = {}  # creation order, the older atom wins a union
        self.binding = {}

    def new(self, name):
        if name in self.parent:
            raise GraphError(f"channel atom {name!r} created twice")
        self.parent[name] = name
        self.rank[name] = len(self.rank)
        return Expr.var(name)

    def find(self, a):
        root = a
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[a] != root:
            self.parent[a], a = root, self.parent[a]
        return root

    def normalize(self, expr: Expr) -> Expr:
        out = Expr.constant(expr.const)
        for atom, coeff in expr.terms:
            root = self.find(atom)
            sub = self.normalize(self.binding[root]) if root in self.binding else Expr.var(root)
            for _ in range(coeff):
                out = out + sub
        return out

    def equate(self, a: Expr, b: Expr, where: tuple[str, str]):
        a, b = self.normalize(a), self.normalize(b)
        ca, cb = dict(a.terms), dict(b.terms)
        for k in set(ca) & set(cb):
            m = min(ca[k], cb[k])
            ca[k] -= m
            cb[k] -= m
        m = min(a.const, b.const)
        lhs = Expr.from_counts(ca, a.const - m)
        rhs = Expr.from_counts(cb, b.const - m)
        if lhs == rhs:
            return
        x, y = lhs.single, rhs.single
        if x is not None and y is not None:
            keep, drop = sorted((x, y), key=self.rank.__getitem__)
            self.parent[drop] = keep
            return
        # atom + k = other: bind the atom to other - k when that stays >= 1 for
        # every positive binding of the remaining variables
        for side, other in ((lhs, rhs), (rhs, lhs)):
            if len(side.terms) == 1 and side.terms[0][1] == 1:
                bound = Expr(other.terms, other.const - side.const)
                if bound.min_value >= 1:
                    self.binding[side.terms[0][0]] = bound
                    return
        raise ConstraintConflict(
            f"depths of {where[0]!r} ({a}) and {where[1]!r} ({b}) cannot be made equal "
            f"while keeping every channel variable free", nodes=where)


@dataclass
class ChannelAssignment:
    variables: tuple[str, ...]
    node_depth: dict[str, Expr]
    edge_out: dict[str, Expr]
    members: dict[str, tuple[str, ...]] = field(default_factory=dict)

    def node_sizes(self, sizes) -> dict[str, int]:
        return {n: e.evaluate(sizes) for n, e in self.node_depth.items()}

    def edge_sizes(self, sizes) -> dict[str, int]:
        return {k: e.evaluate(sizes) for k, e in self.edge_out.items()}


# ---------------------------------------------------------------------------
# unique channel-size assignment
# ---------------------------------------------------------------------------

def _find_cycle_edge(graph, remaining):
    color = {}
    for start in sorted(remaining, key=natural_key):
        if start in color:
            continue
        stack = [(start, iter(graph.outbound(start)))]
        color[start] = 1
        while stack:
            node, it = stack[-1]
            for e in it:
                if e.head not in remaining:
                    continue
                if color.get(e.head) == 1:
                    return e
                if e.head not in color:
                    color[e.head] = 1
                    stack.append((e.head, iter(graph.outbound(e.head))))
                    break
            else:
                color[node] = 2
                stack.pop()
    return None


def topo_queue(graph: NetGraph) -> list[str]:
    """Nodes in partial order; ready nodes are taken lowest id first (natural sort)."""
    indeg = {n.id: len(graph.inbound(n.id)) for n in graph.nodes}
    ready = [(natural_key(n), n) for n, d in indeg.items() if d == 0]
    heapq.heapify(ready)
    order = []
    while ready:
        _, node = heapq.heappop(ready)
        order.append(node)
        for e in graph.outbound(node):
            indeg[e.head] -= 1
            if indeg[e.head] == 0:
                heapq.heappush(ready, (natural_key(e.head), e.head))
    if len(order) != len(graph.nodes):
        remaining = {n for n, d in indeg.items() if d > 0}
        bad = _find_cycle_edge(graph, remaining)
        name = bad.id if bad is not None else "?"
        raise GraphError(f"graph has a cycle through edge {name!r}", edge=name)
    return order


def assign_unique_channels(graph: NetGraph) -> ChannelAssignment:
    """Independent channel variables of ``graph``.

    Nodes are visited in partial order.  An unassigned summation/single node
    opens a fresh variable named after the node; a concatenation node takes
    the sum of its inbound contributions, where each inbound conv edge opens a
    variable named after the edge.  Depths are pushed forward along non-conv
    edges; when the far end already has a depth the two are unified, which
    propagates back through every node sharing either expression.
    """
    queue = topo_queue(graph)
    closure = _Closure()
    depth: dict[str, Expr] = {}
    edge_out: dict[str, Expr] = {}
    sources = set(graph.sources)
    for node_id in queue:
        node = graph.node(node_id)
        if node_id in sources:
            depth[node_id] = Expr.constant(graph.input_channels)
        elif node.combine == "concatenation":
            total = Expr()
            for e in graph.inbound(node_id):
                if e.is_conv:
                    edge_out[e.id] = closure.new(e.id)
                    total = total + edge_out[e.id]
                else:
                    total = total + depth[e.tail]
            depth[node_id] = total
        elif node_id not in depth:
            depth[node_id] = closure.new(node_id)
        if node.combine != "concatenation":
            for e in graph.inbound(node_id):
                if e.is_conv:
                    edge_out[e.id] = depth[node_id]
        for e in graph.outbound(node_id):
            if e.is_conv or graph.node(e.head).combine == "concatenation":
                continue
            if e.head not in depth:
                depth[e.head] = depth[node_id]
            else:
                closure.equate(depth[e.head], depth[node_id], (e.tail, e.head))

    free = [a for a in sorted(closure.rank, key=closure.rank.__getitem__)
            if closure.find(a) == a and a not in closure.binding]
    members = defaultdict(list)
    for a in sorted(closure.rank, key=closure.rank.__getitem__):
        members[closure.find(a)].append(a)
    return ChannelAssignment(
        variables=tuple(free),
        node_depth={n.id: closure.normalize(depth[n.id]) for n in graph.nodes},
        edge_out={e.id: closure.normalize(edge_out[e.id]) for e in graph.conv_edges},
        members={v: tuple(members[v]) for v in free},
    )


# ---------------------------------------------------------------------------
# independent checks and accounting
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Violation:
    kind: str  # "edge", "node" or "input"
    element: str
    message: str


def _check_bound(assignment, sizes):
    missing = [v for v in assignment.variables if v not in sizes]
    if missing:
        raise InputError(f"unbound channel variables: {missing}")
    bad = [v for v in assignment.variables if int(sizes[v]) < 1]
    if bad:
        raise InputError(f"channel sizes must be >= 1: {bad}")


def validate_assignment(graph: NetGraph, assignment: ChannelAssignment, sizes) -> list[Violation]:
    """Re-walk the graph with concrete sizes and list every broken constraint."""
    _check_bound(assignment, sizes)
    depth = {n: e.evaluate(sizes) for n, e in assignment.node_depth.items()}
    out = []
    for n in graph.sources:
        if depth[n] != graph.input_channels:
            out.append(Violation("input", n, f"input node depth {depth[n]} != "
                                             f"{graph.input_channels}"))
    for n in graph.nodes:
        if depth[n.id] < 1:
            out.append(Violation("node", n.id, f"non-positive depth {depth[n.id]}"))
    for e in graph.edges:
        if e.is_conv or graph.node(e.head).combine == "concatenation":
            continue
        if depth[e.tail] != depth[e.head]:
            out.append(Violation("edge", e.id, f"{e.kind} edge joins depth {depth[e.tail]} "
                                               f"to {depth[e.head]}"))
    for n in graph.nodes:
        if n.combine != "concatenation":
            continue
        total = 0
        for e in graph.inbound(n.id):
            total += assignment.edge_out[e.id].evaluate(sizes) if e.is_conv else depth[e.tail]
        if total != depth[n.id]:
            out.append(Violation("node", n.id, f"concatenation depth {depth[n.id]} != "
                                               f"inbound total {total}"))
    return out


def edge_params(graph: NetGraph, assignment: ChannelAssignment, sizes) -> dict[str, int]:
    """Parameter count of every weighted (or batch-normalized) edge."""
    depth = {n: e.evaluate(sizes) for n, e in assignment.node_depth.items()}
    counts = {}
    for e in graph.edges:
        kh, kw = e.kernel
        c_in = depth[e.tail]
        if e.is_conv:
            c_out = assignment.edge_out[e.id].evaluate(sizes)
            if e.kind == "pointwise_conv":
                kh = kw = 1
            n = kh * kw * c_in * c_out + (c_out if e.bias else 0)
        elif e.kind == "depthwise":
            c_out = c_in
            n = kh * kw * c_in + (c_in if e.bias else 0)
        else:
            c_out = c_in
            n = 0
        if e.bn:
            n += 2 * c_out
        if n:
            counts[e.id] = n
    return counts


def head_params(graph: NetGraph, assignment: ChannelAssignment, sizes) -> int:
    c_last = assignment.node_depth[graph.output].evaluate(sizes)
    return c_last * graph.num_classes + graph.num_classes


def param_count(graph: NetGraph, sizes, assignment: ChannelAssignment | None = None) -> int:
    """Total trainable parameters at concrete channel sizes, classifier head included."""
    if assignment is None:
        assignment = assign_unique_channels(graph)
    _check_bound(assignment, sizes)
    return sum(edge_params(graph, assignment, sizes).values()) + head_params(graph, assignment,
                                                                             sizes)


def layer_groups(graph: NetGraph, assignment: ChannelAssignment) -> dict[str, list[str]]:
    """Conv edges grouped by the channel variable(s) their output depends on."""
    groups = {v: [] for v in assignment.variables}
    for e in graph.conv_edges:
        for v in assignment.edge_out[e.id].variables:
            groups[v].append(e.id)
    return groups


def uniform_sizes(assignment: ChannelAssignment, size: int) -> dict[str, int]:
    return {v: int(size) for v in assignment.variables}


def baseline_sizes(graph: NetGraph, assignment: ChannelAssignment) -> dict[str, int]:
    """Sizes declared by the ``width`` fields of the nodes/edges behind each variable."""
    sizes = {}
    for v in assignment.variables:
        widths = set()
        for atom in assignment.members.get(v, (v,)):
            item = graph._nodes.get(atom) or graph._edges.get(atom)
            if item is not None and item.width is not None:
                widths.add(int(item.width))
        if not widths:
            raise InputError(f"graph declares no baseline width for variable {v!r}")
        if len(widths) > 1:
            raise InputError(f"conflicting baseline widths {sorted(widths)} for variable {v!r}")
        sizes[v] = widths.pop()
    return sizes


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------

def graph_from_dict(doc: dict) -> NetGraph:
    if not isinstance(doc, dict) or "nodes" not in doc or "edges" not in doc:
        raise GraphError("graph spec needs 'nodes:' and 'edges:' sections")
    try:
        nodes = [Node(str(n["id"]), n.get("combine", "single"), n.get("width"))
                 for n in doc["nodes"]]
        edges = [Edge(str(e["id"]), str(e["tail"]), str(e["head"]), e["kind"],
                      tuple(int(k) for k in e.get("kernel", (1, 1))),
                      bool(e.get("bias", False)), bool(e.get("bn", False)), e.get("width"))
                 for e in doc["edges"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise GraphError(f"malformed graph entry: {exc}") from None
    return NetGraph(nodes, edges, int(doc.get("input_channels", 3)),
                    int(doc.get("num_classes", 10)), str(doc.get("name", "")))


def parse_graph(text: str) -> NetGraph:
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise GraphError(f"graph spec is not valid YAML: {exc}") from None
    return graph_from_dict(doc)


def dump_graph(graph: NetGraph) -> str:
    def scalar(v):
        if isinstance(v, str) and re.fullmatch(r"[A-Za-z_][\w.\-]*", v) \
                and v not in ("true", "false", "null", "yes", "no", "on", "off"):
            return v
        return json.dumps(v)

    def flow(d):
        return "{" + ", ".join(f"{k}: {scalar(v)}" for k, v in d.items()) + "}"

    lines = [f"name: {graph.name}", f"input_channels: {graph.input_channels}",
             f"num_classes: {graph.num_classes}", "nodes:"]
    for n in graph.nodes:
        d = {"id": n.id, "combine": n.combine}
        if n.width is not None:
            d["width"] = n.width
        lines.append(f"  - {flow(d)}")
    lines.append("edges:")
    for e in graph.edges:
        d = {"id": e.id, "tail": e.tail, "head": e.head, "kind": e.kind,
             "kernel": list(e.kernel), "bias": e.bias, "bn": e.bn}
        if e.width is not None:
            d["width"] = e.width
        lines.append(f"  - {flow(d)}")
    return "\n".join(lines) + "\n"


SHIPPED_GRAPHS = ("resnet34-cifar", "cell2", "micro2", "micro3", "residual")


def load_graph(path_or_name) -> NetGraph:
    """Read a graph spec from a path, or one of the bundled graphs by name."""
    p = Path(path_or_name)
    if p.exists():
        return parse_graph(p.read_text())
    name = str(path_or_name)
    if name in SHIPPED_GRAPHS:
        return parse_graph(resources.files("conet.graphs").joinpath(f"{name}.yaml").read_text())
    raise InputError(f"no graph file or bundled graph named {name!r}")


def load_sizes(path) -> dict[str, int]:
    try:
        doc = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as exc:
        raise InputError(f"sizes file is not valid YAML: {exc}") from None
    if not isinstance(doc, dict):
        raise InputError("sizes file must map channel variables to integers")
    return {str(k): int(v) for k, v in doc.items()}


def dump_sizes(sizes, order=None) -> str:
    keys = list(order) if order is not None else list(sizes)
    return "".join(f"{k}: {int(sizes[k])}\n" for k in keys)
