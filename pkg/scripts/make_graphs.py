"""Regenerate the bundled graph specs under src/conet/graphs/."""
from pathlib import Path

from conet.netgraph import Edge, NetGraph, Node, dump_graph

OUT = Path(__file__).resolve().parents[1] / "src" / "conet" / "graphs"


def resnet34_cifar():
    nodes = [Node("in"), Node("stem", width=64)]
    edges = [Edge("stem.conv", "in", "stem", "conv", (3, 3), bn=True)]
    prev, prev_width = "stem", 64
    for stage, (blocks, width) in enumerate(zip((3, 4, 6, 3), (64, 128, 256, 512)), start=1):
        for b in range(1, blocks + 1):
            tag = f"l{stage}b{b}"
            mid, out = f"{tag}.mid", f"{tag}.out"
            nodes += [Node(mid, width=width), Node(out, "summation", width=width)]
            edges += [Edge(f"{tag}.conv1", prev, mid, "conv", (3, 3), bn=True),
                      Edge(f"{tag}.conv2", mid, out, "conv", (3, 3), bn=True)]
            if width != prev_width:
                edges.append(Edge(f"{tag}.shortcut", prev, out, "pointwise_conv", (1, 1), bn=True))
            else:
                edges.append(Edge(f"{tag}.skip", prev, out, "skip"))
            prev, prev_width = out, width
    return NetGraph(nodes, edges, 3, 10, "resnet34-cifar")


def chain(name, widths):
    nodes = [Node("in")] + [Node(f"n{i}", width=w) for i, w in enumerate(widths, start=1)]
    edges = [Edge(f"conv{i}", "in" if i == 1 else f"n{i - 1}", f"n{i}", "conv", (3, 3))
             for i in range(1, len(widths) + 1)]
    return NetGraph(nodes, edges, 3, 4, name)


def residual():
    nodes = [Node("in"), Node("s", width=8), Node("m", width=8), Node("r", "summation", width=8),
             Node("p", width=8), Node("o", width=12)]
    edges = [Edge("stem", "in", "s", "conv", (3, 3), bias=True),
             Edge("a", "s", "m", "conv", (3, 3), bias=True),
             Edge("b", "m", "r", "conv", (3, 3)),
             Edge("sk", "s", "r", "skip"),
             Edge("pl", "r", "p", "pool", (3, 3)),
             Edge("last", "p", "o", "pointwise_conv", (1, 1), bias=True)]
    return NetGraph(nodes, edges, 3, 4, "residual")


def cell2():
    nodes = [Node("in"), Node("s", width=16), Node("d", width=16),
             Node("cat", "concatenation"), Node("o", width=32)]
    edges = [Edge("stem", "in", "s", "conv", (3, 3), bn=True),
             Edge("b1", "s", "cat", "conv", (3, 3), bn=True, width=8),
             Edge("dw", "s", "d", "depthwise", (3, 3)),
             Edge("pw", "d", "cat", "pointwise_conv", (1, 1), bn=True, width=8),
             Edge("sk", "s", "cat", "skip"),
             Edge("head", "cat", "o", "conv", (3, 3), bn=True)]
    return NetGraph(nodes, edges, 3, 10, "cell2")


if __name__ == "__main__":
    for g in (resnet34_cifar(), chain("micro2", (8, 16)), chain("micro3", (16, 16, 16)),
              residual(), cell2()):
        (OUT / f"{g.name}.yaml").write_text(dump_graph(g))
        print("wrote", g.name)
