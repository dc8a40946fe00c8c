"""A small numpy CNN engine that trains graph-defined networks and snapshots them.

Activations are NHWC.  Every convolution runs at stride 1 with "same" zero
padding, so spatial size never changes and any validated channel assignment
gives a well-formed network.  Per edge kind:

* ``conv`` / ``pointwise_conv``: convolution, optional bias, then ReLU
* ``depthwise``: per-channel convolution, optional bias, no nonlinearity
* ``pool``: average over the edge kernel (zero padded, divided by the area)
* ``skip`` / ``other_nonconv``: identity

Nodes sum or concatenate (in inbound declaration order) what their inbound
edges deliver.  The output node is globally average pooled into a linear
classifier trained with softmax cross-entropy and SGD with momentum.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import IncompatibleError, InputError, TrainerError
from .netgraph import ChannelAssignment, NetGraph, assign_unique_channels, topo_queue, \
    validate_assignment
from .snapshot import SnapshotArchive, read_archive
from .tensor import ConvTensor


@dataclass(frozen=True)
class DatasetSpec:
    """Seeded Gaussian clusters: one random mean image per class plus i.i.d. noise."""

    image_size: int = 8
    n_samples: int = 512
    separation: float = 1.0
    noise: float = 1.0


@dataclass(frozen=True)
class TrainerConfig:
    learning_rate: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-3
    batch_size: int = 32
    seed: int = 0
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    dtype: str = "float64"
    per_layer_lr_scale: dict | None = None

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise InputError("learning_rate must be >= 0")
        if not 0 <= self.momentum < 1:
            raise InputError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise InputError("weight_decay must be >= 0")
        if self.batch_size < 1 or self.dataset.n_samples < self.batch_size:
            raise InputError("need 1 <= batch_size <= n_samples")
        if self.dataset.image_size < 1:
            raise InputError("image_size must be >= 1")
        if self.dtype not in ("float64", "float32"):
            raise InputError("dtype must be 'float64' or 'float32'")
        for k, v in (self.per_layer_lr_scale or {}).items():
            if not v > 0:
                raise InputError(f"learning-rate scale for {k!r} must be > 0")


def make_dataset(spec: DatasetSpec, channels: int, num_classes: int, seed: int, dtype="float64"):
    rng = np.random.default_rng([seed, 0xDA7A])
    s = spec.image_size
    means = spec.separation * rng.standard_normal((num_classes, s, s, channels))
    y = rng.permutation(np.arange(spec.n_samples) % num_classes)
    x = means[y] + spec.noise * rng.standard_normal((spec.n_samples, s, s, channels))
    return x.astype(dtype), y


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------

HEAD = None  # parameter-key owner of the classifier


@dataclass
class Model:
    """Parameters keyed by ``(edge_id, "weight" | "bias")``; the head uses ``HEAD``."""

    graph: NetGraph
    assignment: ChannelAssignment
    sizes: dict[str, int]
    params: dict
    order: list[str]

    @property
    def depths(self) -> dict[str, int]:
        return self.assignment.node_sizes(self.sizes)

    def snapshot(self) -> dict[str, ConvTensor]:
        return {e.id: ConvTensor(self.params[(e.id, "weight")].copy())
                for e in self.graph.weighted_edges}


def weight_shapes(graph: NetGraph, assignment: ChannelAssignment, sizes) -> dict[str, tuple]:
    """``(kh, kw, cin, cout)`` of every weighted edge; depthwise kernels use ``cin = 1``."""
    depth = assignment.node_sizes(sizes)
    out = {}
    for e in graph.weighted_edges:
        kh, kw = (1, 1) if e.kind == "pointwise_conv" else e.kernel
        if e.kind == "depthwise":
            out[e.id] = (kh, kw, 1, depth[e.tail])
        else:
            out[e.id] = (kh, kw, depth[e.tail], assignment.edge_out[e.id].evaluate(sizes))
    return out


def build_model(graph: NetGraph, sizes, seed: int, assignment: ChannelAssignment | None = None,
                dtype="float64") -> Model:
    """Allocate He-initialised weights at ``sizes``; biases and nothing else start at zero."""
    if assignment is None:
        assignment = assign_unique_channels(graph)
    bad = validate_assignment(graph, assignment, sizes)
    if bad:
        raise InputError("sizes violate the channel constraints: "
                         + "; ".join(f"{v.element}: {v.message}" for v in bad))
    rng = np.random.default_rng(seed)
    params = {}
    for e in graph.weighted_edges:
        shape = weight_shapes(graph, assignment, sizes)[e.id]
        fan_in = shape[0] * shape[1] * shape[2]
        w = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
        params[(e.id, "weight")] = w.astype(dtype)
        if e.bias:
            params[(e.id, "bias")] = np.zeros(shape[3], dtype=dtype)
    c = assignment.node_depth[graph.output].evaluate(sizes)
    k = graph.num_classes
    params[(HEAD, "weight")] = (rng.standard_normal((c, k)) / np.sqrt(c)).astype(dtype)
    params[(HEAD, "bias")] = np.zeros(k, dtype=dtype)
    return Model(graph, assignment, {v: int(sizes[v]) for v in assignment.variables}, params,
                 topo_queue(graph))


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

def _pad(x, kh, kw):
    t, l = (kh - 1) // 2, (kw - 1) // 2
    return np.pad(x, ((0, 0), (t, kh - 1 - t), (l, kw - 1 - l), (0, 0)))


def _unpad(xp, kh, kw):
    t, l = (kh - 1) // 2, (kw - 1) // 2
    return xp[:, t:xp.shape[1] - (kh - 1 - t), l:xp.shape[2] - (kw - 1 - l), :]


def conv_forward(x, w):
    n, h, wd, _ = x.shape
    kh, kw, cin, cout = w.shape
    xp = _pad(x, kh, kw)
    out = np.zeros((n * h * wd, cout), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            out += xp[:, i:i + h, j:j + wd, :].reshape(-1, cin) @ w[i, j]
    return out.reshape(n, h, wd, cout)


def conv_backward(x, w, dout):
    n, h, wd, _ = x.shape
    kh, kw, cin, cout = w.shape
    xp = _pad(x, kh, kw)
    dxp = np.zeros_like(xp)
    dw = np.empty_like(w)
    d2 = dout.reshape(-1, cout)
    for i in range(kh):
        for j in range(kw):
            dw[i, j] = xp[:, i:i + h, j:j + wd, :].reshape(-1, cin).T @ d2
            dxp[:, i:i + h, j:j + wd, :] += (d2 @ w[i, j].T).reshape(n, h, wd, cin)
    return _unpad(dxp, kh, kw), dw


def depthwise_forward(x, w):
    _, h, wd, _ = x.shape
    kh, kw = w.shape[:2]
    xp = _pad(x, kh, kw)
    out = np.zeros_like(x)
    for i in range(kh):
        for j in range(kw):
            out += xp[:, i:i + h, j:j + wd, :] * w[i, j, 0]
    return out


def depthwise_backward(x, w, dout):
    _, h, wd, _ = x.shape
    kh, kw = w.shape[:2]
    xp = _pad(x, kh, kw)
    dxp = np.zeros_like(xp)
    dw = np.empty_like(w)
    for i in range(kh):
        for j in range(kw):
            dw[i, j, 0] = np.einsum("nhwc,nhwc->c", xp[:, i:i + h, j:j + wd, :], dout)
            dxp[:, i:i + h, j:j + wd, :] += dout * w[i, j, 0]
    return _unpad(dxp, kh, kw), dw


def pool_forward(x, kernel):
    kh, kw = kernel
    _, h, wd, _ = x.shape
    xp = _pad(x, kh, kw)
    out = np.zeros_like(x)
    for i in range(kh):
        for j in range(kw):
            out += xp[:, i:i + h, j:j + wd, :]
    return out / (kh * kw)


def pool_backward(dout, kernel):
    kh, kw = kernel
    _, h, wd, _ = dout.shape
    dxp = np.zeros(_pad(dout, kh, kw).shape, dtype=dout.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, i:i + h, j:j + wd, :] += dout
    return _unpad(dxp, kh, kw) / (kh * kw)


def _edge_forward(e, x, params):
    if e.is_conv:
        z = conv_forward(x, params[(e.id, "weight")])
        if e.bias:
            z = z + params[(e.id, "bias")]
        return np.maximum(z, 0), (x, z > 0)
    if e.kind == "depthwise":
        z = depthwise_forward(x, params[(e.id, "weight")])
        if e.bias:
            z = z + params[(e.id, "bias")]
        return z, (x,)
    if e.kind == "pool":
        return pool_forward(x, e.kernel), ()
    return x, ()


def _edge_backward(e, dy, cache, params, grads):
    if e.is_conv:
        x, mask = cache
        dz = dy * mask
        if e.bias:
            grads[(e.id, "bias")] += dz.sum(axis=(0, 1, 2))
        dx, dw = conv_backward(x, params[(e.id, "weight")], dz)
        grads[(e.id, "weight")] += dw
        return dx
    if e.kind == "depthwise":
        (x,) = cache
        if e.bias:
            grads[(e.id, "bias")] += dy.sum(axis=(0, 1, 2))
        dx, dw = depthwise_backward(x, params[(e.id, "weight")], dy)
        grads[(e.id, "weight")] += dw
        return dx
    if e.kind == "pool":
        return pool_backward(dy, e.kernel)
    return dy


def forward(model: Model, x):
    """Logits and the cache needed by :func:`backward`."""
    g = model.graph
    sources = set(g.sources)
    acts, caches, widths = {}, {}, {}
    for node in model.order:
        if node in sources:
            acts[node] = x
            continue
        parts = []
        for e in g.inbound(node):
            y, caches[e.id] = _edge_forward(e, acts[e.tail], model.params)
            parts.append(y)
        if g.node(node).combine == "concatenation":
            widths[node] = [p.shape[-1] for p in parts]
            acts[node] = np.concatenate(parts, axis=-1)
        else:
            acts[node] = parts[0] if len(parts) == 1 else sum(parts)
    feat = acts[g.output].mean(axis=(1, 2))
    logits = feat @ model.params[(HEAD, "weight")] + model.params[(HEAD, "bias")]
    return logits, (acts, caches, widths, feat)


def softmax_xent(logits, y):
    """Mean cross-entropy and its gradient with respect to the logits."""
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = len(y)
    loss = -logp[np.arange(n), y].mean()
    d = np.exp(logp)
    d[np.arange(n), y] -= 1
    return float(loss), d / n


def backward(model: Model, cache, dlogits) -> dict:
    g = model.graph
    acts, caches, widths, feat = cache
    grads = {k: np.zeros_like(v) for k, v in model.params.items()}
    grads[(HEAD, "weight")] = feat.T @ dlogits
    grads[(HEAD, "bias")] = dlogits.sum(axis=0)
    out = acts[g.output]
    dfeat = dlogits @ model.params[(HEAD, "weight")].T
    hw = out.shape[1] * out.shape[2]
    dact = {g.output: np.broadcast_to(dfeat[:, None, None, :] / hw, out.shape).copy()}
    sources = set(g.sources)
    for node in reversed(model.order):
        if node in sources or node not in dact:
            continue
        d = dact.pop(node)
        inbound = g.inbound(node)
        if g.node(node).combine == "concatenation":
            pieces = np.split(d, np.cumsum(widths[node])[:-1], axis=-1)
        else:
            pieces = [d] * len(inbound)
        for e, de in zip(inbound, pieces):
            dx = _edge_backward(e, de, caches[e.id], model.params, grads)
            dact[e.tail] = dact[e.tail] + dx if e.tail in dact else dx
    return grads


def loss_and_grads(model: Model, x, y):
    logits, cache = forward(model, x)
    loss, dlogits = softmax_xent(logits, y)
    return loss, backward(model, cache, dlogits), logits


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def train_epochs(model: Model, config: TrainerConfig, n_epochs: int,
                 data=None, shuffle_seed=None) -> SnapshotArchive:
    """SGD with momentum; snapshot every weighted edge after each epoch.

    Weight decay enters the update (not the reported loss).  The reported
    loss and accuracy of an epoch are means over its mini-batches.
    """
    if n_epochs < 1:
        raise InputError("n_epochs must be >= 1")
    g = model.graph
    if data is None:
        data = make_dataset(config.dataset, g.input_channels, g.num_classes, config.seed,
                            config.dtype)
    x, y = data
    rng = np.random.default_rng([config.seed if shuffle_seed is None else shuffle_seed, 0x5EED])
    scale = config.per_layer_lr_scale or {}
    velocity = {k: np.zeros_like(v) for k, v in model.params.items()}
    archive = SnapshotArchive()
    n = len(y)
    for epoch in range(n_epochs):
        perm = rng.permutation(n)
        losses, correct = [], 0
        for start in range(0, n - config.batch_size + 1, config.batch_size):
            idx = perm[start:start + config.batch_size]
            loss, grads, logits = loss_and_grads(model, x[idx], y[idx])
            if not np.isfinite(loss):
                raise TrainerError(f"loss diverged at epoch {epoch}", epoch=epoch)
            losses.append(loss)
            correct += int((logits.argmax(axis=1) == y[idx]).sum())
            for key, p in model.params.items():
                v = velocity[key]
                v *= config.momentum
                v += grads[key] + config.weight_decay * p
                p -= config.learning_rate * scale.get(key[0], 1.0) * v
        seen = len(losses) * config.batch_size
        # archives hold single precision, so weights must stay finite there too
        f32_max = float(np.finfo(np.float32).max)
        for p in model.params.values():
            if not np.all(np.abs(p) <= f32_max):
                raise TrainerError(f"weights diverged at epoch {epoch}", epoch=epoch)
        archive.append(model.snapshot(), float(np.mean(losses)), correct / seen)
    return archive


class LiveTrainer:
    """Trains a freshly initialised model for each controller trial."""

    def __init__(self, graph: NetGraph, config: TrainerConfig,
                 assignment: ChannelAssignment | None = None):
        self.graph = graph
        self.config = config
        self.assignment = assignment or assign_unique_channels(graph)
        self.data = make_dataset(config.dataset, graph.input_channels, graph.num_classes,
                                 config.seed, config.dtype)

    def trial_seed(self, trial: int) -> int:
        return int(np.random.SeedSequence([self.config.seed, trial]).generate_state(1)[0])

    def train(self, sizes, n_epochs: int, trial: int = 0) -> SnapshotArchive:
        seed = self.trial_seed(trial)
        model = build_model(self.graph, sizes, seed, self.assignment, self.config.dtype)
        return train_epochs(model, self.config, n_epochs, self.data, shuffle_seed=seed)


class ReplayTrainer:
    """Serves stored epochs in order, as if each trial had trained them.

    Every call checks that the archive's tensors have exactly the dims the
    requested sizes imply, then advances a cursor by ``n_epochs``.
    """

    def __init__(self, archive, graph: NetGraph, assignment: ChannelAssignment | None = None):
        self.archive = archive if isinstance(archive, SnapshotArchive) else read_archive(archive)
        self.graph = graph
        self.assignment = assignment or assign_unique_channels(graph)
        self.cursor = 0

    def check(self, sizes):
        check_compatible(self.archive, self.graph, self.assignment, sizes)

    def train(self, sizes, n_epochs: int, trial: int = 0) -> SnapshotArchive:
        self.check(sizes)
        stop = self.cursor + n_epochs
        if stop > len(self.archive):
            raise IncompatibleError(f"archive holds {len(self.archive)} epochs; trial {trial} "
                                    f"needs epochs {self.cursor}..{stop - 1}")
        out = self.archive.slice(self.cursor, stop)
        self.cursor = stop
        return out


def replay_archive(path, graph: NetGraph, assignment: ChannelAssignment | None = None):
    return ReplayTrainer(path, graph, assignment)


def check_compatible(archive: SnapshotArchive, graph: NetGraph, assignment: ChannelAssignment,
                     sizes) -> None:
    expected = weight_shapes(graph, assignment, sizes)
    stored = dict(archive.manifest)
    for e in graph.conv_edges:
        if e.id not in stored:
            raise IncompatibleError(f"archive has no tensor for conv edge {e.id!r}")
        if tuple(stored[e.id]) != expected[e.id]:
            raise IncompatibleError(f"layer {e.id!r}: archive dims {tuple(stored[e.id])} != "
                                    f"dims {expected[e.id]} implied by the sizes")


def infer_sizes(archive: SnapshotArchive, graph: NetGraph, assignment: ChannelAssignment):
    """Read channel sizes off the output dims of the archived conv tensors."""
    stored = dict(archive.manifest)
    sizes = {}
    for e in graph.conv_edges:
        expr = assignment.edge_out[e.id]
        if e.id in stored and expr.single is not None:
            sizes.setdefault(expr.single, stored[e.id][3])
    missing = [v for v in assignment.variables if v not in sizes]
    if missing:
        raise IncompatibleError(f"cannot read sizes of {missing} from the archive")
    check_compatible(archive, graph, assignment, sizes)
    return sizes


# ---------------------------------------------------------------------------
# finite-difference check
# ---------------------------------------------------------------------------

def _relu_masks(cache):
    return [c[1] for c in cache[1].values() if len(c) == 2]


def _same_masks(a, b):
    return all(np.array_equal(u, v) for u, v in zip(a, b))


def numeric_gradient(model: Model, x, y, key, h=1e-5):
    """Central differences for one parameter array.

    Also returns a boolean array marking entries whose +-h perturbation
    flips some ReLU, where the loss is not differentiable over the stencil.
    """
    base = _relu_masks(forward(model, x)[1])
    p = model.params[key]
    out = np.empty_like(p)
    kink = np.zeros(p.shape, dtype=bool)
    flat, gflat, kflat = p.reshape(-1), out.reshape(-1), kink.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        logits, cache_p = forward(model, x)
        fp = softmax_xent(logits, y)[0]
        flat[i] = old - h
        logits, cache_m = forward(model, x)
        fm = softmax_xent(logits, y)[0]
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
        kflat[i] = not (_same_masks(base, _relu_masks(cache_p))
                        and _same_masks(base, _relu_masks(cache_m)))
    return out, kink


@dataclass(frozen=True)
class GradCheck:
    max_rel_error: float
    checked: int
    skipped_kinks: int


def gradient_check(model: Model, x, y, h=1e-5, floor=1e-8) -> dict:
    """Compare analytic and central-difference gradients for every parameter.

    The relative error of one entry is ``|a - n| / max(|a|, |n|, floor)``.
    Entries whose stencil crosses a ReLU kink are counted, not compared.
    """
    _, grads, _ = loss_and_grads(model, x, y)
    out = {}
    for key in model.params:
        a = grads[key]
        n, kink = numeric_gradient(model, x, y, key, h)
        err = np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        err = err[~kink]
        out[key] = GradCheck(float(err.max()) if err.size else 0.0, int(err.size),
                             int(kink.sum()))
    return out
