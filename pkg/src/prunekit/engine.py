"""CPU forward inference and reverse-mode training for the IR operator set.

Everything runs in float64 on batched NCHW arrays; the weight store keeps
float32. Convolutions are im2col + ``tensordot`` so the reduction order is
fixed for a given shape, which keeps forward passes bit-reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import ndimage

from .nir import NetworkGraph, NodeKind
from .tensorstore import WeightStore


class EngineError(RuntimeError):
    pass


class ShapeMismatchError(EngineError):
    pass


class NonFiniteError(EngineError):
    pass


# -- primitive ops (forward returns output, backward returns input grads) ---

def conv2d(x, w, b, stride=1, padding=0):
    k = w.shape[2]
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    y = np.tensordot(cols, w, axes=([1, 4, 5], [1, 2, 3]))  # N, Ho, Wo, O
    y = y.transpose(0, 3, 1, 2)
    if b is not None:
        y = y + b[None, :, None, None]
    return np.ascontiguousarray(y)


def conv2d_backward(dy, x, w, stride=1, padding=0):
    k = w.shape[2]
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = dy.shape[2:]
    dw = np.tensordot(dy, cols, axes=([0, 2, 3], [0, 2, 3]))  # O, I, k, k
    db = dy.sum(axis=(0, 2, 3))
    dcols = np.tensordot(dy, w, axes=([1], [0]))  # N, Ho, Wo, I, k, k
    dxp = np.zeros_like(xp)
    for di in range(k):
        for dj in range(k):
            dxp[:, :, di:di + stride * (ho - 1) + 1:stride,
                dj:dj + stride * (wo - 1) + 1:stride] += dcols[:, :, :, :, di, dj].transpose(0, 3, 1, 2)
    h, wd = x.shape[2:]
    dx = dxp[:, :, padding:padding + h, padding:padding + wd]
    return dx, dw, db


def conv_transpose2d(x, w, b, stride=1, padding=0):
    n, _, h, wd = x.shape
    o, k = w.shape[0], w.shape[2]
    full = np.zeros((n, o, (h - 1) * stride + k, (wd - 1) * stride + k))
    t = np.tensordot(x, w, axes=([1], [1]))  # N, H, W, O, k, k
    for di in range(k):
        for dj in range(k):
            full[:, :, di:di + stride * (h - 1) + 1:stride,
                 dj:dj + stride * (wd - 1) + 1:stride] += t[..., di, dj].transpose(0, 3, 1, 2)
    y = full[:, :, padding:full.shape[2] - padding, padding:full.shape[3] - padding]
    if b is not None:
        y = y + b[None, :, None, None]
    return np.ascontiguousarray(y)


def conv_transpose2d_backward(dy, x, w, stride=1, padding=0):
    n, _, h, wd = x.shape
    o, k = w.shape[0], w.shape[2]
    full = np.zeros((n, o, (h - 1) * stride + k, (wd - 1) * stride + k))
    full[:, :, padding:full.shape[2] - padding, padding:full.shape[3] - padding] = dy
    dt = np.empty((n, h, wd, o, k, k))
    for di in range(k):
        for dj in range(k):
            dt[..., di, dj] = full[:, :, di:di + stride * (h - 1) + 1:stride,
                                   dj:dj + stride * (wd - 1) + 1:stride].transpose(0, 2, 3, 1)
    dx = np.tensordot(dt, w, axes=([3, 4, 5], [0, 2, 3])).transpose(0, 3, 1, 2)
    dw = np.tensordot(x, dt, axes=([0, 2, 3], [0, 1, 2])).transpose(1, 0, 2, 3)
    db = dy.sum(axis=(0, 2, 3))
    return dx, dw, db


def max_pool2d(x, kernel, stride):
    win = sliding_window_view(x, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride]
    flat = win.reshape(*win.shape[:4], kernel * kernel)
    return flat.max(axis=-1)


def max_pool2d_backward(dy, x, kernel, stride):
    win = sliding_window_view(x, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride]
    flat = win.reshape(*win.shape[:4], kernel * kernel)
    # ties: first maximal element in row-major window order takes the gradient
    arg = flat.argmax(axis=-1)
    ho, wo = dy.shape[2:]
    dx = np.zeros_like(x)
    for t in range(kernel * kernel):
        di, dj = divmod(t, kernel)
        dx[:, :, di:di + stride * (ho - 1) + 1:stride,
           dj:dj + stride * (wo - 1) + 1:stride] += np.where(arg == t, dy, 0.0)
    return dx


def pixel_shuffle(x, r):
    n, c, h, w = x.shape
    oc = c // (r * r)
    return x.reshape(n, oc, r, r, h, w).transpose(0, 1, 4, 2, 5, 3).reshape(n, oc, h * r, w * r)


def pixel_unshuffle(y, r):
    n, c, hr, wr = y.shape
    h, w = hr // r, wr // r
    return y.reshape(n, c, h, r, w, r).transpose(0, 1, 3, 5, 2, 4).reshape(n, c * r * r, h, w)


# -- graph execution ---------------------------------------------------------

def _plan(graph: NetworkGraph):
    return [(nid, graph.nodes[nid], graph.inputs_of(nid)) for nid in graph.topo_order()]


def _params(graph, store, dtype=np.float64):
    params = {}
    for nid in graph.conv_ids():
        params[f"{nid}.kernel"] = np.asarray(store.kernel(nid), dtype=dtype)
        b = store.bias(nid)
        if b is not None and graph.nodes[nid].attrs.get("bias", True):
            params[f"{nid}.bias"] = np.asarray(b, dtype=dtype)
    return params


def _run(plan, params, x, input_channels):
    if x.shape[1] != input_channels:
        raise ShapeMismatchError(f"input has {x.shape[1]} channels, graph expects {input_channels}")
    vals = {}
    for nid, node, ins in plan:
        k = node.kind
        a = node.attrs
        xs = [vals[s] for s in ins]
        if k is NodeKind.INPUT:
            y = x
        elif k is NodeKind.OUTPUT:
            y = xs[0]
        elif k is NodeKind.CONV2D:
            y = conv2d(xs[0], params[f"{nid}.kernel"], params.get(f"{nid}.bias"),
                       a["stride"], a["padding"])
        elif k is NodeKind.CONV2D_TRANSPOSE:
            y = conv_transpose2d(xs[0], params[f"{nid}.kernel"], params.get(f"{nid}.bias"),
                                 a["stride"], a["padding"])
        elif k is NodeKind.RELU:
            y = np.maximum(xs[0], 0.0)
        elif k is NodeKind.LEAKY_RELU:
            y = np.where(xs[0] > 0, xs[0], a.get("slope", 0.2) * xs[0])
        elif k is NodeKind.MAX_POOL2D:
            y = max_pool2d(xs[0], a["kernel"], a["stride"])
        elif k is NodeKind.PIXEL_SHUFFLE:
            y = pixel_shuffle(xs[0], a["factor"])
        elif k is NodeKind.ELTWISE_ADD:
            if any(v.shape != xs[0].shape for v in xs):
                raise ShapeMismatchError(f"{nid}: operand shapes {[v.shape for v in xs]}")
            y = sum(xs[1:], xs[0])
        elif k is NodeKind.CONCAT:
            y = np.concatenate(xs, axis=1)
        else:  # pragma: no cover
            raise EngineError(f"unsupported node kind {k}")
        vals[nid] = y
    return vals


def _backward(plan, params, vals, grad_out: dict):
    grads = dict(grad_out)
    pgrads = {name: np.zeros_like(p) for name, p in params.items()}
    for nid, node, ins in reversed(plan):
        if not ins or nid not in grads:
            continue
        g = grads.pop(nid)
        k = node.kind
        a = node.attrs
        xs = [vals[s] for s in ins]
        if k is NodeKind.OUTPUT:
            dxs = [g]
        elif k is NodeKind.CONV2D:
            dx, dw, db = conv2d_backward(g, xs[0], params[f"{nid}.kernel"], a["stride"], a["padding"])
            pgrads[f"{nid}.kernel"] += dw
            if f"{nid}.bias" in pgrads:
                pgrads[f"{nid}.bias"] += db
            dxs = [dx]
        elif k is NodeKind.CONV2D_TRANSPOSE:
            dx, dw, db = conv_transpose2d_backward(g, xs[0], params[f"{nid}.kernel"],
                                                   a["stride"], a["padding"])
            pgrads[f"{nid}.kernel"] += dw
            if f"{nid}.bias" in pgrads:
                pgrads[f"{nid}.bias"] += db
            dxs = [dx]
        elif k is NodeKind.RELU:
            dxs = [np.where(xs[0] > 0, g, 0.0)]
        elif k is NodeKind.LEAKY_RELU:
            dxs = [np.where(xs[0] > 0, g, a.get("slope", 0.2) * g)]
        elif k is NodeKind.MAX_POOL2D:
            dxs = [max_pool2d_backward(g, xs[0], a["kernel"], a["stride"])]
        elif k is NodeKind.PIXEL_SHUFFLE:
            dxs = [pixel_unshuffle(g, a["factor"])]
        elif k is NodeKind.ELTWISE_ADD:
            dxs = [g] * len(xs)
        elif k is NodeKind.CONCAT:
            bounds = np.cumsum([v.shape[1] for v in xs])[:-1]
            dxs = np.split(g, bounds, axis=1)
        else:  # pragma: no cover
            raise EngineError(f"unsupported node kind {k}")
        for src, dx in zip(ins, dxs):
            grads[src] = grads[src] + dx if src in grads else dx
    return pgrads, grads


def _as_batch(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        return x[None], True
    if x.ndim != 4:
        raise ShapeMismatchError(f"expected (C,H,W) or (N,C,H,W) input, got shape {x.shape}")
    return x, False


def forward(graph: NetworkGraph, store: WeightStore, x) -> np.ndarray:
    """Run the network on one (C,H,W) image or an (N,C,H,W) batch."""
    xb, single = _as_batch(x)
    plan = _plan(graph)
    inp = graph.nodes[graph.input_id()].attrs["channels"]
    vals = _run(plan, _params(graph, store), xb, inp)
    out = vals[graph.output_ids()[0]]
    if not np.all(np.isfinite(out)):
        raise NonFiniteError("network output contains NaN or Inf")
    return out[0] if single else out


def gradients(graph: NetworkGraph, params: dict, x, dy):
    """Parameter and input gradients of <forward(x), dy>; used by gradient checks."""
    xb, _ = _as_batch(x)
    plan = _plan(graph)
    inp = graph.nodes[graph.input_id()].attrs["channels"]
    vals = _run(plan, params, xb, inp)
    out_id = graph.output_ids()[0]
    pgrads, rest = _backward(plan, params, vals, {out_id: np.asarray(dy, dtype=np.float64)})
    return pgrads, rest.get(graph.input_id())


# -- training ----------------------------------------------------------------

@dataclass(frozen=True)
class TrainSpec:
    loss: str = "mse"  # "mse" or "l1"
    lr: float = 0.05
    steps: int = 100
    batch_size: int = 8
    seed: int = 0
    clip_norm: float | None = 1.0  # global gradient-norm clip; None disables

    def __post_init__(self):
        if self.loss not in ("mse", "l1"):
            raise ValueError(f"loss must be 'mse' or 'l1', got {self.loss!r}")
        if self.lr <= 0 or self.batch_size <= 0 or self.steps < 0:
            raise ValueError("lr and batch_size must be positive, steps non-negative")


def loss_and_grad(pred, target, kind):
    diff = pred - target
    n = diff.size
    if kind == "mse":
        return float(np.mean(diff * diff)), 2.0 * diff / n
    return float(np.mean(np.abs(diff))), np.sign(diff) / n


def _batches(n, batch_size, rng):
    while True:
        order = rng.permutation(n)
        for s in range(0, n - n % batch_size or n, batch_size):
            yield order[s:s + batch_size]


def train(graph: NetworkGraph, store: WeightStore, dataset, spec: TrainSpec):
    """Mini-batch gradient descent; returns ``(new_store, last_batch_loss)``.

    ``dataset`` is a sequence of ``(input, target)`` pairs of (C,H,W) arrays.
    The input store is not modified.
    """
    if spec.steps == 0:
        return store.copy(), float("nan")
    plan = _plan(graph)
    inp = graph.nodes[graph.input_id()].attrs["channels"]
    out_id = graph.output_ids()[0]
    params = _params(graph, store)
    xs = np.stack([np.asarray(p[0], dtype=np.float64) for p in dataset])
    ys = np.stack([np.asarray(p[1], dtype=np.float64) for p in dataset])
    rng = np.random.default_rng(spec.seed)
    batches = _batches(len(xs), min(spec.batch_size, len(xs)), rng)
    loss = float("nan")
    for step in range(spec.steps):
        idx = next(batches)
        vals = _run(plan, params, xs[idx], inp)
        loss, dpred = loss_and_grad(vals[out_id], ys[idx], spec.loss)
        if not np.isfinite(loss):
            raise NonFiniteError(f"training diverged at step {step}: loss={loss}")
        pgrads, _ = _backward(plan, params, vals, {out_id: dpred})
        scale = spec.lr
        if spec.clip_norm is not None:
            norm = np.sqrt(sum(float(np.sum(g * g)) for g in pgrads.values()))
            if norm > spec.clip_norm:
                scale *= spec.clip_norm / norm
        for name, g in pgrads.items():
            params[name] -= scale * g
    new = store.copy()
    for name, p in params.items():
        new[name] = p.astype(np.float32)
    return new, loss


# -- synthetic data ------------------------------------------------------------

def _pattern(rng, size, channels):
    yy, xx = np.mgrid[0:size, 0:size] / size
    img = np.zeros((channels, size, size))
    for c in range(channels):
        for _ in range(3):
            fx, fy = rng.uniform(0.5, 3.0, 2)
            phase = rng.uniform(0, 2 * np.pi)
            img[c] += rng.uniform(0.2, 0.5) * np.sin(2 * np.pi * (fx * xx + fy * yy) + phase)
        x0, y0 = rng.integers(0, size // 2, 2)
        w, h = rng.integers(size // 4, size // 2, 2)
        img[c, y0:y0 + h, x0:x0 + w] += rng.uniform(-0.6, 0.6)
    lo, hi = img.min(), img.max()
    return (img - lo) / (hi - lo + 1e-12)


def make_synthetic_dataset(kind: str, seed: int, count: int, size: int = 16,
                           channels: int = 1, noise: float = 0.1):
    """Procedural image pairs in [0, 1].

    ``denoise``: (clean + gaussian noise, clean), both ``size`` square.
    ``upscale``: (bicubic 2x downsample, original).
    """
    if kind not in ("denoise", "upscale"):
        raise ValueError(f"unknown dataset kind {kind!r}")
    rng = np.random.default_rng(seed)
    pairs = []
    for _ in range(count):
        clean = _pattern(rng, size, channels)
        if kind == "denoise":
            noisy = clean + noise * rng.standard_normal(clean.shape)
            pairs.append((noisy.astype(np.float32), clean.astype(np.float32)))
        else:
            small = ndimage.zoom(clean, (1, 0.5, 0.5), order=3, mode="nearest")
            pairs.append((small.astype(np.float32), clean.astype(np.float32)))
    return pairs


def make_trainer(dataset, spec: TrainSpec):
    """Trainer callback for ``pruner.run_loop``: ``spec.steps`` steps per call.

    Each call reshuffles with ``spec.seed + call_index`` so a whole run is
    reproducible from one seed.
    """
    calls = [0]

    def trainer(graph, store, max_steps):
        steps = min(spec.steps, max_steps)
        run = TrainSpec(spec.loss, spec.lr, steps, spec.batch_size, spec.seed + calls[0], spec.clip_norm)
        calls[0] += 1
        new_store, _loss = train(graph, store, dataset, run)
        return new_store, steps

    return trainer
