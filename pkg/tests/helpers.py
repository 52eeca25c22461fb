"""Shared test fixtures: random graphs and independent reference oracles."""

import numpy as np

from prunekit import depgraph
from prunekit.nir import GraphBuilder, NetworkGraph, NodeKind
from prunekit.tensorstore import WeightStore


def random_graph(rng: np.random.Generator, n_blocks=None, max_ch=5) -> NetworkGraph:
    """Random valid graph mixing chains, residual blocks, concat skips,
    pool/transposed-conv round trips and (sometimes) a pixel-shuffle head."""
    res = int(rng.choice([4, 6, 8]))
    b = GraphBuilder((res, res))
    x = b.input(int(rng.integers(1, 4)))
    ch = b._channels[x]
    n_blocks = n_blocks or int(rng.integers(1, 5))
    act = lambda v: (b.relu(v) if rng.random() < 0.5 else b.leaky_relu(v, 0.2))
    for _ in range(n_blocks):
        kind = rng.choice(["conv", "residual", "concat", "updown"])
        if kind == "conv":
            ch = int(rng.integers(1, max_ch + 1))
            x = act(b.conv(x, ch, int(rng.choice([1, 3]))))
        elif kind == "residual":
            r = act(b.conv(x, int(rng.integers(1, max_ch + 1)), 3))
            r = b.conv(r, ch, 3)
            x = b.add_(r, x)
        elif kind == "concat":
            a = act(b.conv(x, int(rng.integers(1, max_ch + 1)), 3))
            c = b.conv(a, int(rng.integers(1, max_ch + 1)), 1)
            x = b.concat([a, c] if rng.random() < 0.5 else [c, x])
            ch = b._channels[x]
        else:
            p = b.max_pool(x, 2)
            c = act(b.conv(p, int(rng.integers(1, max_ch + 1)), 3))
            u = b.conv_transpose(c, int(rng.integers(1, max_ch + 1)), 2, 2)
            x = b.concat([u, x])
            ch = b._channels[x]
    if rng.random() < 0.3:
        x = b.conv(x, 4 * int(rng.integers(1, 3)), 3)
        x = b.pixel_shuffle(x, 2)
    x = b.conv(x, int(rng.integers(1, 4)), 3)
    b.output(x)
    return b.build()


def random_store(graph, rng, bias=True) -> WeightStore:
    store = WeightStore()
    for nid in graph.conv_ids():
        a = graph.nodes[nid].attrs
        store[f"{nid}.kernel"] = rng.uniform(-1, 1, (a["out_channels"], a["in_channels"],
                                                     a["kernel"], a["kernel"])).astype(np.float32)
        if bias:
            store[f"{nid}.bias"] = rng.uniform(-0.5, 0.5, a["out_channels"]).astype(np.float32)
    return store


def random_group_mask(graph, rng, p=0.4):
    flow = depgraph.analyze(graph)
    mask = depgraph.full_mask(graph)
    for g in flow.groups:
        if rng.random() < p:
            for n, c in g.members:
                mask[n][c] = False
    return mask


def zero_masked(store, mask) -> WeightStore:
    """Dense store with pruned output channels' kernels and biases zeroed."""
    out = store.copy()
    for nid, keep in mask.items():
        out[f"{nid}.kernel"][~keep] = 0.0
        if f"{nid}.bias" in out:
            out[f"{nid}.bias"][~keep] = 0.0
    return out


# -- naive loop oracles --------------------------------------------------------

def naive_conv2d(x, w, b, stride, pad):
    c, h, wd = x.shape
    o, i, k, _ = w.shape
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    y = np.zeros((o, ho, wo))
    for oc in range(o):
        for yy in range(ho):
            for xx in range(wo):
                acc = 0.0 if b is None else float(b[oc])
                for ic in range(i):
                    for di in range(k):
                        for dj in range(k):
                            r, s = yy * stride + di - pad, xx * stride + dj - pad
                            if 0 <= r < h and 0 <= s < wd:
                                acc += float(w[oc, ic, di, dj]) * float(x[ic, r, s])
                y[oc, yy, xx] = acc
    return y


def naive_conv_transpose2d(x, w, b, stride, pad):
    c, h, wd = x.shape
    o, i, k, _ = w.shape
    ho = (h - 1) * stride - 2 * pad + k
    wo = (wd - 1) * stride - 2 * pad + k
    y = np.zeros((o, ho, wo))
    for ic in range(i):
        for r in range(h):
            for s in range(wd):
                for oc in range(o):
                    for di in range(k):
                        for dj in range(k):
                            yy, xx = r * stride + di - pad, s * stride + dj - pad
                            if 0 <= yy < ho and 0 <= xx < wo:
                                y[oc, yy, xx] += float(x[ic, r, s]) * float(w[oc, ic, di, dj])
    if b is not None:
        y += np.asarray(b, dtype=np.float64)[:, None, None]
    return y


def naive_max_pool(x, k, stride):
    c, h, w = x.shape
    ho, wo = (h - k) // stride + 1, (w - k) // stride + 1
    y = np.empty((c, ho, wo))
    for ch in range(c):
        for r in range(ho):
            for s in range(wo):
                y[ch, r, s] = max(x[ch, r * stride + a, s * stride + bb]
                                  for a in range(k) for bb in range(k))
    return y


def naive_pixel_shuffle(x, r):
    c, h, w = x.shape
    oc = c // (r * r)
    y = np.empty((oc, h * r, w * r))
    for ch in range(oc):
        for i in range(h * r):
            for j in range(w * r):
                y[ch, i, j] = x[ch * r * r + (i % r) * r + (j % r), i // r, j // r]
    return y


def naive_forward(graph: NetworkGraph, store, x):
    """Whole-graph forward using only the loop oracles above."""
    vals = {}
    for nid in graph.topo_order():
        node = graph.nodes[nid]
        a = node.attrs
        xs = [vals[s] for s in graph.inputs_of(nid)]
        k = node.kind
        if k is NodeKind.INPUT:
            y = np.asarray(x, dtype=np.float64)
        elif k is NodeKind.OUTPUT:
            y = xs[0]
        elif k is NodeKind.CONV2D:
            y = naive_conv2d(xs[0], store[f"{nid}.kernel"], store.get(f"{nid}.bias"),
                             a["stride"], a["padding"])
        elif k is NodeKind.CONV2D_TRANSPOSE:
            y = naive_conv_transpose2d(xs[0], store[f"{nid}.kernel"], store.get(f"{nid}.bias"),
                                       a["stride"], a["padding"])
        elif k is NodeKind.RELU:
            y = np.array([[[max(v, 0.0) for v in row] for row in plane] for plane in xs[0]])
        elif k is NodeKind.LEAKY_RELU:
            s = a["slope"]
            y = np.array([[[v if v > 0 else s * v for v in row] for row in plane] for plane in xs[0]])
        elif k is NodeKind.MAX_POOL2D:
            y = naive_max_pool(xs[0], a["kernel"], a["stride"])
        elif k is NodeKind.PIXEL_SHUFFLE:
            y = naive_pixel_shuffle(xs[0], a["factor"])
        elif k is NodeKind.ELTWISE_ADD:
            y = xs[0] + xs[1]
        elif k is NodeKind.CONCAT:
            y = np.concatenate(xs, axis=0)
        vals[nid] = y
    return vals[graph.output_ids()[0]]


def brute_force_sparsity(graph, mask):
    """Weight recount by walking channel index lists, independent of depgraph."""
    # per node output: list of "alive" flags per channel
    alive = {}
    for nid in graph.topo_order():
        node = graph.nodes[nid]
        ins = [alive[s] for s in graph.inputs_of(nid)]
        if node.kind is NodeKind.INPUT:
            alive[nid] = [True] * node.attrs["channels"]
        elif node.is_conv:
            alive[nid] = [bool(v) for v in mask[nid]]
        elif node.kind is NodeKind.CONCAT:
            alive[nid] = [v for x in ins for v in x]
        elif node.kind is NodeKind.ELTWISE_ADD:
            alive[nid] = [any(vs) for vs in zip(*ins)]
        elif node.kind is NodeKind.PIXEL_SHUFFLE:
            r = node.attrs["factor"]
            alive[nid] = [True] * (len(ins[0]) // (r * r))
        else:
            alive[nid] = list(ins[0])
    total = kept = 0
    for nid in graph.conv_ids():
        a = graph.nodes[nid].attrs
        (src,) = graph.inputs_of(nid)
        for oc in range(a["out_channels"]):
            for ic in range(a["in_channels"]):
                for _ in range(a["kernel"] ** 2):
                    total += 1
                    kept += bool(mask[nid][oc]) and alive[src][ic]
    return 1 - kept / total


# -- finite differences -------------------------------------------------------------

def numeric_grad(f, x, h=1e-3):
    """Central differences of scalar f at every element of x (x modified in place, restored)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12))


def op_gradient_errors(seed=0):
    """Relative error of every operator's backward pass vs central differences.

    Returns {op_name: max relative error over its inputs and parameters}.
    """
    from prunekit import engine

    rng = np.random.default_rng(seed)
    errs = {}

    def check(name, fwd, bwd, tensors):
        dy = rng.normal(size=fwd().shape)
        loss = lambda: float(np.sum(fwd() * dy))
        ana = bwd(dy)
        worst = 0.0
        for t, a in zip(tensors, ana):
            worst = max(worst, rel_err(numeric_grad(loss, t), a))
        errs[name] = worst

    for stride, pad in ((1, 1), (2, 1), (1, 0)):
        x = rng.normal(size=(2, 3, 5, 6))
        w = rng.normal(size=(4, 3, 3, 3))
        b = rng.normal(size=4)
        check(f"conv2d_s{stride}_p{pad}", lambda: engine.conv2d(x, w, b, stride, pad),
              lambda dy: engine.conv2d_backward(dy, x, w, stride, pad), [x, w, b])
    for k, stride, pad in ((2, 2, 0), (3, 2, 1), (3, 1, 0)):
        x = rng.normal(size=(2, 3, 4, 3))
        w = rng.normal(size=(2, 3, k, k))
        b = rng.normal(size=2)
        check(f"conv_transpose2d_k{k}_s{stride}_p{pad}",
              lambda: engine.conv_transpose2d(x, w, b, stride, pad),
              lambda dy: engine.conv_transpose2d_backward(dy, x, w, stride, pad), [x, w, b])
    # well-separated values keep finite differences away from max ties
    x = rng.permutation(np.arange(2 * 3 * 6 * 6, dtype=float)).reshape(2, 3, 6, 6) * 0.01
    check("max_pool2d", lambda: engine.max_pool2d(x, 2, 2),
          lambda dy: [engine.max_pool2d_backward(dy, x, 2, 2)], [x])
    x = rng.normal(size=(2, 8, 3, 3))
    check("pixel_shuffle", lambda: engine.pixel_shuffle(x, 2),
          lambda dy: [engine.pixel_unshuffle(dy, 2)], [x])

    # graph-level ops (relu, leaky relu, add, concat) through engine.gradients
    b_ = GraphBuilder((4, 4))
    inp = b_.input(2)
    c1 = b_.conv(inp, 3, 3, name="c1")
    r = b_.relu(c1)
    l = b_.leaky_relu(b_.conv(inp, 3, 3, name="c2"), 0.2)
    s = b_.add_(r, l)
    cat = b_.concat([s, inp])
    b_.output(b_.conv(cat, 2, 3, name="c3"))
    g = b_.build()
    store = random_store(g, rng)
    params = {k: v.astype(np.float64) for k, v in store.items()}
    x = rng.normal(size=(2, 2, 4, 4))
    from prunekit.engine import _plan, _run
    plan = _plan(g)
    out = lambda: _run(plan, params, x, 2)[g.output_ids()[0]]
    dy = rng.normal(size=out().shape)
    loss = lambda: float(np.sum(out() * dy))
    pg, dx = engine.gradients(g, params, x, dy)
    worst = rel_err(numeric_grad(loss, x), dx)
    for k in params:
        worst = max(worst, rel_err(numeric_grad(loss, params[k]), pg[k]))
    errs["graph(relu,leaky_relu,add,concat)"] = worst
    return errs


# -- hand-traced toy network ---------------------------------------------------------

TOY_CONV1_MAX = [0.05, 0.30, 0.12, 0.50]
TOY_CONV2_MAX = [0.20, 0.04, 0.44, 0.10]


def toy_network():
    """conv1 1->4 (4x4 out), conv2 4->4 stride 2 (2x2 out), conv3 4->1 1x1: 184 weights.

    Per-output-channel max |w| is fixed by TOY_CONV1_MAX / TOY_CONV2_MAX; every
    other weight is at most half its channel's max. conv2's extreme weight sits
    on input channel 3, which the trace never removes.
    """
    b = GraphBuilder((4, 4))
    x = b.input(1)
    x = b.relu(b.conv(x, 4, 3, name="conv1"))
    x = b.relu(b.conv(x, 4, 3, stride=2, name="conv2"))
    b.output(b.conv(x, 1, 1, name="conv3"))
    g = b.build()
    rng = np.random.default_rng(1234)
    k1 = rng.uniform(-0.5, 0.5, (4, 1, 3, 3)) * np.array(TOY_CONV1_MAX)[:, None, None, None]
    k1[:, 0, 1, 1] = TOY_CONV1_MAX
    k2 = rng.uniform(-0.5, 0.5, (4, 4, 3, 3)) * np.array(TOY_CONV2_MAX)[:, None, None, None]
    k2[:, 3, 0, 2] = np.negative(TOY_CONV2_MAX)
    store = WeightStore({
        "conv1.kernel": k1.astype(np.float32), "conv1.bias": np.zeros(4, np.float32),
        "conv2.kernel": k2.astype(np.float32), "conv2.bias": np.zeros(4, np.float32),
        "conv3.kernel": np.full((1, 4, 1, 1), 0.9, np.float32), "conv3.bias": np.zeros(1, np.float32),
    })
    return g, store


# Manual execution of the loop on the toy network: method D, T_i = 0.05,
# S_i = 0.3, depth floor 1, budget 60 steps, no-op trainer using 10 steps per
# call, target Q = 30 and a scripted evaluator.
#   r1 = log10(16), r2 = log10(4); T_l = T_b * (1 - S_l) * r_l.
# Weight counts: conv1 1*o1*9, conv2 i2*o2*9, conv3 o2*1; total 184.
TOY_SCRIPT = [32.0, 29.0, 30.5, 31.0, 29.5, 29.8, 29.9]
_R1, _R2 = np.log10(16), np.log10(4)

# each entry: (pass number within round, T_b, {layer: T_l}, pruned, S_c numerator)
# passes that prune nothing are listed only by their count
HAND_TRACE = [
    {   # round 1: target S = 0.3
        "S": 0.3,
        "pruning_passes": [
            (1, 0.05, {"conv1": 0.05 * 1.0 * _R1, "conv2": 0.05 * 1.0 * _R2}, {"conv1": [0]}, 45),
            (2, 0.10, {"conv1": 0.10 * 0.75 * _R1, "conv2": 0.10 * 1.0 * _R2}, {"conv2": [1]}, 73),
        ],
        "n_passes": 2, "status": "reached", "S_c": 73 / 184,
        "evaluations": [(10, 29.0), (20, 30.5)], "passed": True,
    },
    {   # round 2: target S = 0.3 + 73/184
        "S": 0.3 + 73 / 184,
        "pruning_passes": [
            (3, 0.15, {"conv1": 0.15 * 0.75 * _R1, "conv2": 0.15 * 0.75 * _R2}, {"conv1": [2]}, 109),
            (5, 0.25, {"conv1": 0.25 * 0.50 * _R1, "conv2": 0.25 * 0.75 * _R2}, {"conv2": [3]}, 128),
            (10, 0.50, {"conv1": 0.50 * 0.50 * _R1, "conv2": 0.50 * 0.50 * _R2}, {"conv1": [1]}, 155),
        ],
        "n_passes": 10, "status": "reached", "S_c": 155 / 184,
        "evaluations": [(30, 31.0)], "passed": True,
    },
    {   # round 3: target S = 0.3 + 155/184 > 1, unreachable
        "S": 0.3 + 155 / 184,
        "pruning_passes": [
            (14, 0.70, {"conv1": 0.70 * 0.25 * _R1, "conv2": 0.70 * 0.50 * _R2}, {"conv2": [0]}, 165),
        ],
        # conv2's last channel (0.44) drops below T_l = T_b * 0.25 * r2 once
        # T_b > 2.924, i.e. T_b = 2.95 on pass 59; floor blocks it, mask unchanged
        "n_passes": 59, "status": "saturated", "S_c": 165 / 184,
        "evaluations": [(40, 29.5), (50, 29.8), (60, 29.9)], "passed": False,
    },
]
TOY_FINAL = {"best_round": 1, "final_sparsity": 155 / 184, "final_quality": 31.0,
             "budget_exhausted": True, "pruned": {"conv1": [0, 1, 2], "conv2": [1, 3], "conv3": []}}


def run_toy_loop():
    from prunekit import pruner

    g, store = toy_network()
    script = iter(TOY_SCRIPT)
    cfg = pruner.PruneConfig(method="D", target_quality=30.0, sparsity_increment=0.3,
                             threshold_increment=0.05, total_steps=60, depth_floor=1)
    trainer = lambda graph, s, budget: (s, min(10, budget))
    evaluator = lambda graph, s: next(script)
    return pruner.run_loop(g, store, cfg, trainer, evaluator)


def trace_mismatches(result, tol=1e-12):
    """Compare a run_loop result on the toy network with HAND_TRACE; [] when equal."""
    bad = []
    rep = result.report
    if len(rep.rounds) != len(HAND_TRACE):
        return [f"rounds: {len(rep.rounds)} != {len(HAND_TRACE)}"]
    for ri, (got, want) in enumerate(zip(rep.rounds, HAND_TRACE)):
        tag = f"round {ri + 1}"
        if abs(got.target_sparsity - want["S"]) > tol:
            bad.append(f"{tag}: S {got.target_sparsity} != {want['S']}")
        if len(got.passes) != want["n_passes"]:
            bad.append(f"{tag}: {len(got.passes)} passes != {want['n_passes']}")
        expected = {p[0]: p for p in want["pruning_passes"]}
        for pi, plog in enumerate(got.passes, start=1):
            if pi in expected:
                _, tb, tl, pruned, num = expected[pi]
                if abs(plog.threshold_base - tb) > tol:
                    bad.append(f"{tag} pass {pi}: T_b {plog.threshold_base} != {tb}")
                for n, t in tl.items():
                    if abs(plog.thresholds[n] - t) > tol:
                        bad.append(f"{tag} pass {pi}: T_l[{n}] {plog.thresholds[n]} != {t}")
                if plog.pruned != pruned:
                    bad.append(f"{tag} pass {pi}: pruned {plog.pruned} != {pruned}")
                if abs(plog.sparsity - num / 184) > tol:
                    bad.append(f"{tag} pass {pi}: S_c {plog.sparsity} != {num}/184")
            elif plog.pruned:
                bad.append(f"{tag} pass {pi}: unexpected pruning {plog.pruned}")
        if got.status != want["status"]:
            bad.append(f"{tag}: status {got.status} != {want['status']}")
        if abs(got.sparsity - want["S_c"]) > tol:
            bad.append(f"{tag}: S_c {got.sparsity} != {want['S_c']}")
        if got.evaluations != want["evaluations"]:
            bad.append(f"{tag}: evaluations {got.evaluations} != {want['evaluations']}")
        if got.passed != want["passed"]:
            bad.append(f"{tag}: passed {got.passed}")
    if rep.best_round != TOY_FINAL["best_round"]:
        bad.append(f"best_round {rep.best_round}")
    if abs(rep.final_sparsity - TOY_FINAL["final_sparsity"]) > tol:
        bad.append(f"final_sparsity {rep.final_sparsity}")
    if rep.final_quality != TOY_FINAL["final_quality"]:
        bad.append(f"final_quality {rep.final_quality}")
    if rep.budget_exhausted != TOY_FINAL["budget_exhausted"]:
        bad.append("budget_exhausted")
    if rep.pruned != TOY_FINAL["pruned"]:
        bad.append(f"pruned {rep.pruned}")
    return bad


# -- pruning property check on random graphs -------------------------------------------

def check_prune_properties(seed):
    """Run random prune passes for every method; assert atomicity, floor and D ordering."""
    from prunekit import metrics, pruner

    rng = np.random.default_rng(seed)
    g = random_graph(rng)
    store = random_store(g, rng)
    flow = depgraph.analyze(g)
    members = [m for grp in flow.groups for m in grp.members]
    assert len(members) == len(set(members)), "groups overlap"
    effs = pruner.mac_efficiencies(g)
    for method in pruner.METHODS:
        floor = int(rng.integers(1, 3))
        cfg = pruner.PruneConfig(method=method, depth_floor=floor, threshold_increment=0.05,
                                 sparsity_increment=0.3)
        state = pruner.PruneState(mask=depgraph.full_mask(g))
        for _ in range(4):
            state.threshold_base = float(rng.uniform(0, 1.5))
            mask, plog = pruner.prune_pass(g, store, state, cfg, flow)
            depgraph.check_mask(flow, mask)  # raises on a partially pruned group
            for nid, m in mask.items():
                was = int(np.count_nonzero(state.mask[nid]))
                now = int(np.count_nonzero(m))
                if method != "A" and now < was:
                    assert now >= floor, f"{method}: {nid} pruned to {now} < floor {floor}"
            if method == "D":
                ratios = pruner.pruned_ratios(g, state.mask)
                for a in g.conv_ids():
                    for b in g.conv_ids():
                        if effs[a] == effs[b] and ratios[a] < ratios[b]:
                            assert plog.thresholds[a] >= plog.thresholds[b]
                        if ratios[a] == ratios[b] and effs[a] > effs[b]:
                            assert plog.thresholds[a] >= plog.thresholds[b]
            assert plog.sparsity == metrics.network_sparsity(g, mask, flow)
            state.mask = mask
    return g
