"""Quality-gated iterative output-channel pruning.

Method variants differ only in how each layer's magnitude threshold is
derived from the shared threshold base ``T_b``:

    A   T_l = T_b                          (no depth floor)
    B   T_l = T_b                          (depth floor)
    C   T_l = T_b * r_l                    (depth floor)
    D   T_l = T_b * (1 - S_l) * r_l        (depth floor)

where ``r_l = log10(MAC_l / weights_l)`` and ``S_l`` is the fraction of the
layer's original output channels already pruned.

Masks are always expressed over the *reference* (unpruned) graph. The live
network is the physically shrunk ``apply_mask(reference, ., mask)`` pair.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict
from typing import Callable

import numpy as np

from . import depgraph, metrics, quality
from .depgraph import ChannelFlow, MaskError
from .nir import NetworkGraph, Node
from .tensorstore import WeightStore

METHODS = ("A", "B", "C", "D")


@dataclass(frozen=True)
class PruneConfig:
    method: str = "D"
    target_quality: float | tuple = 0.0
    metric: str = "psnr"
    sparsity_increment: float = 0.1
    threshold_increment: float = 0.01
    total_steps: int = 1000
    depth_floor: int = 1
    bytes_per_element: int = 4
    max_passes: int = 100_000

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if not 0 < self.sparsity_increment < 1:
            raise ValueError("sparsity_increment must lie in (0, 1)")
        if self.threshold_increment <= 0:
            raise ValueError("threshold_increment must be positive")
        if self.method != "A" and self.depth_floor < 1:
            raise ValueError("depth_floor must be >= 1 for methods B, C and D")
        if self.total_steps < 0:
            raise ValueError("total_steps must be non-negative")
        if self.metric not in ("psnr", "ssim", "both"):
            raise ValueError(f"metric must be psnr, ssim or both, got {self.metric!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "PruneConfig":
        d = dict(d)
        if isinstance(d.get("target_quality"), list):
            d["target_quality"] = tuple(d["target_quality"])
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        if isinstance(d["target_quality"], tuple):
            d["target_quality"] = list(d["target_quality"])
        return d


@dataclass
class PruneState:
    mask: dict[str, np.ndarray]
    threshold_base: float = 0.0
    layer_ratio: dict[str, float] = field(default_factory=dict)
    step: int = 0
    sparsity: float = 0.0
    status: str = "init"


# -- thresholds ---------------------------------------------------------------

def layer_threshold(t_base: float, ratio: float, r: float, method: str) -> float:
    if method in ("A", "B"):
        return t_base
    if method == "C":
        return t_base * r
    if method == "D":
        return t_base * (1.0 - ratio) * r
    raise ValueError(f"unknown method {method!r}")


def pruned_ratios(graph: NetworkGraph, mask) -> dict[str, float]:
    return {nid: 1.0 - np.count_nonzero(mask[nid]) / len(mask[nid]) if len(mask[nid]) else 0.0
            for nid in graph.conv_ids()}


def mac_efficiencies(graph: NetworkGraph) -> dict[str, float]:
    """Per-layer r_l of the reference graph.

    log10(MAC/weights) reduces to log10 of the spatial extent the kernel sweeps,
    so it does not change under channel pruning; using the reference value
    keeps it defined for layers that lost all their inputs.
    """
    out = {}
    for c in metrics.layer_costs(graph):
        out[c.node_id] = c.r if c.r is not None else metrics.MAC_EFFICIENCY_FLOOR
    return out


def channel_magnitudes(graph: NetworkGraph, store: WeightStore, mask) -> dict[str, np.ndarray]:
    """Max |w| per original output channel; pruned channels read as NaN.

    ``store`` may be dense (matches ``graph``) or already shrunk by ``mask``.
    """
    out = {}
    for nid in graph.conv_ids():
        k = store.kernel(nid)
        vals = np.abs(k).reshape(k.shape[0], -1).max(axis=1, initial=0.0).astype(np.float64)
        keep = mask[nid]
        full = np.full(len(keep), np.nan)
        if k.shape[0] == len(keep):
            full[:] = vals
            full[~keep] = np.nan
        elif k.shape[0] == np.count_nonzero(keep):
            full[keep] = vals
        else:
            raise MaskError(f"{nid}: store has {k.shape[0]} output channels, mask keeps "
                            f"{np.count_nonzero(keep)} of {len(keep)}")
        out[nid] = full
    return out


# -- one pass -----------------------------------------------------------------

@dataclass
class PassLog:
    threshold_base: float
    thresholds: dict[str, float]
    pruned: dict[str, list[int]]
    sparsity: float

    def to_dict(self) -> dict:
        return {"T_b": self.threshold_base, "T_l": self.thresholds,
                "pruned": self.pruned, "S_c": self.sparsity}


def _is_pruned(mask, group) -> bool:
    n, c = group.members[0]
    return not mask[n][c]


def prune_pass(graph: NetworkGraph, store: WeightStore, state: PruneState, config: PruneConfig,
               flow: ChannelFlow | None = None, magnitudes=None, efficiencies=None):
    """Prune every group whose members all fall below their layer thresholds.

    Returns ``(new_mask, PassLog)``; ``state.mask`` is left untouched. Methods
    B-D skip a group if it would leave any member layer with fewer than
    ``depth_floor`` output channels; candidates are taken smallest-magnitude
    first, ties pruned from the highest channel index down.
    """
    flow = flow or depgraph.analyze(graph)
    mags = magnitudes if magnitudes is not None else channel_magnitudes(graph, store, state.mask)
    effs = efficiencies if efficiencies is not None else mac_efficiencies(graph)
    ratios = pruned_ratios(graph, state.mask)
    thresholds = {nid: layer_threshold(state.threshold_base, ratios[nid], effs[nid], config.method)
                  for nid in graph.conv_ids()}
    mask = {k: v.copy() for k, v in state.mask.items()}

    candidates = []
    for g in flow.groups:
        if _is_pruned(mask, g):
            continue
        if all(mags[n][c] < thresholds[n] for n, c in g.members):
            stat = max(mags[n][c] for n, c in g.members)
            candidates.append((stat, -g.members[0][1], -g.id, g))
    candidates.sort(key=lambda t: t[:3])

    kept = {nid: int(np.count_nonzero(m)) for nid, m in mask.items()}
    pruned: dict[str, list[int]] = {}
    for *_, g in candidates:
        per_layer: dict[str, int] = {}
        for n, _ in g.members:
            per_layer[n] = per_layer.get(n, 0) + 1
        if config.method != "A" and any(kept[n] - cnt < config.depth_floor
                                         for n, cnt in per_layer.items()):
            continue
        for n, c in g.members:
            mask[n][c] = False
            pruned.setdefault(n, []).append(c)
        for n, cnt in per_layer.items():
            kept[n] -= cnt
    pruned = {n: sorted(v) for n, v in pruned.items()}
    sc = metrics.network_sparsity(graph, mask, flow)
    return mask, PassLog(state.threshold_base, thresholds, pruned, sc)


# -- threshold sweep up to the next sparsity target ---------------------------

@dataclass
class RoundLog:
    target_sparsity: float
    status: str = ""
    passes: list[PassLog] = field(default_factory=list)
    sparsity: float = 0.0
    layer_ratio: dict[str, float] = field(default_factory=dict)
    evaluations: list[tuple[int, float]] = field(default_factory=list)
    passed: bool = False

    def to_dict(self) -> dict:
        return {
            "S": self.target_sparsity, "status": self.status,
            "T_b": self.passes[-1].threshold_base if self.passes else None,
            "S_c": self.sparsity, "S_l": self.layer_ratio,
            "passes": [p.to_dict() for p in self.passes],
            "evaluations": [{"g": g, "Q_t": _enc(q)} for g, q in self.evaluations],
            "Q_t": _enc(self.evaluations[-1][1]) if self.evaluations else None,
            "g": self.evaluations[-1][0] if self.evaluations else None,
            "passed": self.passed,
        }


def _enc(v):
    if isinstance(v, tuple):
        return [_enc(x) for x in v]
    return "inf" if isinstance(v, float) and math.isinf(v) else v


def prune_to_target(graph: NetworkGraph, store: WeightStore, state: PruneState,
                    config: PruneConfig, flow: ChannelFlow | None = None):
    """Raise the threshold base in ``T_i`` steps until sparsity exceeds S_c + S_i.

    Returns ``(new_state, RoundLog)``. ``status`` is ``"reached"`` or, when the
    depth floor and frozen layers cap sparsity below the target,
    ``"saturated"``.
    """
    flow = flow or depgraph.analyze(graph)
    mags = channel_magnitudes(graph, store, state.mask)
    effs = mac_efficiencies(graph)
    target = config.sparsity_increment + state.sparsity
    log = RoundLog(target)
    cur = PruneState(mask={k: v.copy() for k, v in state.mask.items()},
                     threshold_base=config.threshold_increment, step=state.step,
                     sparsity=state.sparsity)
    status = "saturated"
    for _ in range(config.max_passes):
        before = {k: v.copy() for k, v in cur.mask.items()}
        mask, plog = prune_pass(graph, store, cur, config, flow, mags, effs)
        log.passes.append(plog)
        cur.mask = mask
        cur.sparsity = plog.sparsity
        cur.threshold_base += config.threshold_increment
        if cur.sparsity > target:
            status = "reached"
            break
        remaining = [g for g in flow.groups if not _is_pruned(mask, g)]
        all_below = all(all(mags[n][c] < plog.thresholds[n] for n, c in g.members)
                        for g in remaining)
        unchanged = all(np.array_equal(before[k], mask[k]) for k in mask)
        if not remaining or (all_below and unchanged):
            break
    cur.status = status
    cur.layer_ratio = pruned_ratios(graph, cur.mask)
    log.status = status
    log.sparsity = cur.sparsity
    log.layer_ratio = cur.layer_ratio
    return cur, log


# -- physical rewrite -----------------------------------------------------------

def apply_mask(graph: NetworkGraph, store: WeightStore, mask, flow=None):
    """Shrink kernels, biases and channel attributes according to ``mask``.

    ``store`` must be dense (consistent with ``graph``). Returns a new
    ``(graph, store)`` pair; the inputs are not modified.
    """
    flow = flow or depgraph.analyze(graph)
    kin = depgraph.kept_inputs(graph, mask, flow)
    new_nodes = {}
    for nid, node in graph.nodes.items():
        if node.is_conv:
            attrs = dict(node.attrs)
            attrs["out_channels"] = int(np.count_nonzero(mask[nid]))
            attrs["in_channels"] = int(np.count_nonzero(kin[nid]))
            new_nodes[nid] = Node(nid, node.kind, attrs)
        else:
            new_nodes[nid] = Node(nid, node.kind, dict(node.attrs))
    new_graph = NetworkGraph(new_nodes, list(graph.edges), tuple(graph.input_resolution))

    new_store = WeightStore()
    for name, arr in store.items():
        nid, _, kind = name.rpartition(".")
        if nid in mask and kind == "kernel":
            new_store[name] = np.ascontiguousarray(arr[mask[nid]][:, kin[nid]])
        elif nid in mask and kind == "bias":
            new_store[name] = np.ascontiguousarray(arr[mask[nid]])
        else:
            new_store[name] = arr.copy()
    return new_graph, new_store


def expand_store(graph: NetworkGraph, store: WeightStore, mask, flow=None) -> WeightStore:
    """Inverse of ``apply_mask`` on weights: scatter back with zeros in pruned slots."""
    kin = depgraph.kept_inputs(graph, mask, flow)
    out = WeightStore()
    for name, arr in store.items():
        nid, _, kind = name.rpartition(".")
        if nid in mask and kind == "kernel":
            a = graph.nodes[nid].attrs
            full = np.zeros((a["out_channels"], a["in_channels"], *arr.shape[2:]), dtype=arr.dtype)
            full[np.ix_(mask[nid], kin[nid])] = arr
            out[name] = full
        elif nid in mask and kind == "bias":
            full = np.zeros(len(mask[nid]), dtype=arr.dtype)
            full[mask[nid]] = arr
            out[name] = full
        else:
            out[name] = arr.copy()
    return out


def pruned_channels(mask) -> dict[str, list[int]]:
    return {nid: [int(c) for c in np.flatnonzero(~m)] for nid, m in mask.items()}


# -- outer loop -----------------------------------------------------------------

Trainer = Callable[[NetworkGraph, WeightStore, int], tuple]
Evaluator = Callable[[NetworkGraph, WeightStore], object]


class LoopAbort(RuntimeError):
    pass


@dataclass
class PruneReport:
    config: dict
    baseline_quality: object
    rounds: list[RoundLog] = field(default_factory=list)
    best_round: int | None = None  # None: the unpruned baseline
    budget_exhausted: bool = False
    final_sparsity: float = 0.0
    final_quality: object = None
    final_passed: bool = False
    pruned: dict[str, list[int]] = field(default_factory=dict)
    costs: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "baseline_quality": _enc(self.baseline_quality),
            "rounds": [r.to_dict() for r in self.rounds],
            "best_round": self.best_round,
            "budget_exhausted": self.budget_exhausted,
            "final_sparsity": self.final_sparsity,
            "final_quality": _enc(self.final_quality),
            "final_passed": self.final_passed,
            "pruned_channels": self.pruned,
            "costs": self.costs,
        }


def _quality_value(q, metric):
    if isinstance(q, quality.QualityReport):
        if metric == "both":
            return (q.psnr, q.ssim)
        return q.value(metric)
    return float(q)


def _gate(value, target, metric) -> bool:
    if metric == "both":
        return value[0] > target[0] and value[1] > target[1]
    return value > target


@dataclass
class LoopResult:
    graph: NetworkGraph
    store: WeightStore
    mask: dict[str, np.ndarray]
    report: PruneReport


def run_loop(graph: NetworkGraph, store: WeightStore, config: PruneConfig,
             trainer: Trainer, evaluator: Evaluator) -> LoopResult:
    """Alternate threshold pruning and retraining until the step budget runs out.

    ``trainer(graph, store, max_steps)`` returns ``(store, steps_used)`` and
    must not use more than ``max_steps``. ``evaluator(graph, store)`` returns a
    number or a ``QualityReport``. The result is the most recent network whose
    quality strictly exceeded ``config.target_quality`` (or the input network
    when none did, with ``final_passed`` telling which).
    """
    flow = depgraph.analyze(graph)
    metric = config.metric
    Q = config.target_quality

    def evaluate(g, s):
        try:
            return _quality_value(evaluator(g, s), metric)
        except Exception as exc:
            raise LoopAbort(f"evaluator failed: {exc}") from exc

    base_q = evaluate(graph, store)
    report = PruneReport(config.to_dict(), base_q)
    state = PruneState(mask=depgraph.full_mask(graph))
    cur_graph, cur_store = graph, store
    best = LoopResult(graph, store, state.mask, report)
    best_q, best_ok = base_q, _gate(base_q, Q, metric)

    while True:
        new_state, rlog = prune_to_target(graph, cur_store, state, config, flow)
        report.rounds.append(rlog)
        changed = any(not np.array_equal(state.mask[k], new_state.mask[k]) for k in state.mask)
        dense = expand_store(graph, cur_store, state.mask, flow)
        cur_graph, cur_store = apply_mask(graph, dense, new_state.mask, flow)
        state = new_state

        while True:
            budget = config.total_steps - state.step
            if budget > 0:
                try:
                    cur_store, used = trainer(cur_graph, cur_store, budget)[:2]
                except Exception as exc:
                    raise LoopAbort(f"trainer failed: {exc}") from exc
                state.step += int(used)
            q = evaluate(cur_graph, cur_store)
            rlog.evaluations.append((state.step, q))
            if _gate(q, Q, metric) or state.step >= config.total_steps:
                break
        rlog.passed = _gate(q, Q, metric)
        if rlog.passed:
            best = LoopResult(cur_graph, cur_store, {k: v.copy() for k, v in state.mask.items()},
                              report)
            best_q, best_ok = q, True
            report.best_round = len(report.rounds) - 1
        if state.step >= config.total_steps:
            report.budget_exhausted = True
            break
        if not changed:
            break

    report.final_quality = best_q
    report.final_passed = best_ok
    report.final_sparsity = metrics.network_sparsity(graph, best.mask, flow)
    report.pruned = pruned_channels(best.mask)
    ref_cost = metrics.network_cost(graph, bytes_per_element=config.bytes_per_element)
    cost = metrics.network_cost(graph, best.mask, config.bytes_per_element, flow)
    report.costs = metrics.cost_rows(cost, ref_cost)
    return best
