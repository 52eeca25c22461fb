"""Command-line front end.

Subcommands: analyze, prune, loop, report, infer, eval, plus the helpers
topology, init and train for producing inputs. Every command exits 0 on
success; failures print one ``error: <Kind>: <message>`` line to stderr and
exit 1.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import math
import os
import sys

import numpy as np

from . import __version__, depgraph, engine, imageio, metrics, nir, pruner, quality, tensorstore

SEED_ENV = "PRUNEKIT_SEED"


class CliError(Exception):
    pass


# -- helpers -------------------------------------------------------------------

def _jsonable(v):
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if math.isnan(v):
            return None
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return v
    return v


def dump_json(obj) -> str:
    return json.dumps(_jsonable(obj), indent=1) + "\n"


def _write(path, text):
    with open(path, "w") as f:
        f.write(text)


def _sha256_file(path) -> str:
    with open(path, "rb") as f:
        return hashlib.sha256(f.read()).hexdigest()


def _sha256_pairs(pairs) -> str:
    h = hashlib.sha256()
    for x, y in pairs:
        for a in (x, y):
            a = np.ascontiguousarray(a, dtype="<f4")
            h.update(str(a.shape).encode())
            h.update(a.tobytes())
    return h.hexdigest()


def _seed(args) -> int:
    if getattr(args, "seed", None) is not None:
        return args.seed
    return int(os.environ.get(SEED_ENV, "0"))


def _load_graph(args) -> nir.NetworkGraph:
    if getattr(args, "topology", None):
        graph = nir.TOPOLOGIES[args.topology]()
    elif getattr(args, "graph", None):
        try:
            graph = nir.NetworkGraph.load(args.graph)
        except (OSError, ValueError, KeyError) as exc:
            raise CliError(f"{args.graph}: {exc}") from exc
    else:
        raise CliError("one of --graph or --topology is required")
    problems = nir.validate(graph)
    if problems:
        raise CliError(f"{getattr(args, 'graph', None) or args.topology}: invalid graph: "
                       + "; ".join(problems))
    return graph


def _load_weights(path, graph) -> tensorstore.WeightStore:
    store = tensorstore.load(path)
    problems = store.check_against(graph)
    if problems:
        raise CliError(f"{path}: weights do not match graph: " + "; ".join(problems))
    return store


def _load_pairs(spec: str, graph: nir.NetworkGraph, seed: int):
    """``synthetic:<denoise|upscale>:<count>`` or a pairs manifest path."""
    if spec.startswith("synthetic:"):
        try:
            _, kind, count = spec.split(":")
            count = int(count)
        except ValueError:
            raise CliError(f"bad synthetic data spec {spec!r}; use synthetic:KIND:COUNT") from None
        h, _w = graph.input_resolution
        channels = graph.nodes[graph.input_id()].attrs["channels"]
        size = 2 * h if kind == "upscale" else h
        return engine.make_synthetic_dataset(kind, seed, count, size=size, channels=channels)
    return imageio.read_pairs(spec)


def _csv(rows, columns) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow(r)
    return buf.getvalue()


def _config(args) -> pruner.PruneConfig:
    """Defaults < --config file < explicit flags."""
    values = pruner.PruneConfig().to_dict()
    if getattr(args, "config", None):
        with open(args.config) as f:
            file_values = json.load(f)
        unknown = set(file_values) - set(values)
        if unknown:
            raise CliError(f"{args.config}: unknown config fields {sorted(unknown)}")
        values.update(file_values)
    flags = {
        "method": "method", "threshold_increment": "threshold_increment",
        "sparsity_increment": "sparsity_increment", "depth_floor": "depth_floor",
        "bytes_per_element": "bytes_per_element", "total_steps": "max_steps",
        "metric": "metric",
    }
    for field, attr in flags.items():
        v = getattr(args, attr, None)
        if v is not None:
            values[field] = v
    tq = getattr(args, "target_quality", None)
    if tq is not None and tq != "baseline":
        values["target_quality"] = [float(x) for x in tq.split(",")] if "," in tq else float(tq)
    return pruner.PruneConfig.from_dict(values)


# -- commands ------------------------------------------------------------------

def cmd_topology(args, out):
    graph = nir.TOPOLOGIES[args.name]()
    graph.save(args.out)
    out.write(f"wrote {args.out}\n")


def cmd_init(args, out):
    graph = _load_graph(args)
    store = tensorstore.init_weights(graph, _seed(args))
    tensorstore.save(store, args.out)
    out.write(f"wrote {args.out}\n")


def _train_spec(args, seed):
    return engine.TrainSpec(loss=args.loss, lr=args.lr, steps=args.steps_per_round,
                            batch_size=args.batch_size, seed=seed)


def cmd_train(args, out):
    graph = _load_graph(args)
    store = _load_weights(args.weights, graph)
    seed = _seed(args)
    pairs = _load_pairs(args.train_data, graph, seed)
    spec = engine.TrainSpec(loss=args.loss, lr=args.lr, steps=args.steps,
                            batch_size=args.batch_size, seed=seed)
    store, loss = engine.train(graph, store, pairs, spec)
    tensorstore.save(store, args.out)
    out.write(dump_json({"final_loss": loss, "steps": args.steps, "weights": args.out}))


def cmd_analyze(args, out):
    graph = _load_graph(args)
    if args.weights:
        _load_weights(args.weights, graph)
    cost = metrics.network_cost(graph, bytes_per_element=args.bytes_per_element)
    out.write(_csv(metrics.cost_rows(cost), metrics.REPORT_COLUMNS))
    groups = depgraph.build_groups(graph)
    if args.groups_out:
        _write(args.groups_out, dump_json(depgraph.groups_to_json(groups)))


def cmd_prune(args, out):
    graph = _load_graph(args)
    store = _load_weights(args.weights, graph)
    config = _config(args)
    state = pruner.PruneState(mask=depgraph.full_mask(graph))
    new_state, rlog = pruner.prune_to_target(graph, store, state, config)
    new_graph, new_store = pruner.apply_mask(graph, store, new_state.mask)
    new_graph.save(args.out_prefix + ".graph.json")
    tensorstore.save(new_store, args.out_prefix + ".weights.bin")
    ref = metrics.network_cost(graph, bytes_per_element=config.bytes_per_element)
    cost = metrics.network_cost(graph, new_state.mask, config.bytes_per_element)
    report = {"config": config.to_dict(), "rounds": [rlog.to_dict()],
              "pruned_channels": pruner.pruned_channels(new_state.mask),
              "final_sparsity": new_state.sparsity, "costs": metrics.cost_rows(cost, ref)}
    _write(args.out_prefix + ".report.json", dump_json(report))
    out.write(f"status={new_state.status} sparsity={new_state.sparsity:.6f} "
              f"T_b={rlog.passes[-1].threshold_base:.6g}\n")


def cmd_loop(args, out):
    graph = _load_graph(args)
    store = _load_weights(args.weights, graph)
    seed = _seed(args)
    train_pairs = _load_pairs(args.train_data, graph, seed)
    val_pairs = _load_pairs(args.val_data, graph, seed + 1)
    evaluator = quality.make_evaluator(val_pairs, args.peak)
    if args.target_quality in (None, "baseline"):
        base = evaluator(graph, store)
        metric = args.metric or "psnr"
        target = (base.psnr, base.ssim) if metric == "both" else base.value(metric)
        args.target_quality = ",".join(map(repr, target)) if metric == "both" else repr(target)
    config = _config(args)
    spec = _train_spec(args, seed)
    result = pruner.run_loop(graph, store, config, engine.make_trainer(train_pairs, spec),
                             evaluator)
    prefix = args.out_prefix
    result.graph.save(prefix + ".graph.json")
    tensorstore.save(result.store, prefix + ".weights.bin")
    report_text = dump_json(result.report.to_dict())
    _write(prefix + ".report.json", report_text)
    manifest = {
        "tool": "prunekit", "version": __version__, "command": "loop", "seed": seed,
        "config": config.to_dict(),
        "train": {"loss": spec.loss, "lr": spec.lr, "steps_per_round": spec.steps,
                  "batch_size": spec.batch_size, "clip_norm": spec.clip_norm},
        "inputs": {"graph": hashlib.sha256(graph.to_json().encode()).hexdigest(),
                   "weights": _sha256_file(args.weights),
                   "train_data": _sha256_pairs(train_pairs),
                   "val_data": _sha256_pairs(val_pairs)},
        "rounds": [{"T_b": r.passes[-1].threshold_base if r.passes else None,
                    "S": r.target_sparsity, "S_c": r.sparsity, "S_l": r.layer_ratio,
                    "status": r.status,
                    "evaluations": [{"g": g, "Q_t": q} for g, q in r.evaluations],
                    "passed": r.passed} for r in result.report.rounds],
        "outputs": {"graph": _sha256_file(prefix + ".graph.json"),
                    "weights": _sha256_file(prefix + ".weights.bin"),
                    "report": hashlib.sha256(report_text.encode()).hexdigest()},
    }
    _write(prefix + ".manifest.json", dump_json(manifest))
    rep = result.report
    out.write(f"rounds={len(rep.rounds)} sparsity={rep.final_sparsity:.6f} "
              f"quality={_jsonable(rep.final_quality)} passed={rep.final_passed} "
              f"budget_exhausted={rep.budget_exhausted}\n")


def _same_topology(a: nir.NetworkGraph, b: nir.NetworkGraph) -> list[str]:
    diffs = []
    if list(a.nodes) != list(b.nodes):
        diffs.append("node ids differ")
    if a.edges != b.edges:
        diffs.append("edges differ")
    if tuple(a.input_resolution) != tuple(b.input_resolution):
        diffs.append("input resolution differs")
    for nid in set(a.nodes) & set(b.nodes):
        na, nb = a.nodes[nid], b.nodes[nid]
        strip = lambda d: {k: v for k, v in d.items() if k not in ("in_channels", "out_channels")}
        if na.kind != nb.kind or strip(na.attrs) != strip(nb.attrs):
            diffs.append(f"node {nid} differs beyond channel counts")
    return diffs


def cmd_report(args, out):
    before = nir.NetworkGraph.load(args.before_graph)
    after = nir.NetworkGraph.load(args.after_graph)
    diffs = _same_topology(before, after)
    if diffs:
        raise CliError("topology mismatch: " + "; ".join(diffs))
    if args.before_weights:
        _load_weights(args.before_weights, before)
    if args.after_weights:
        _load_weights(args.after_weights, after)
    bpe = args.bytes_per_element
    c0 = metrics.network_cost(before, bytes_per_element=bpe)
    c1 = metrics.network_cost(after, bytes_per_element=bpe)
    pct = lambda x, y: f"{100 * y / x:.2f}" if x else "100.00"
    rows = [
        {"metric": "macs", "original": c0.macs, "pruned": c1.macs, "pct_of_original": pct(c0.macs, c1.macs)},
        {"metric": "weights", "original": c0.weights, "pruned": c1.weights,
         "pct_of_original": pct(c0.weights, c1.weights)},
        {"metric": "activations", "original": c0.activations, "pruned": c1.activations,
         "pct_of_original": pct(c0.activations, c1.activations)},
        {"metric": "bw_elements", "original": c0.weights + c0.activations,
         "pruned": c1.weights + c1.activations,
         "pct_of_original": pct(c0.weights + c0.activations, c1.weights + c1.activations)},
        {"metric": "bw_bytes", "original": c0.bandwidth, "pruned": c1.bandwidth,
         "pct_of_original": pct(c0.bandwidth, c1.bandwidth)},
    ]
    out.write(_csv(rows, ("metric", "original", "pruned", "pct_of_original")))
    if args.layers_out:
        _write(args.layers_out, _csv(metrics.cost_rows(c1, c0), metrics.REPORT_COLUMNS))


def cmd_infer(args, out):
    graph = _load_graph(args)
    store = _load_weights(args.weights, graph)
    x = imageio.read_image(args.input)
    y = engine.forward(graph, store, x)
    imageio.write_image(args.output, y)
    out.write(f"wrote {args.output} shape={list(y.shape)}\n")


def cmd_eval(args, out):
    graph = _load_graph(args)
    store = _load_weights(args.weights, graph)
    pairs = imageio.read_pairs(args.pairs)
    rep = quality.evaluate_dataset(graph, store, pairs, args.peak)
    out.write(dump_json(rep.to_dict()))


# -- parser ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="prunekit", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"prunekit {__version__}")
    sub = p.add_subparsers(dest="command")

    def graph_args(sp, weights=True, weights_required=True):
        sp.add_argument("--graph", help="graph JSON file")
        sp.add_argument("--topology", choices=sorted(nir.TOPOLOGIES),
                        help="use a built-in topology instead of --graph")
        if weights:
            sp.add_argument("--weights", required=weights_required, help="weight store file")

    def prune_args(sp):
        sp.add_argument("--config", help="JSON file with PruneConfig fields")
        sp.add_argument("--method", choices=pruner.METHODS)
        sp.add_argument("--threshold-increment", type=float)
        sp.add_argument("--sparsity-increment", type=float)
        sp.add_argument("--depth-floor", type=int)
        sp.add_argument("--bytes-per-element", type=int, choices=(1, 2, 4))
        sp.add_argument("--out-prefix", required=True)
        sp.add_argument("--seed", type=int)

    sp = sub.add_parser("topology", help="write a built-in graph as JSON")
    sp.add_argument("--name", choices=sorted(nir.TOPOLOGIES), required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_topology)

    sp = sub.add_parser("init", help="random He-initialised weights for a graph")
    graph_args(sp, weights=False)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_init)

    sp = sub.add_parser("train", help="train weights on image pairs")
    graph_args(sp)
    sp.add_argument("--train-data", required=True)
    sp.add_argument("--steps", type=int, default=500)
    sp.add_argument("--lr", type=float, default=0.05)
    sp.add_argument("--batch-size", type=int, default=8)
    sp.add_argument("--loss", choices=("mse", "l1"), default="mse")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("analyze", help="per-layer cost CSV and channel groups")
    graph_args(sp, weights_required=False)
    sp.add_argument("--bytes-per-element", type=int, choices=(1, 2, 4), default=4)
    sp.add_argument("--groups-out", help="write channel groups JSON here")
    sp.set_defaults(func=cmd_analyze)

    sp = sub.add_parser("prune", help="one threshold sweep to the next sparsity target")
    graph_args(sp)
    prune_args(sp)
    sp.set_defaults(func=cmd_prune)

    sp = sub.add_parser("loop", help="iterative prune / retrain / quality-gate loop")
    graph_args(sp)
    prune_args(sp)
    sp.add_argument("--target-quality",
                    help="number, 'psnr,ssim' pair for --metric both, or 'baseline'")
    sp.add_argument("--metric", choices=("psnr", "ssim", "both"))
    sp.add_argument("--max-steps", type=int)
    sp.add_argument("--train-data", required=True,
                    help="pairs manifest or synthetic:KIND:COUNT")
    sp.add_argument("--val-data", required=True)
    sp.add_argument("--steps-per-round", type=int, default=200)
    sp.add_argument("--lr", type=float, default=0.05)
    sp.add_argument("--batch-size", type=int, default=8)
    sp.add_argument("--loss", choices=("mse", "l1"), default="mse")
    sp.add_argument("--peak", type=float, default=1.0)
    sp.set_defaults(func=cmd_loop)

    sp = sub.add_parser("report", help="original vs pruned comparison table")
    sp.add_argument("--before-graph", required=True)
    sp.add_argument("--after-graph", required=True)
    sp.add_argument("--before-weights")
    sp.add_argument("--after-weights")
    sp.add_argument("--bytes-per-element", type=int, choices=(1, 2, 4), default=4)
    sp.add_argument("--layers-out", help="write per-layer CSV here")
    sp.set_defaults(func=cmd_report)

    sp = sub.add_parser("infer", help="run the network on one image")
    graph_args(sp)
    sp.add_argument("--input", required=True)
    sp.add_argument("--output", required=True)
    sp.set_defaults(func=cmd_infer)

    sp = sub.add_parser("eval", help="PSNR/SSIM over a pairs manifest")
    graph_args(sp)
    sp.add_argument("--pairs", required=True)
    sp.add_argument("--peak", type=float, default=1.0)
    sp.set_defaults(func=cmd_eval)
    return p


def main(argv=None, out=None) -> int:
    out = out or sys.stdout
    parser = build_parser()
    args = parser.parse_args(argv)
    if not getattr(args, "command", None):
        parser.print_usage(sys.stderr)
        return 2
    try:
        args.func(args, out)
    except Exception as exc:  # one machine-parseable line, no traceback
        msg = str(exc).replace("\n", " ")
        sys.stderr.write(f"error: {type(exc).__name__}: {msg}\n")
        return 1
    return 0


def main_entry():  # console-script wrapper
    sys.exit(main())


if __name__ == "__main__":  # pragma: no cover
    main_entry()
