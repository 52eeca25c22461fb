"""prunekit: architecture-aware, quality-gated channel pruning for CNNs."""

from .nir import (NetworkGraph, NodeKind, GraphBuilder, validate, infer_shapes, node_shapes,
                  build_sid_topology, build_edsr_topology)
from .tensorstore import WeightStore, init_weights, max_abs_per_output_channel
from .metrics import network_cost, layer_cost, layer_sparsity, network_sparsity, bandwidth_bytes
from .depgraph import build_groups, group_stat, propagate_removal, full_mask
from .pruner import (PruneConfig, PruneState, layer_threshold, prune_pass, prune_to_target,
                     apply_mask, run_loop)
from .engine import TrainSpec, forward, train, make_synthetic_dataset, make_trainer
from .quality import psnr, ssim, evaluate_dataset, make_evaluator

__version__ = "0.1.0"
