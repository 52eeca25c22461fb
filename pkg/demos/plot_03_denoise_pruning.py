"""
Pruning a small denoiser without losing PSNR
============================================

Train a three-conv denoiser on procedural images, then alternate threshold
pruning with short retraining bursts. A round only counts once validation
PSNR is strictly above the unpruned network's.
"""

from prunekit import depgraph, engine, metrics, nir, pruner, quality, tensorstore

graph = nir.build_denoise_topology((16, 16), width=16)
train = engine.make_synthetic_dataset("denoise", seed=1, count=64)
val = engine.make_synthetic_dataset("denoise", seed=2, count=16)

store = tensorstore.init_weights(graph, seed=1)
store, loss = engine.train(graph, store, train, engine.TrainSpec(lr=0.05, steps=600, seed=1))
noisy = sum(quality.psnr(x, y) for x, y in val) / len(val)
base = quality.evaluate_dataset(graph, store, val)
print(f"noisy input {noisy:.2f} dB, trained network {base.psnr:.2f} dB")

###############################################################################
# Method D scales each layer's threshold by how much compute per weight the
# layer does and by how much of it is left.

config = pruner.PruneConfig(method="D", target_quality=base.psnr, sparsity_increment=0.1,
                            threshold_increment=0.005, total_steps=2000)
trainer = engine.make_trainer(train, engine.TrainSpec(lr=0.05, steps=200, seed=1))
result = pruner.run_loop(graph, store, config, trainer, quality.make_evaluator(val))

for i, r in enumerate(result.report.rounds):
    qs = ", ".join(f"{q:.2f}@{g}" for g, q in r.evaluations)
    print(f"round {i}: target S={r.target_sparsity:.3f} reached S={r.sparsity:.3f} "
          f"({r.status}, {len(r.passes)} passes) quality {qs} passed={r.passed}")

rep = result.report
print(f"\nkept round {rep.best_round}: sparsity {rep.final_sparsity:.3f}, "
      f"PSNR {rep.final_quality:.2f} dB (target {base.psnr:.2f})")
print("channels left:", {n: int(m.sum()) for n, m in result.mask.items()})

ref = metrics.network_cost(graph)
now = metrics.network_cost(graph, result.mask)
print(f"MACs {now.macs}/{ref.macs} = {100 * now.macs / ref.macs:.1f}%")
