"""
Counting MACs, weights and bandwidth
====================================

Rebuild the two reference networks (the SID low-light U-Net at 1424x2128 and
EDSR x2 at 1020x1020) and print their totals next to the published numbers.
"""

import numpy as np

from prunekit import metrics, nir

# published "original" rows, in units of 1e9 MAC, 1e3 weights, 1e6 elements
published = {
    "sid": dict(macs=560, weights=7757, activations=1915, bw=1922),
    "edsr": dict(macs=1428, weights=1367, activations=5076, bw=5077),
}

for name in ("sid", "edsr"):
    graph = nir.TOPOLOGIES[name]()
    # one byte per element matches how the published BW column is scaled
    cost = metrics.network_cost(graph, bytes_per_element=1)
    ours = dict(macs=cost.macs / 1e9, weights=cost.weights / 1e3,
                activations=cost.activations / 1e6, bw=cost.bandwidth / 1e6)
    print(f"\n{name.upper()}  ({len(graph.conv_ids())} conv layers)")
    for key, ref in published[name].items():
        print(f"  {key:12s} {ours[key]:10.2f}   published {ref:6d}   "
              f"({100 * (ours[key] - ref) / ref:+.2f}%)")

###############################################################################
# MAC efficiency r = log10(MAC / weights) is just log10 of the spatial extent
# a kernel sweeps, so in the U-Net it peaks at the full-resolution ends and
# dips in the bottleneck, while EDSR is flat across its body.

for name in ("sid", "edsr"):
    r = np.array([l.r for l in metrics.layer_costs(nir.TOPOLOGIES[name]())])
    print(f"\n{name}: r per layer")
    print(np.array2string(r, precision=2, max_line_width=80))
