"""
Channels that must be pruned together
=====================================

Residual adds tie output channels of different layers together: channel c of
the block output and channel c of the skip are summed, so neither can go
without the other. This script shows the groups for a tiny residual block and
for EDSR.
"""

from prunekit import depgraph, nir
from prunekit.nir import GraphBuilder

# a small block: conv_a -> conv_b, and conv_b -> conv_c -> conv_d added back
b = GraphBuilder((8, 8))
x = b.input(3)
x = b.relu(b.conv(x, 6, 3, name="conv_a"))
skip = b.conv(x, 8, 3, name="conv_b")
y = b.relu(b.conv(skip, 4, 3, name="conv_c"))
y = b.conv(y, 8, 3, name="conv_d")
b.output(b.conv(b.add_(y, skip), 3, 3, name="tail"))
block = b.build()

for g in depgraph.build_groups(block):
    if len(g.members) > 1 or g.members[0][1] == 0:
        print(g.id, g.members)

# the tail conv feeds the output directly, so none of its channels are groupable
print("frozen:", sorted(depgraph.frozen_layers(depgraph.analyze(block))))

###############################################################################
# In EDSR the long skip chains all 16 residual adds together: each head
# channel lives in a group of 18 convs.

flow = depgraph.analyze(nir.build_edsr_topology((32, 32)))
sizes = {}
for g in flow.groups:
    sizes[len(g.members)] = sizes.get(len(g.members), 0) + 1
print("EDSR group sizes -> count:", dict(sorted(sizes.items())))
print("EDSR frozen layers:", sorted(depgraph.frozen_layers(flow)))

###############################################################################
# Removing output channels also removes the matching input channels
# downstream, including the offset through a concat.

g = nir.build_sid_topology((32, 32))
mask = depgraph.full_mask(g)
mask["conv1_2"][[0, 5]] = False
plan = depgraph.propagate_removal(g, mask)
print("conv2_1 loses inputs", plan["conv2_1"], "and conv9_1 loses", plan["conv9_1"])
