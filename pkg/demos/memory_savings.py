"""
Peak memory of module-wise training
===================================

A 16-block trunk on 784-dimensional inputs, split into K modules. Sequential
training only keeps one module trainable at a time; parallel training keeps
all parameters trainable but only one module's activations alive.
"""

from trgl.engine import TrainPlan, memory_account
from trgl.netblocks import PartitionSpec

print(f"{'K':>3s} {'sequential %':>13s} {'parallel %':>11s}")
for K in (1, 2, 4, 8, 16):
    spec = PartitionSpec(K, 16 // K, 64, 784, 10)
    seq = memory_account(spec, TrainPlan("sequential"), 256)
    par = memory_account(spec, TrainPlan("parallel"), 256)
    print(f"{K:3d} {seq.saved_pct:13.1f} {par.saved_pct:11.1f}")
