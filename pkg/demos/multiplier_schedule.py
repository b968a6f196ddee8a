"""
Loss weights that adapt per module
==================================

Instead of a fixed tau, each module minimises lambda_k * loss + transport
and lambda_k grows by the current loss every 50 steps. Modules deeper in the
trunk start from better features, so their weights grow less.
"""

from trgl.data import gen_two_moons, prepare_splits
from trgl.engine import TauSchedule, TrainPlan, train
from trgl.multiplier import MultiplierConfig
from trgl.netblocks import PartitionSpec, build_partition

for seed in range(3):
    data = prepare_splits(gen_two_moons(2000, 0.2, seed), gen_two_moons(2000, 0.2, 1000 + seed),
                          0.1, 200, seed)
    part = build_partition(PartitionSpec(4, 1, 32, 2, 2, 0.5, seed))
    plan = TrainPlan("sequential", 30, batch_size=16, lr=0.05, seed=seed,
                     tau=TauSchedule("multiplier", multiplier=MultiplierConfig(1.0, 1.0, 50)))
    m = train(part, plan, data)
    lam = ", ".join(f"{v:.2f}" for v in m.final("lambda"))
    print(f"seed {seed}: final lambda per module [{lam}], last head acc {m.final('test_acc')[-1]:.4f}")
