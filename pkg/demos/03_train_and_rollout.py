"""Train a small hierarchical DeltaGN and roll it out against the simulator.

A few hundred steps keep this to a couple of minutes on one core; the
acceptance suite runs the full 10k-step comparison.

Run: python demos/03_train_and_rollout.py [steps]
"""
import sys

from hiergn.models import GraphSpec, NBodyGN
from hiergn.sim import SimConfig
from hiergn.training import LearnedSimulator, TrainConfig, evaluate, generate_dataset, train

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 300
cfg = SimConfig(n_base_steps=40)
train_set = generate_dataset(20, 20, cfg, seed=1000)
test_set = generate_dataset(20, 3, cfg, seed=5000)

spec = GraphSpec("hier", depth=3)
sim = LearnedSimulator(NBodyGN("delta", hierarchical=True, seed=0), spec)
result = train(sim, train_set, TrainConfig(total_steps=steps, lr_decay_every=2000, log_every=50))
for step, loss, lr in result.curve:
    print(f"step {step:5d}  loss {loss:.3e}  lr {lr:.1e}")

report = evaluate(sim, test_set, taus=(10, 20))
print("rollout RMSE:", {k: round(v, 4) for k, v in report.rollout_rmse.items()})
print("energy error:", {k: round(v, 4) for k, v in report.energy_error.items()})
