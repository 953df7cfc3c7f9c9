"""
A small neural network under label skew
=======================================

Ten clients each hold half a uniform share of a 10-class dataset and half
of the samples of "their" class. The model is a one-hidden-layer tanh
network with an L1 penalty, trained with mini-batches of 10.
"""

from compfl.cli import preset_configs
from compfl.harness import build_objective, run_experiment

cfg = preset_configs("mlp-label-skew")[0]
res = run_experiment(cfg)
obj, _ = build_objective(res.config)

F = res.column("F_value")
print(f"clients: {obj.problem.n}, parameters: {obj.d}, shard sizes: {obj.problem.sizes}")
for start in range(0, 200, 40):
    print(f"rounds {start + 1:3d}-{start + 10:3d}: mean training objective {F[start:start + 10].mean():.4f}")
print(f"training accuracy after {cfg.rounds} rounds: {obj.problem.accuracy(res.model):.3f}")
