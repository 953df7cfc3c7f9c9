"""
Proximal operators and the gradient mapping
===========================================

A composite objective is a smooth loss plus a possibly nonsmooth regularizer.
The building blocks are the proximal operator of the regularizer and the
gradient mapping, which plays the role of the gradient as a stationarity
measure.
"""

import numpy as np

from compfl import datagen, objectives
from compfl.prox import Regularizer, prox

# The L1 prox is soft thresholding: shrink toward zero by the threshold and
# clip at zero.
l1 = Regularizer.l1(0.5)
print("soft threshold of [1.2, -0.3] at 0.5:", prox(l1, 1.0, [1.2, -0.3]))

# A box regularizer projects; the zero regularizer leaves points alone.
box = Regularizer.box([-1, 0], [1, 2])
print("box projection of [5, -4]:", prox(box, 3.0, [5.0, -4.0]))

# A small sparse logistic regression problem on synthetic data.
ds = datagen.generate_synthetic(datagen.GenConfig(alpha=0.0, beta=0.0, n=1, d=20, m=100))
obj = objectives.CompositeObjective(objectives.LogisticProblem.from_dataset(ds), Regularizer.l1(0.05))
L = objectives.estimate_smoothness(obj.problem)
print(f"smoothness constant L = {L:.4f}")

# Proximal gradient descent at step 1/L. The gradient mapping norm shrinks
# linearly on this well-conditioned problem, and the solution is sparse.
x, trace = objectives.pgd_solve(obj, 1.0 / L, 5000)
gnorm = np.linalg.norm(objectives.gradient_mapping(obj, x, 1.0 / L))
print(f"F after 5000 steps = {trace[-1]:.12f}, ||G|| = {gnorm:.1e}, nonzeros = {np.count_nonzero(x)}/{x.size}")

# A stationary point is a fixed point of the proximal gradient step for every
# step size, which is what the federated method exploits later.
for step in (0.1 / L, 1.0 / L):
    moved = np.max(np.abs(objectives.pgd_step(obj, x, step) - x))
    print(f"step {step:8.3f}: one PGD step moves the solution by {moved:.1e}")
