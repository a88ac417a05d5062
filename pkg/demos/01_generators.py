"""
Generator functions and what they measure
=========================================

Each f-divergence is fixed by a convex generator f with f(1) = 0. Here we
evaluate the shipped generators, check them on a log-grid, and compute a few
divergences between small distributions.
"""

import numpy as np

from fpo import check_generator, default_generators, eval_generator, exact_f_divergence, log_grid

# f at a few ratios; every generator vanishes at u = 1
u = np.array([0.25, 1.0, 4.0])
for gen in default_generators():
    print(f"{str(gen):10s} f(u) = {np.round(eval_generator(gen, u), 4)}")

# validity on 101 log-spaced points between 1e-4 and 1e4
grid = log_grid(1e-4, 1e4, 101)
for gen in default_generators():
    print(gen, check_generator(gen, grid))

# divergences between two fixed distributions (policy first, target second)
p = np.array([0.5, 0.5])
q = np.array([0.25, 0.75])
for gen in default_generators():
    print(f"D_{gen}(p || q) = {exact_f_divergence(gen, p, q):.6f}")
