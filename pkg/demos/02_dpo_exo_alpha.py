"""
One loss, several familiar objectives
=====================================

The label-smoothed pairwise loss with reverse KL and eps = 0 is DPO; with
forward KL it is EXO. Alpha-divergences sit between the two.
"""

import numpy as np

from fpo import LossConfig, PairwiseBatch, TabularPolicy, alpha_divergence, forward_kl, reverse_kl
from fpo import dpo_loss, exo_loss, fpo_loss_pairwise_smoothed


def instance(delta):
    # a single prompt with two responses whose log-ratio margin is delta
    return TabularPolicy([[delta, 0.0]]), TabularPolicy([[0.0, 0.0]]), PairwiseBatch.from_records([(0, 0, 1)])


deltas = np.linspace(-4, 4, 9)
print(" delta   dpo     rkl(eps=0)  exo     fkl(eps=1e-3)")
for d in deltas:
    pol, ref, batch = instance(d)
    dpo = dpo_loss(pol, ref, 1.0, batch).loss
    rkl = fpo_loss_pairwise_smoothed(LossConfig(reverse_kl(), beta=1.0, epsilon=0.0), pol, ref, batch).loss
    exo = exo_loss(pol, ref, 1.0, 1e-3, batch).loss
    fkl = fpo_loss_pairwise_smoothed(LossConfig(forward_kl(), beta=1.0, epsilon=1e-3), pol, ref, batch).loss
    print(f"{d:6.1f}  {dpo:.5f}  {rkl:.5f}     {exo:.5f}  {fkl:.5f}")

# alpha connects the two endpoints; the values in between need not be monotone
print("\nloss at delta = -2 with eps = 0.1")
pol, ref, batch = instance(-2.0)
for gen in [forward_kl()] + [alpha_divergence(a) for a in (0.1, 0.5, 0.9)] + [reverse_kl()]:
    val = fpo_loss_pairwise_smoothed(LossConfig(gen, beta=1.0, epsilon=0.1), pol, ref, batch).loss
    print(f"  {str(gen):10s} {val:.5f}")
