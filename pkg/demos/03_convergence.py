"""
Training a tabular policy to the regularized optimum
====================================================

With full-support reward-labeled data, minimizing the K-sample loss drives
the geometric mixture pi^beta ref^(1-beta) onto ref * exp(r), which means the
policy itself reaches the closed-form optimum ref * exp(r / beta).
"""

from fpo import LossConfig, OptimizerConfig, default_generators, make_synthetic_task, mean_tv_optimal
from fpo import sample_reward_dataset, train, uniform_init

task = make_synthetic_task(seed=7, num_prompts=4, num_responses=8, beta_star=0.5, reward_scale=2.0)
data = sample_reward_dataset(task, n=4, k=8, seed=0, full_support=True)
opt = OptimizerConfig("adam", 0.05, max_steps=5000, log_every=250)

for gen in default_generators():
    cfg = LossConfig(gen, beta=task.beta_star, variant="general_k")
    rep = train(opt, cfg, uniform_init(task.ref), task.ref, task.reward, data)
    tv = mean_tv_optimal(rep.final_policy, task.ref, task.reward, task.beta_star)
    print(f"{str(gen):10s} steps={rep.steps_taken:5d}  TV(mixture)={rep.final_tv:.2e}  TV(policy)={tv:.2e}")

# the trajectory of the last run, every 250 steps
for step, tv in zip(rep.tv_steps, rep.tv_to_optimal_trajectory):
    print(f"  step {step:5d}  tv {tv:.3e}")
