"""First-order training of tabular policy logits."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DivergenceError
from .losses import KSampleBatch, LossConfig, PairwiseBatch, fpo_loss
from .policy import RewardTable, TabularPolicy, mean_tv_hat

DEFAULT_LR = {"gd": 0.1, "adam": 0.05}


@dataclass(frozen=True)
class OptimizerConfig:
    algorithm: str = "adam"
    learning_rate: float | None = None
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    max_steps: int = 5000
    tolerance: float = 1e-8
    seed: int = 0
    log_every: int = 1
    batch_size: int | None = None

    def __post_init__(self):
        if self.algorithm not in DEFAULT_LR:
            raise ConfigError(f"algorithm must be one of {sorted(DEFAULT_LR)}")
        if self.learning_rate is None:
            object.__setattr__(self, "learning_rate", DEFAULT_LR[self.algorithm])
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("beta1 and beta2 must lie in [0, 1)")
        if self.max_steps < 0 or self.log_every < 1:
            raise ConfigError("max_steps must be >= 0 and log_every >= 1")
        if self.batch_size is not None and self.batch_size < 1:
            raise ConfigError("batch_size must be positive")


@dataclass
class AdamState:
    params: np.ndarray
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros_like(cls, params):
        p = np.array(params, dtype=float)
        return cls(p, np.zeros_like(p), np.zeros_like(p), 0)


def gd_step(params: np.ndarray, grad: np.ndarray, lr: float) -> np.ndarray:
    return params - lr * grad


def adam_step(state: AdamState, grad: np.ndarray, lr: float, beta1=0.9, beta2=0.999, eps=1e-8) -> AdamState:
    """One bias-corrected Adam update; returns a new state."""
    t = state.t + 1
    m = beta1 * state.m + (1 - beta1) * grad
    v = beta2 * state.v + (1 - beta2) * grad * grad
    m_hat = m / (1 - beta1**t)
    v_hat = v / (1 - beta2**t)
    params = state.params - lr * m_hat / (np.sqrt(v_hat) + eps)
    return AdamState(params, m, v, t)


@dataclass
class TrainReport:
    steps_taken: int
    loss_trajectory: list[float] = field(default_factory=list)
    grad_norm_trajectory: list[float] = field(default_factory=list)
    tv_to_optimal_trajectory: list[float] = field(default_factory=list)
    tv_steps: list[int] = field(default_factory=list)
    final_policy: TabularPolicy | None = None

    @property
    def final_loss(self) -> float:
        return self.loss_trajectory[-1]

    @property
    def final_tv(self) -> float | None:
        return self.tv_to_optimal_trajectory[-1] if self.tv_to_optimal_trajectory else None

    def to_json(self) -> str:
        d = {
            "steps_taken": self.steps_taken,
            "loss": self.loss_trajectory,
            "grad_norm": self.grad_norm_trajectory,
            "tv_to_optimal": self.tv_to_optimal_trajectory,
            "tv_steps": self.tv_steps,
            "final_policy": json.loads(self.final_policy.to_json()) if self.final_policy else None,
        }
        return json.dumps(d)

    def to_csv(self) -> str:
        """Columns step,loss,grad_norm,tv_to_optimal; tv is blank on unlogged steps."""
        tv = dict(zip(self.tv_steps, self.tv_to_optimal_trajectory))
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "loss", "grad_norm", "tv_to_optimal"])
        for i, (l, g) in enumerate(zip(self.loss_trajectory, self.grad_norm_trajectory)):
            w.writerow([i, repr(l), repr(g), repr(tv[i]) if i in tv else ""])
        return buf.getvalue()


def uniform_init(ref: TabularPolicy) -> TabularPolicy:
    """All-zero logits with the reference's lengths."""
    return ref.with_logits(np.zeros(ref.shape))


def _subset(batch, idx):
    if isinstance(batch, KSampleBatch):
        return KSampleBatch(batch.prompts[idx], batch.responses[idx], batch.rewards[idx], batch.allow_repeats)
    if batch.has_rewards:
        return PairwiseBatch(batch.prompts[idx], batch.winners[idx], batch.losers[idx],
                             batch.reward_w[idx], batch.reward_l[idx])
    return PairwiseBatch(batch.prompts[idx], batch.winners[idx], batch.losers[idx])


def train(
    opt: OptimizerConfig,
    cfg: LossConfig,
    init: TabularPolicy,
    ref: TabularPolicy,
    reward: RewardTable | None,
    data: PairwiseBatch | KSampleBatch,
) -> TrainReport:
    """Optimize ``init`` against ``cfg`` on ``data``.

    Stops after ``opt.max_steps`` updates or once the gradient infinity-norm
    falls below ``opt.tolerance``. When ``reward`` is given, the mean TV
    between the policy's geometric mixture and the tilted optimum is logged
    every ``opt.log_every`` steps and at the final step.
    """
    rng = np.random.default_rng(opt.seed)
    n = len(data)
    logits = np.array(init.logits, dtype=float)
    state = AdamState.zeros_like(logits)
    report = TrainReport(0)
    policy = init

    step = 0
    while True:
        if opt.batch_size is None or opt.batch_size >= n:
            batch = data
        else:
            batch = _subset(data, rng.choice(n, size=opt.batch_size, replace=False))
        with np.errstate(all="ignore"):
            lv = fpo_loss(cfg, policy, ref, batch)
        gnorm = float(np.max(np.abs(lv.gradient)))
        if not (np.isfinite(lv.loss) and np.isfinite(gnorm)):
            raise DivergenceError(f"non-finite loss at step {step}", step=step)
        report.loss_trajectory.append(lv.loss)
        report.grad_norm_trajectory.append(gnorm)

        done = gnorm < opt.tolerance or step >= opt.max_steps
        if reward is not None and (done or step % opt.log_every == 0):
            report.tv_to_optimal_trajectory.append(mean_tv_hat(policy, ref, reward, cfg.beta))
            report.tv_steps.append(step)
        if done:
            break

        if opt.algorithm == "gd":
            logits = gd_step(logits, lv.gradient, opt.learning_rate)
        else:
            state.params = logits
            state = adam_step(state, lv.gradient, opt.learning_rate, opt.beta1, opt.beta2, opt.eps_adam)
            logits = state.params
        step += 1
        if not np.all(np.isfinite(logits)):
            raise DivergenceError(f"non-finite logits after step {step}", step=step)
        # recenter each row; softmax is invariant and this keeps logits bounded
        logits = logits - logits.mean(axis=1, keepdims=True)
        policy = init.with_logits(logits)

    report.steps_taken = step
    report.final_policy = policy
    return report
