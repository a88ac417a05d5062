"""f-PO objectives over tabular policies, with analytic gradients.

Every record loss is a discrete f-divergence between the policy-side
softmax over the record's responses and the reward-side (or label-side)
weights. Gradients are taken with respect to the policy logits and are
derived by hand through log-softmax, the sigmoid and f'.

Variants:

``general_k``
    K responses with rewards; w = softmax(r), v = softmax(g).
``pairwise_reward``
    K = 2 with rewards; weights sigma(r_w - r_l), sigma(r_l - r_w).
``pairwise_smoothed``
    preference pairs without rewards; weights (1 - eps, eps).
``simpo_style``
    as ``pairwise_smoothed`` but with the reference-free, length-normalized
    margin in place of the log-ratio difference.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import expit, log_expit, log_softmax

from .errors import ConfigError, DegenerateRewardError, LengthError, ShapeError
from .generators import Generator, parse_generator, reverse_kl
from .policy import TabularPolicy

VARIANTS = ("general_k", "pairwise_reward", "pairwise_smoothed", "simpo_style")

# reward-derived pairwise weights are kept inside [P_CLAMP, 1 - P_CLAMP]
P_CLAMP = 1e-12


@dataclass(frozen=True, eq=False)
class PairwiseBatch:
    """Preference pairs (x, y_w, y_l), optionally with both rewards."""

    prompts: np.ndarray
    winners: np.ndarray
    losers: np.ndarray
    reward_w: np.ndarray | None = None
    reward_l: np.ndarray | None = None

    def __post_init__(self):
        for name in ("prompts", "winners", "losers"):
            arr = np.atleast_1d(np.asarray(getattr(self, name), dtype=np.int64))
            object.__setattr__(self, name, arr)
        n = self.prompts.size
        if self.winners.shape != (n,) or self.losers.shape != (n,):
            raise ShapeError("prompts, winners and losers must have equal length")
        if np.any(self.winners == self.losers):
            raise ShapeError("winner and loser must differ in every record")
        if (self.reward_w is None) != (self.reward_l is None):
            raise ShapeError("give both reward_w and reward_l or neither")
        if self.reward_w is not None:
            rw = np.atleast_1d(np.asarray(self.reward_w, dtype=float))
            rl = np.atleast_1d(np.asarray(self.reward_l, dtype=float))
            if rw.shape != (n,) or rl.shape != (n,):
                raise ShapeError("reward arrays must match the number of records")
            object.__setattr__(self, "reward_w", rw)
            object.__setattr__(self, "reward_l", rl)

    @classmethod
    def from_records(cls, records, rewards=None) -> "PairwiseBatch":
        """``records`` is a sequence of (x, y_w, y_l); ``rewards`` of (r_w, r_l)."""
        rec = np.asarray(records, dtype=np.int64).reshape(-1, 3)
        if rewards is None:
            return cls(rec[:, 0], rec[:, 1], rec[:, 2])
        rw = np.asarray(rewards, dtype=float).reshape(-1, 2)
        return cls(rec[:, 0], rec[:, 1], rec[:, 2], rw[:, 0], rw[:, 1])

    def __len__(self):
        return self.prompts.size

    @property
    def has_rewards(self) -> bool:
        return self.reward_w is not None

    def check_bounds(self, shape):
        _check_indices(shape, self.prompts, self.winners, self.losers)

    def __eq__(self, other):
        if not isinstance(other, PairwiseBatch):
            return NotImplemented
        same = all(
            np.array_equal(getattr(self, k), getattr(other, k))
            for k in ("prompts", "winners", "losers")
        )
        if self.has_rewards != other.has_rewards:
            return False
        if self.has_rewards:
            same = same and np.array_equal(self.reward_w, other.reward_w)
            same = same and np.array_equal(self.reward_l, other.reward_l)
        return same


@dataclass(frozen=True, eq=False)
class KSampleBatch:
    """Records of K responses per prompt with their rewards.

    ``allow_repeats`` admits i.i.d. draws with replacement.
    """

    prompts: np.ndarray
    responses: np.ndarray
    rewards: np.ndarray
    allow_repeats: bool = False

    def __post_init__(self):
        prompts = np.atleast_1d(np.asarray(self.prompts, dtype=np.int64))
        responses = np.asarray(self.responses, dtype=np.int64)
        rewards = np.asarray(self.rewards, dtype=float)
        if responses.ndim != 2 or responses.shape[0] != prompts.size:
            raise ShapeError("responses must be [num_records, K]")
        if rewards.shape != responses.shape:
            raise ShapeError("rewards must match responses")
        if responses.shape[1] < 2:
            raise ShapeError("K must be at least 2")
        if not self.allow_repeats:
            srt = np.sort(responses, axis=1)
            if np.any(srt[:, 1:] == srt[:, :-1]):
                raise ShapeError("responses within a record must be distinct")
        object.__setattr__(self, "prompts", prompts)
        object.__setattr__(self, "responses", responses)
        object.__setattr__(self, "rewards", rewards)

    def __len__(self):
        return self.prompts.size

    @property
    def k(self) -> int:
        return self.responses.shape[1]

    def check_bounds(self, shape):
        _check_indices(shape, self.prompts, self.responses)

    def __eq__(self, other):
        if not isinstance(other, KSampleBatch):
            return NotImplemented
        return (
            np.array_equal(self.prompts, other.prompts)
            and np.array_equal(self.responses, other.responses)
            and np.array_equal(self.rewards, other.rewards)
        )


def _check_indices(shape, prompts, *responses):
    nx, ny = shape
    if prompts.size and (prompts.min() < 0 or prompts.max() >= nx):
        raise IndexError("prompt index out of range")
    for r in responses:
        if r.size and (r.min() < 0 or r.max() >= ny):
            raise IndexError("response index out of range")


@dataclass(frozen=True)
class LossConfig:
    """Objective selection and hyperparameters.

    ``reward_beta`` divides rewards before they are turned into weights
    (softmax for ``general_k``, sigmoid for ``pairwise_reward``).
    ``epsilon_limit`` enables the exact eps -> 0 limit of the smoothed loss.
    """

    generator: Generator
    beta: float = 0.5
    epsilon: float = 1e-3
    variant: str = "pairwise_smoothed"
    gamma: float | None = None
    reward_beta: float = 1.0
    reduction: str = "mean"
    epsilon_limit: bool = True

    def __post_init__(self):
        if isinstance(self.generator, str):
            object.__setattr__(self, "generator", parse_generator(self.generator))
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}")
        if not self.beta > 0:
            raise ConfigError("beta must be positive")
        if not self.reward_beta > 0:
            raise ConfigError("reward_beta must be positive")
        if not 0.0 <= self.epsilon <= 0.5:
            raise ConfigError("epsilon must lie in [0, 0.5]")
        if (self.gamma is not None) != (self.variant == "simpo_style"):
            raise ConfigError("gamma is required for simpo_style and only there")
        if self.reduction not in ("mean", "sum"):
            raise ConfigError("reduction must be 'mean' or 'sum'")

    def to_json(self) -> str:
        return json.dumps(
            {
                "generator": str(self.generator),
                "beta": self.beta,
                "epsilon": self.epsilon,
                "variant": self.variant,
                "gamma": self.gamma,
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "LossConfig":
        d = json.loads(text)
        return cls(
            parse_generator(d["generator"]),
            beta=d["beta"],
            epsilon=d.get("epsilon", 1e-3),
            variant=d.get("variant", "pairwise_smoothed"),
            gamma=d.get("gamma"),
        )


@dataclass(frozen=True)
class LossValue:
    loss: float
    gradient: np.ndarray


# ----------------------------------------------------------------------------
# per-record kernels: values and derivatives wrt the record's margin / logits


def pairwise_terms(gen: Generator, delta, log_a, log_b):
    """Per-record a f(sigma(d)/a) + b f(sigma(-d)/b) and its d-derivative.

    ``log_a`` and ``log_b`` are the log weights of winner and loser
    (they must sum to one in probability).
    """
    ls_pos = log_expit(delta)
    ls_neg = log_expit(-delta)
    lu1 = ls_pos - log_a
    lu2 = ls_neg - log_b
    loss = np.exp(log_a) * gen.f_log(lu1) + np.exp(log_b) * gen.f_log(lu2)
    s = np.exp(ls_pos + ls_neg)
    dloss = s * (gen.df_log(lu1) - gen.df_log(lu2))
    return loss, dloss


def limit_pairwise_terms(gen: Generator, delta):
    """The eps -> 0 limit of :func:`pairwise_terms` with weights (1 - eps, eps).

    eps * f(sigma(-d) / eps) tends to sigma(-d) * lim f(u)/u, which is zero
    for reverse KL, leaving -log sigma(d).
    """
    slope = gen.slope_at_infinity
    if slope is None:
        raise ConfigError(f"epsilon = 0 diverges for generator {gen}")
    ls_pos = log_expit(delta)
    sig_neg = expit(-delta)
    loss = gen.f_log(ls_pos)
    dloss = np.exp(ls_pos) * sig_neg * gen.df_log(ls_pos)
    if slope:
        loss = loss + slope * sig_neg
        dloss = dloss - slope * np.exp(ls_pos) * sig_neg
    return loss, dloss


def general_terms(gen: Generator, g, r):
    """Per-record sum_i w_i f(v_i / w_i) with v = softmax(g), w = softmax(r).

    ``g`` and ``r`` are ``[num_records, K]``. Returns the record losses and
    d loss / d g of the same shape.
    """
    log_v = log_softmax(g, axis=1)
    log_w = log_softmax(r, axis=1)
    lu = log_v - log_w
    loss = np.sum(np.exp(log_w) * gen.f_log(lu), axis=1)
    v = np.exp(log_v)
    fp = gen.df_log(lu)
    dg = v * (fp - np.sum(v * fp, axis=1, keepdims=True))
    return loss, dg


def _logit_gradient(policy: TabularPolicy, prompts, responses, coef):
    """Gradient wrt logits given d loss / d log pi(y|x) per (x, y) entry."""
    c = np.zeros(policy.shape)
    np.add.at(c, (prompts.ravel(), responses.ravel()), coef.ravel())
    return c - c.sum(axis=1, keepdims=True) * policy.probs()


def _reduce(cfg_reduction: str, losses, n):
    scale = 1.0 / n if cfg_reduction == "mean" else 1.0
    return float(np.sum(losses) * scale), scale


def _check_pair(policy, ref, batch: PairwiseBatch):
    if ref is not None and policy.shape != ref.shape:
        raise ShapeError(f"shape mismatch: {policy.shape} vs {ref.shape}")
    batch.check_bounds(policy.shape)
    if len(batch) == 0:
        raise ShapeError("empty batch")


def _pair_margin(policy, ref, beta, batch):
    lr = beta * (policy.log_probs() - ref.log_probs())
    return lr[batch.prompts, batch.winners] - lr[batch.prompts, batch.losers]


def _pair_gradient(policy, batch, dd, w_scale, l_scale):
    prompts = np.concatenate([batch.prompts, batch.prompts])
    responses = np.concatenate([batch.winners, batch.losers])
    coef = np.concatenate([w_scale * dd, -l_scale * dd])
    return _logit_gradient(policy, prompts, responses, coef)


# ----------------------------------------------------------------------------
# public objectives


def fpo_loss_general(cfg: LossConfig, policy: TabularPolicy, ref: TabularPolicy, batch: KSampleBatch) -> LossValue:
    """K-sample f-PO loss: mean over records of D_f(softmax(g) || softmax(r))."""
    if policy.shape != ref.shape:
        raise ShapeError(f"shape mismatch: {policy.shape} vs {ref.shape}")
    batch.check_bounds(policy.shape)
    lr = cfg.beta * (policy.log_probs() - ref.log_probs())
    x = batch.prompts[:, None]
    g = lr[x, batch.responses]
    losses, dg = general_terms(cfg.generator, g, batch.rewards / cfg.reward_beta)
    loss, scale = _reduce(cfg.reduction, losses, len(batch))
    grad = _logit_gradient(
        policy, np.broadcast_to(x, batch.responses.shape), batch.responses, cfg.beta * scale * dg
    )
    return LossValue(loss, grad)


def fpo_loss_pairwise_reward(cfg: LossConfig, policy: TabularPolicy, ref: TabularPolicy, batch: PairwiseBatch) -> LossValue:
    """Pairwise f-PO with weights sigma(r_w - r_l) and sigma(r_l - r_w)."""
    _check_pair(policy, ref, batch)
    if not batch.has_rewards:
        raise ConfigError("pairwise_reward needs reward_w / reward_l on the batch")
    dr = (batch.reward_w - batch.reward_l) / cfg.reward_beta
    if not np.all(np.isfinite(dr)):
        raise DegenerateRewardError("non-finite reward difference")
    log_a = log_expit(dr)
    log_b = log_expit(-dr)
    lo, hi = math.log(P_CLAMP), math.log1p(-P_CLAMP)
    log_a, log_b = (
        np.where(log_b < lo, hi, np.where(log_a < lo, lo, log_a)),
        np.where(log_a < lo, hi, np.where(log_b < lo, lo, log_b)),
    )
    delta = _pair_margin(policy, ref, cfg.beta, batch)
    losses, dd = pairwise_terms(cfg.generator, delta, log_a, log_b)
    loss, scale = _reduce(cfg.reduction, losses, len(batch))
    return LossValue(loss, _pair_gradient(policy, batch, scale * dd, cfg.beta, cfg.beta))


def fpo_loss_pairwise_smoothed(cfg: LossConfig, policy: TabularPolicy, ref: TabularPolicy | None, batch: PairwiseBatch) -> LossValue:
    """Label-smoothed pairwise f-PO with weights (1 - eps, eps).

    With ``cfg.variant == "simpo_style"`` the margin is the reference-free
    length-normalized one and ``ref`` is not used.
    """
    _check_pair(policy, ref if cfg.variant != "simpo_style" else None, batch)
    eps = cfg.epsilon
    if cfg.variant == "simpo_style":
        delta = _simpo_margins(policy, cfg.beta, cfg.gamma, batch)
        lw = policy.lengths[batch.prompts, batch.winners]
        ll = policy.lengths[batch.prompts, batch.losers]
        w_scale, l_scale = cfg.beta / lw, cfg.beta / ll
    else:
        delta = _pair_margin(policy, ref, cfg.beta, batch)
        w_scale = l_scale = cfg.beta

    if eps == 0.0:
        if not cfg.epsilon_limit:
            raise ConfigError("epsilon = 0 requires the limit path (epsilon_limit=True)")
        losses, dd = limit_pairwise_terms(cfg.generator, delta)
    else:
        losses, dd = pairwise_terms(cfg.generator, delta, math.log1p(-eps), math.log(eps))
    loss, scale = _reduce(cfg.reduction, losses, len(batch))
    return LossValue(loss, _pair_gradient(policy, batch, scale * dd, w_scale, l_scale))


def fpo_loss(cfg: LossConfig, policy: TabularPolicy, ref: TabularPolicy, batch) -> LossValue:
    """Dispatch on ``cfg.variant``."""
    if cfg.variant == "general_k":
        if not isinstance(batch, KSampleBatch):
            raise ConfigError("general_k needs a KSampleBatch")
        return fpo_loss_general(cfg, policy, ref, batch)
    if not isinstance(batch, PairwiseBatch):
        raise ConfigError(f"{cfg.variant} needs a PairwiseBatch")
    if cfg.variant == "pairwise_reward":
        return fpo_loss_pairwise_reward(cfg, policy, ref, batch)
    return fpo_loss_pairwise_smoothed(cfg, policy, ref, batch)


def dpo_loss(policy: TabularPolicy, ref: TabularPolicy, beta: float, batch: PairwiseBatch) -> LossValue:
    """Mean of -log sigma(beta * (log-ratio of winner - log-ratio of loser))."""
    _check_pair(policy, ref, batch)
    delta = _pair_margin(policy, ref, beta, batch)
    losses = -log_expit(delta)
    dd = -expit(-delta) / len(batch)
    return LossValue(float(np.mean(losses)), _pair_gradient(policy, batch, dd, beta, beta))


def exo_loss(policy: TabularPolicy, ref: TabularPolicy, beta: float, epsilon: float, batch: PairwiseBatch) -> LossValue:
    """Mean of sigma(d) log(sigma(d)/(1-eps)) + sigma(-d) log(sigma(-d)/eps)."""
    if not 0.0 < epsilon <= 0.5:
        raise ConfigError("EXO needs epsilon in (0, 0.5]")
    _check_pair(policy, ref, batch)
    delta = _pair_margin(policy, ref, beta, batch)
    lp, ln_ = log_expit(delta), log_expit(-delta)
    sp, sn = np.exp(lp), np.exp(ln_)
    a, b = lp - math.log1p(-epsilon), ln_ - math.log(epsilon)
    losses = sp * a + sn * b
    # d/dd [sp*a + sn*b] = sp*sn*(a + 1) - sn*sp*(b + 1)
    dd = sp * sn * (a - b) / len(batch)
    return LossValue(float(np.mean(losses)), _pair_gradient(policy, batch, dd, beta, beta))


def simpo_style_delta(policy: TabularPolicy, beta: float, gamma: float, record) -> float:
    """beta/|y_w| log pi(y_w|x) - beta/|y_l| log pi(y_l|x) - gamma."""
    x, yw, yl = record
    batch = PairwiseBatch.from_records([(x, yw, yl)])
    batch.check_bounds(policy.shape)
    return float(_simpo_margins(policy, beta, gamma, batch)[0])


def _simpo_margins(policy, beta, gamma, batch):
    lw = policy.lengths[batch.prompts, batch.winners]
    ll = policy.lengths[batch.prompts, batch.losers]
    if np.any(lw <= 0) or np.any(ll <= 0):
        raise LengthError("response lengths must be positive")
    lp = policy.log_probs()
    return (
        beta * lp[batch.prompts, batch.winners] / lw
        - beta * lp[batch.prompts, batch.losers] / ll
        - gamma
    )


# ----------------------------------------------------------------------------
# gradient checking


@dataclass(frozen=True)
class GradCheckReport:
    max_rel_error: float
    grad_norm: float
    num_checked: int


def touched_entries(cfg: LossConfig, shape, batch) -> list[tuple[int, int]]:
    """Logit entries whose gradient is structurally nonzero for this batch."""
    if cfg.variant == "simpo_style":
        return [(int(x), y) for x in np.unique(batch.prompts) for y in range(shape[1])]
    if isinstance(batch, KSampleBatch):
        pairs = zip(np.repeat(batch.prompts, batch.k), batch.responses.ravel())
    else:
        pairs = list(zip(batch.prompts, batch.winners)) + list(zip(batch.prompts, batch.losers))
    return sorted({(int(x), int(y)) for x, y in pairs})


def loss_gradient_check(cfg: LossConfig, policy: TabularPolicy, ref: TabularPolicy, batch, h: float = 1e-5, floor: float = 1e-8) -> GradCheckReport:
    """Compare the analytic gradient with central differences of the loss.

    Relative error is |analytic - numeric| / max(|numeric|, floor), taken
    over every logit the batch touches.
    """
    if not 1e-7 <= h <= 1e-3:
        raise ConfigError("h must lie in [1e-7, 1e-3]")
    grad = fpo_loss(cfg, policy, ref, batch).gradient
    worst = 0.0
    entries = touched_entries(cfg, policy.shape, batch)
    base = np.array(policy.logits)
    for x, y in entries:
        up, dn = base.copy(), base.copy()
        up[x, y] += h
        dn[x, y] -= h
        lu = fpo_loss(cfg, policy.with_logits(up), ref, batch).loss
        ld = fpo_loss(cfg, policy.with_logits(dn), ref, batch).loss
        num = (lu - ld) / (2 * h)
        worst = max(worst, abs(grad[x, y] - num) / max(abs(num), floor))
    return GradCheckReport(worst, float(np.linalg.norm(grad)), len(entries))


def dpo_as_fpo_config(beta: float) -> LossConfig:
    """The reverse-KL, eps = 0 configuration that coincides with DPO."""
    return LossConfig(reverse_kl(), beta=beta, epsilon=0.0, variant="pairwise_smoothed")
