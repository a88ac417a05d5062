"""Tabular policies, optimal-policy oracles and exact divergences.

A policy is a matrix of logits over a finite response set shared by all
prompts. Distributions are returned as 1-d probability arrays.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.special import log_softmax, softmax

from .errors import DomainError, LengthError, NonFiniteError, ShapeError, SupportError
from .generators import Generator


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def _matrix_json(m, cast=_fmt) -> str:
    return "[" + ",".join("[" + ",".join(cast(v) for v in row) + "]" for row in m) + "]"


@dataclass(frozen=True, eq=False)
class TabularPolicy:
    """Logits ``[num_prompts, num_responses]`` and synthetic response lengths."""

    logits: np.ndarray
    lengths: np.ndarray = field(default=None)

    def __post_init__(self):
        logits = np.array(self.logits, dtype=float)
        if logits.ndim != 2 or logits.shape[0] < 1 or logits.shape[1] < 1:
            raise ShapeError(f"logits must be a nonempty matrix, got shape {logits.shape}")
        if not np.all(np.isfinite(logits)):
            raise NonFiniteError("policy logits must be finite")
        if self.lengths is None:
            lengths = np.ones(logits.shape, dtype=np.int64)
        else:
            lengths = np.array(self.lengths, dtype=np.int64)
            if lengths.shape != logits.shape:
                raise ShapeError("lengths must match logits shape")
            if np.any(lengths < 1):
                raise LengthError("response lengths must be >= 1")
        logits.setflags(write=False)
        lengths.setflags(write=False)
        object.__setattr__(self, "logits", logits)
        object.__setattr__(self, "lengths", lengths)

    @property
    def num_prompts(self) -> int:
        return self.logits.shape[0]

    @property
    def num_responses(self) -> int:
        return self.logits.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.logits.shape

    def log_probs(self) -> np.ndarray:
        return log_softmax(self.logits, axis=1)

    def probs(self) -> np.ndarray:
        return softmax(self.logits, axis=1)

    def with_logits(self, logits) -> "TabularPolicy":
        return TabularPolicy(logits, self.lengths)

    def __eq__(self, other):
        if not isinstance(other, TabularPolicy):
            return NotImplemented
        return np.array_equal(self.logits, other.logits) and np.array_equal(
            self.lengths, other.lengths
        )

    def to_json(self) -> str:
        return (
            f'{{"num_prompts": {self.num_prompts}, "num_responses": {self.num_responses}, '
            f'"logits": {_matrix_json(self.logits)}, '
            f'"lengths": {_matrix_json(self.lengths, lambda v: str(int(v)))}}}'
        )

    @classmethod
    def from_json(cls, text: str) -> "TabularPolicy":
        d = json.loads(text)
        pol = cls(np.array(d["logits"], dtype=float), np.array(d["lengths"], dtype=np.int64))
        if pol.shape != (d["num_prompts"], d["num_responses"]):
            raise ShapeError("declared dimensions do not match logits")
        return pol


@dataclass(frozen=True, eq=False)
class RewardTable:
    """Ground-truth rewards r(x, y)."""

    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.ndim != 2:
            raise ShapeError("reward table must be a matrix")
        if not np.all(np.isfinite(v)):
            raise NonFiniteError("rewards must be finite")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def shape(self):
        return self.values.shape

    def __eq__(self, other):
        if not isinstance(other, RewardTable):
            return NotImplemented
        return np.array_equal(self.values, other.values)

    def to_json(self) -> str:
        return f'{{"values": {_matrix_json(self.values)}}}'

    @classmethod
    def from_json(cls, text: str) -> "RewardTable":
        return cls(np.array(json.loads(text)["values"], dtype=float))


def _check_prompt(policy: TabularPolicy, prompt: int):
    if not 0 <= prompt < policy.num_prompts:
        raise IndexError(f"prompt {prompt} out of range [0, {policy.num_prompts})")


def _check_same_shape(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")


def policy_distribution(policy: TabularPolicy, prompt: int) -> np.ndarray:
    """pi(. | prompt) as a probability vector."""
    _check_prompt(policy, prompt)
    return softmax(policy.logits[prompt])


def mixture_logits(policy: TabularPolicy, ref: TabularPolicy, beta: float) -> np.ndarray:
    """Unnormalized log of pi^beta * ref^(1-beta) for every prompt."""
    _check_same_shape(policy, ref)
    return beta * policy.log_probs() + (1.0 - beta) * ref.log_probs()


def geometric_mixture(policy: TabularPolicy, ref: TabularPolicy, beta: float, prompt: int) -> np.ndarray:
    """Normalized pi^beta * ref^(1-beta) at one prompt."""
    if beta <= 0:
        raise DomainError("beta must be positive")
    _check_same_shape(policy, ref)
    _check_prompt(policy, prompt)
    return softmax(mixture_logits(policy, ref, beta)[prompt])


def optimal_logits(ref: TabularPolicy, reward: RewardTable, beta: float, hatted: bool = False) -> np.ndarray:
    """log ref + r/beta (or log ref + r when ``hatted``), unnormalized."""
    if beta <= 0:
        raise DomainError("beta must be positive")
    _check_same_shape(ref, reward)
    scale = 1.0 if hatted else 1.0 / beta
    out = ref.log_probs() + scale * reward.values
    if not np.all(np.isfinite(out)):
        raise NonFiniteError("optimal policy logits overflowed")
    return out


def optimal_policy(
    ref: TabularPolicy, reward: RewardTable, beta: float, prompt: int, hatted: bool = False
) -> np.ndarray:
    """Closed-form KL-regularized optimum ref * exp(r / beta) / Z at one prompt.

    With ``hatted=True`` returns the reward-tilted target ref * exp(r) / Z
    that the f-PO objective matches against.
    """
    _check_prompt(ref, prompt)
    return softmax(optimal_logits(ref, reward, beta, hatted)[prompt])


def log_ratio_g(policy: TabularPolicy, ref: TabularPolicy, beta: float, prompt: int, response: int) -> float:
    """beta * (log pi(y|x) - log ref(y|x))."""
    _check_same_shape(policy, ref)
    _check_prompt(policy, prompt)
    if not 0 <= response < policy.num_responses:
        raise IndexError(f"response {response} out of range")
    lp = log_softmax(policy.logits[prompt])[response]
    lr = log_softmax(ref.logits[prompt])[response]
    return float(beta * (lp - lr))


def log_ratio_table(policy: TabularPolicy, ref: TabularPolicy, beta: float) -> np.ndarray:
    """:func:`log_ratio_g` for every (prompt, response)."""
    _check_same_shape(policy, ref)
    return beta * (policy.log_probs() - ref.log_probs())


def _as_distribution(p, name):
    p = np.asarray(p, dtype=float)
    if p.ndim != 1 or p.size == 0:
        raise SupportError(f"{name} must be a nonempty vector")
    if np.any(p < 0) or not np.all(np.isfinite(p)):
        raise SupportError(f"{name} must be nonnegative and finite")
    return p


def f_divergence_from_logs(gen: Generator, log_p, log_q, axis=-1):
    """sum q * f(p / q) from log-probabilities, all entries of q positive."""
    log_p = np.asarray(log_p, dtype=float)
    log_q = np.asarray(log_q, dtype=float)
    return np.sum(np.exp(log_q) * gen.f_log(log_p - log_q), axis=axis)


def exact_f_divergence(gen: Generator, p, q) -> float:
    """D_f(p || q) = sum_i q_i f(p_i / q_i).

    Zero entries: q_i = p_i = 0 contributes nothing; q_i = 0 < p_i uses the
    limit p_i * lim f(u)/u when it is finite; p_i = 0 < q_i uses f(0+).
    Otherwise the divergence is undefined and :class:`SupportError` is raised.
    """
    p = _as_distribution(p, "p")
    q = _as_distribution(q, "q")
    if p.shape != q.shape:
        raise SupportError(f"support size mismatch: {p.size} vs {q.size}")

    both = (p > 0) & (q > 0)
    q_only = (p == 0) & (q > 0)
    p_only = (p > 0) & (q == 0)

    total = 0.0
    if np.any(both):
        total += float(f_divergence_from_logs(gen, np.log(p[both]), np.log(q[both])))
    if np.any(q_only):
        if gen.f_at_zero is None:
            raise SupportError(f"p vanishes where q > 0 and {gen} has a pole at 0")
        total += gen.f_at_zero * float(np.sum(q[q_only]))
    if np.any(p_only):
        slope = gen.slope_at_infinity
        if slope is None:
            raise SupportError(f"q vanishes where p > 0 and {gen} grows superlinearly")
        total += slope * float(np.sum(p[p_only]))
    return total


def tv_distance(p, q) -> float:
    """Total variation 0.5 * sum |p - q|."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if p.shape != q.shape:
        raise SupportError(f"support size mismatch: {p.shape} vs {q.shape}")
    return 0.5 * float(np.sum(np.abs(p - q)))


def mean_tv_hat(policy: TabularPolicy, ref: TabularPolicy, reward: RewardTable, beta: float) -> float:
    """Prompt-averaged TV between the geometric mixture and the tilted target."""
    a = softmax(mixture_logits(policy, ref, beta), axis=1)
    b = softmax(optimal_logits(ref, reward, beta, hatted=True), axis=1)
    return float(np.mean(0.5 * np.sum(np.abs(a - b), axis=1)))


def mean_tv_optimal(policy: TabularPolicy, ref: TabularPolicy, reward: RewardTable, beta: float) -> float:
    """Prompt-averaged TV between the policy and the closed-form optimum."""
    b = softmax(optimal_logits(ref, reward, beta), axis=1)
    return float(np.mean(0.5 * np.sum(np.abs(policy.probs() - b), axis=1)))
