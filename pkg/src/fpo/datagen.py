"""Synthetic tasks and the two data protocols (preferences, reward-labeled)."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy.special import expit, log_softmax

from .errors import ConfigError, ShapeError
from .losses import KSampleBatch, PairwiseBatch
from .policy import RewardTable, TabularPolicy


@dataclass(frozen=True)
class SyntheticTask:
    ref: TabularPolicy
    reward: RewardTable
    beta_star: float

    def __post_init__(self):
        if self.ref.shape != self.reward.shape:
            raise ShapeError("reference and reward shapes differ")
        if not self.beta_star > 0:
            raise ConfigError("beta_star must be positive")

    @property
    def shape(self):
        return self.ref.shape

    def to_json(self) -> str:
        return (
            f'{{"ref": {self.ref.to_json()}, "reward": {self.reward.to_json()}, '
            f'"beta_star": {format(self.beta_star, ".17g")}}}'
        )

    @classmethod
    def from_json(cls, text: str) -> "SyntheticTask":
        d = json.loads(text)
        return cls(
            TabularPolicy.from_json(json.dumps(d["ref"])),
            RewardTable.from_json(json.dumps(d["reward"])),
            float(d["beta_star"]),
        )


def make_synthetic_task(
    seed: int,
    num_prompts: int = 4,
    num_responses: int = 8,
    beta_star: float = 0.5,
    reward_scale: float = 3.0,
    max_length: int = 20,
) -> SyntheticTask:
    """Reference logits ~ N(0, 1), rewards ~ U[-scale, scale], lengths ~ U{1..max_length}."""
    if num_prompts < 2 or num_responses < 2:
        raise ConfigError("need at least 2 prompts and 2 responses")
    if reward_scale < 0:
        raise ConfigError("reward_scale must be nonnegative")
    rng = np.random.default_rng(seed)
    shape = (num_prompts, num_responses)
    logits = rng.standard_normal(shape)
    rewards = rng.uniform(-reward_scale, reward_scale, size=shape)
    lengths = rng.integers(1, max_length + 1, size=shape)
    return SyntheticTask(TabularPolicy(logits, lengths), RewardTable(rewards), beta_star)


def _sampling_logp(task: SyntheticTask, temperature: float) -> np.ndarray:
    if not temperature > 0:
        raise ConfigError("temperature must be positive")
    return log_softmax(task.ref.logits / temperature, axis=1)


def _gumbel_top_k(rng, logp_rows, k):
    """k draws without replacement from each row, in draw order."""
    keys = logp_rows + rng.gumbel(size=logp_rows.shape)
    return np.argsort(-keys, axis=1, kind="stable")[:, :k]


def sample_preferences(task: SyntheticTask, n: int, seed: int, temperature: float = 1.0) -> PairwiseBatch:
    """Bradley-Terry labeled pairs; no reward values are attached.

    Prompts are uniform, the two responses are drawn from the (tempered)
    reference without replacement, and the first wins with probability
    sigma(r_a - r_b).
    """
    if n < 1:
        raise ConfigError("n must be >= 1")
    rng = np.random.default_rng(seed)
    logp = _sampling_logp(task, temperature)
    prompts = rng.integers(0, task.shape[0], size=n)
    pair = _gumbel_top_k(rng, logp[prompts], 2)
    a, b = pair[:, 0], pair[:, 1]
    r = task.reward.values
    a_wins = rng.random(n) < expit(r[prompts, a] - r[prompts, b])
    return PairwiseBatch(prompts, np.where(a_wins, a, b), np.where(a_wins, b, a))


def sample_reward_dataset(
    task: SyntheticTask,
    n: int,
    k: int,
    seed: int,
    full_support: bool = False,
    temperature: float = 1.0,
) -> KSampleBatch:
    """K distinct responses per record with exact rewards.

    ``full_support`` lists every response once per record (K = num_responses)
    and cycles through the prompts in order.
    """
    nx, ny = task.shape
    if n < 1:
        raise ConfigError("n must be >= 1")
    r = task.reward.values
    if full_support:
        prompts = np.arange(n) % nx
        responses = np.tile(np.arange(ny), (n, 1))
        return KSampleBatch(prompts, responses, r[prompts[:, None], responses])
    if not 2 <= k <= ny:
        raise ConfigError(f"K must lie in [2, {ny}], got {k}")
    rng = np.random.default_rng(seed)
    logp = _sampling_logp(task, temperature)
    prompts = rng.integers(0, nx, size=n)
    responses = _gumbel_top_k(rng, logp[prompts], k)
    return KSampleBatch(prompts, responses, r[prompts[:, None], responses])


def sample_iid_responses(task: SyntheticTask, prompts, k: int, rng) -> np.ndarray:
    """K i.i.d. draws (with replacement) from the reference, one row per prompt."""
    p = task.ref.probs()[np.asarray(prompts)]
    cdf = np.cumsum(p, axis=1)
    u = rng.random((len(p), k)) * cdf[:, -1:]
    idx = np.sum(cdf[:, None, :] <= u[:, :, None], axis=2)
    return np.minimum(idx, p.shape[1] - 1)


def dumps_jsonl(batch) -> str:
    """One JSON object per record."""
    lines = []
    if isinstance(batch, PairwiseBatch):
        for x, w, l in zip(batch.prompts, batch.winners, batch.losers):
            lines.append(f'{{"x": {int(x)}, "yw": {int(w)}, "yl": {int(l)}}}')
    else:
        for x, ys, rs in zip(batch.prompts, batch.responses, batch.rewards):
            ys_s = ", ".join(str(int(y)) for y in ys)
            rs_s = ", ".join(format(float(v), ".17g") for v in rs)
            lines.append(f'{{"x": {int(x)}, "ys": [{ys_s}], "rs": [{rs_s}]}}')
    return "\n".join(lines) + "\n"


def loads_jsonl(text: str):
    """Inverse of :func:`dumps_jsonl`; the record keys select the batch type."""
    recs = [json.loads(line) for line in text.splitlines() if line.strip()]
    if not recs:
        raise ShapeError("no records")
    if "yw" in recs[0]:
        return PairwiseBatch.from_records([(d["x"], d["yw"], d["yl"]) for d in recs])
    return KSampleBatch(
        [d["x"] for d in recs],
        [d["ys"] for d in recs],
        [[float(v) for v in d["rs"]] for d in recs],
    )
