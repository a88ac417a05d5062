"""Desk-scale experiments: one function per experiment, each returning rows.

Rows are plain dicts whose keys follow :data:`SCHEMAS`; :func:`write_rows`
renders them as CSV or JSON. All randomness is derived from the config seed,
so identical configs give byte-identical output.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import expit, log_softmax

from .datagen import (
    SyntheticTask,
    make_synthetic_task,
    sample_iid_responses,
    sample_preferences,
    sample_reward_dataset,
)
from .errors import ConfigError, FPOError, OptimizationError
from .generators import (
    Generator,
    alpha_divergence,
    check_generator,
    default_generators,
    forward_kl,
    log_grid,
    parse_generator,
    reverse_kl,
)
from .losses import (
    LossConfig,
    PairwiseBatch,
    dpo_loss,
    exo_loss,
    fpo_loss_pairwise_smoothed,
    general_terms,
)
from .policy import (
    RewardTable,
    TabularPolicy,
    f_divergence_from_logs,
    mean_tv_hat,
    mean_tv_optimal,
    mixture_logits,
    optimal_logits,
)
from .trainer import AdamState, OptimizerConfig, adam_step, train, uniform_init

log = logging.getLogger(__name__)

EXPERIMENTS = (
    "generator_check",
    "theorem1",
    "theorem2",
    "equivalence",
    "alpha_sweep",
    "divergence_behavior",
)

SCHEMAS = {
    "generator_check": ["generator", "f_one_residual", "max_convexity_violation", "max_derivative_error"],
    "theorem1": ["generator", "final_tv_hat", "final_tv", "steps", "seconds"],
    "theorem2": ["generator", "k", "median_abs_err", "iqr"],
    "equivalence": ["check", "max_gap"],
    "alpha_sweep": ["alpha", "final_loss", "final_tv_hat", "win_proxy"],
    "divergence_behavior": ["generator", "mass_basin_1", "mass_basin_2", "mu", "sigma"],
}

REFERENCE_GRID = np.linspace(-6.0, 6.0, 101)

# modes closer than about +-3.25 are fit better by one broad Gaussian under
# sum p log(p/q) than by either mode, so no divergence separates them
REFERENCE_MODE_CENTER = 4.0


@dataclass
class ExperimentConfig:
    experiment: str
    prompts: int = 4
    responses: int = 8
    seed: int = 7
    reward_scale: float = 2.0
    beta: float = 0.5
    epsilon: float = 1e-3
    generators: list[str] = field(default_factory=lambda: [str(g) for g in default_generators()])
    alphas: list[float] = field(default_factory=lambda: [0.1, 0.3, 0.5, 0.7, 0.9])
    ks: list[int] = field(default_factory=lambda: [2, 8, 32, 128])
    num_seeds: int = 100
    num_pairs: int = 2000
    num_checks: int = 1000
    optimizer: OptimizerConfig = field(default_factory=lambda: OptimizerConfig("adam", 0.05, max_steps=5000))
    target: str = "bimodal"
    mode_center: float = REFERENCE_MODE_CENTER
    init: str = "uniform"
    timing: bool = False
    out: str | None = None
    fmt: str = "csv"

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"unknown experiment {self.experiment!r}")
        if not 0.0 <= self.epsilon <= 0.5:
            raise ConfigError("epsilon must lie in [0, 0.5]")
        if not self.beta > 0:
            raise ConfigError("beta must be positive")
        if self.init not in ("uniform", "ref"):
            raise ConfigError("init must be 'uniform' or 'ref'")
        if self.fmt not in ("csv", "json"):
            raise ConfigError("format must be csv or json")
        if self.experiment in ("theorem1", "theorem2", "divergence_behavior", "generator_check") and not self.generators:
            raise ConfigError("generator list is empty")
        if self.experiment == "theorem2" and not self.ks:
            raise ConfigError("K list is empty")
        if self.experiment == "alpha_sweep" and not self.alphas:
            raise ConfigError("alpha list is empty")

    def task(self) -> SyntheticTask:
        return make_synthetic_task(self.seed, self.prompts, self.responses, self.beta, self.reward_scale)

    def generator_objects(self) -> list[Generator]:
        return [parse_generator(g) for g in self.generators]


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("FPO_THREADS", "1")))
    except ValueError:
        return 1


def _ordered_map(fn, items):
    """map() that may run in parallel but always returns results in input order."""
    items = list(items)
    n = min(_threads(), len(items))
    if n <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=n) as ex:
        return list(ex.map(fn, items))


def _nan_row(schema, **known):
    row = {k: math.nan for k in schema}
    row.update(known)
    return row


# ----------------------------------------------------------------------------
# generator check


def run_generator_check(cfg: ExperimentConfig) -> list[dict]:
    grid = log_grid(1e-4, 1e4, 101)
    rows = []
    for gen in cfg.generator_objects():
        rep = check_generator(gen, grid)
        rows.append(
            {
                "generator": str(gen),
                "f_one_residual": rep.f_one_residual,
                "max_convexity_violation": rep.max_convexity_violation,
                "max_derivative_error": rep.max_derivative_error,
            }
        )
    return rows


# ----------------------------------------------------------------------------
# theorem 1: the f-PO fixed point is the RLHF optimum


def run_theorem1(cfg: ExperimentConfig) -> list[dict]:
    task = cfg.task()
    data = sample_reward_dataset(task, task.shape[0], task.shape[1], cfg.seed, full_support=True)
    init = uniform_init(task.ref) if cfg.init == "uniform" else task.ref
    opt = replace(cfg.optimizer, log_every=max(cfg.optimizer.max_steps, 1))

    def one(gen):
        lcfg = LossConfig(gen, beta=task.beta_star, variant="general_k")
        t0 = time.perf_counter()
        try:
            rep = train(opt, lcfg, init, task.ref, task.reward, data)
        except FPOError as exc:
            log.warning("theorem1 %s failed: %s", gen, exc)
            return _nan_row(SCHEMAS["theorem1"], generator=str(gen))
        secs = time.perf_counter() - t0
        return {
            "generator": str(gen),
            "final_tv_hat": rep.final_tv,
            "final_tv": mean_tv_optimal(rep.final_policy, task.ref, task.reward, task.beta_star),
            "steps": rep.steps_taken,
            "seconds": secs if cfg.timing else None,
        }

    return _ordered_map(one, cfg.generator_objects())


# ----------------------------------------------------------------------------
# theorem 2: the K-sample loss is a consistent estimate of the divergence


def frozen_theta(task: SyntheticTask, seed: int) -> TabularPolicy:
    """The random policy at which the estimator is evaluated."""
    rng = np.random.default_rng([seed, 2])
    return task.ref.with_logits(rng.standard_normal(task.shape))


def exact_hat_divergence(gen: Generator, theta: TabularPolicy, task: SyntheticTask) -> float:
    """Prompt-averaged D_f(mixture || tilted target), computed exactly."""
    log_p = log_softmax(mixture_logits(theta, task.ref, task.beta_star), axis=1)
    log_q = log_softmax(optimal_logits(task.ref, task.reward, task.beta_star, hatted=True), axis=1)
    return float(np.mean(f_divergence_from_logs(gen, log_p, log_q, axis=1)))


def mc_estimates(gen: Generator, theta: TabularPolicy, task: SyntheticTask, k: int, seeds) -> np.ndarray:
    """One K-sample loss estimate per seed, responses drawn i.i.d. from the reference."""
    nx = task.shape[0]
    g_table = task.beta_star * (theta.log_probs() - task.ref.log_probs())
    r = task.reward.values
    prompts = np.arange(nx)
    out = []
    for s in seeds:
        rng = np.random.default_rng(s)
        ys = sample_iid_responses(task, prompts, k, rng)
        losses, _ = general_terms(gen, g_table[prompts[:, None], ys], r[prompts[:, None], ys])
        out.append(np.mean(losses))
    return np.array(out)


def theorem2_errors(gen, theta, task, k, num_seeds, base_seed) -> np.ndarray:
    exact = exact_hat_divergence(gen, theta, task)
    seeds = [[base_seed, k, s] for s in range(num_seeds)]
    return np.abs(mc_estimates(gen, theta, task, k, seeds) - exact)


def run_theorem2(cfg: ExperimentConfig) -> list[dict]:
    if not cfg.ks:
        raise ConfigError("K list is empty")
    task = cfg.task()
    theta = frozen_theta(task, cfg.seed)
    jobs = [(gen, k) for gen in cfg.generator_objects() for k in cfg.ks]

    def one(job):
        gen, k = job
        if k < 2:
            raise ConfigError("K must be >= 2")
        err = theorem2_errors(gen, theta, task, k, cfg.num_seeds, cfg.seed)
        q1, med, q3 = np.percentile(err, [25, 50, 75])
        return {"generator": str(gen), "k": k, "median_abs_err": float(med), "iqr": float(q3 - q1)}

    return _ordered_map(one, jobs)


# ----------------------------------------------------------------------------
# equivalences: DPO, EXO, alpha endpoints, affine invariance


def _pair_instance(delta: float, beta: float):
    """A 1 x 2 policy/ref pair whose only record has log-ratio margin ``delta``."""
    pol = TabularPolicy([[delta / beta, 0.0]])
    ref = TabularPolicy([[0.0, 0.0]])
    return pol, ref, PairwiseBatch.from_records([(0, 0, 1)])


def smoothed_loss_at(gen: Generator, delta: float, epsilon: float, beta: float = 1.0) -> float:
    pol, ref, batch = _pair_instance(delta, beta)
    cfg = LossConfig(gen, beta=beta, epsilon=epsilon)
    return fpo_loss_pairwise_smoothed(cfg, pol, ref, batch).loss


def equivalence_gaps(deltas, epsilon_exo=1e-3, epsilon_alpha=0.1, beta=1.0, shift=3.0) -> dict:
    """Max pointwise gaps over ``deltas`` for each equivalence check."""
    gaps = {}
    dpo = exo = a0 = a1 = mid = 0.0
    aff = 0.0
    a_lo, a_hi, a_mid = alpha_divergence(1e-4), alpha_divergence(1 - 1e-4), alpha_divergence(0.5)
    for d in deltas:
        pol, ref, batch = _pair_instance(d, beta)
        dpo = max(dpo, abs(smoothed_loss_at(reverse_kl(), d, 0.0, beta) - dpo_loss(pol, ref, beta, batch).loss))
        exo = max(exo, abs(smoothed_loss_at(forward_kl(), d, epsilon_exo, beta)
                           - exo_loss(pol, ref, beta, epsilon_exo, batch).loss))
        l_fkl = smoothed_loss_at(forward_kl(), d, epsilon_alpha, beta)
        l_rkl = smoothed_loss_at(reverse_kl(), d, epsilon_alpha, beta)
        a0 = max(a0, abs(smoothed_loss_at(a_lo, d, epsilon_alpha, beta) - l_fkl))
        a1 = max(a1, abs(smoothed_loss_at(a_hi, d, epsilon_alpha, beta) - l_rkl))
        l_mid = smoothed_loss_at(a_mid, d, epsilon_alpha, beta)
        mid = max(mid, min(abs(l_mid - l_fkl), abs(l_mid - l_rkl)))
        for gen in default_generators():
            aff = max(aff, abs(smoothed_loss_at(gen.shifted(shift), d, epsilon_alpha, beta)
                               - smoothed_loss_at(gen, d, epsilon_alpha, beta)))
    gaps["dpo_vs_rkl_eps0"] = dpo
    gaps["exo_vs_fkl"] = exo
    gaps["alpha_1e-4_vs_fkl"] = a0
    gaps["alpha_1-1e-4_vs_rkl"] = a1
    gaps["alpha_0.5_vs_nearest_endpoint"] = mid
    gaps["affine_shift_invariance"] = aff
    return gaps


def run_equivalence(cfg: ExperimentConfig) -> list[dict]:
    rng = np.random.default_rng([cfg.seed, 3])
    deltas = rng.uniform(-10.0, 10.0, size=cfg.num_checks)
    gaps = equivalence_gaps(deltas, epsilon_exo=cfg.epsilon)
    return [{"check": k, "max_gap": v} for k, v in gaps.items()]


# ----------------------------------------------------------------------------
# alpha sweep on Bradley-Terry preference data


def win_proxy(policy: TabularPolicy, ref: TabularPolicy, reward: RewardTable) -> float:
    """Prompt-averaged P(y ~ policy beats y' ~ ref) under Bradley-Terry on the true reward."""
    r = reward.values
    beats = expit(r[:, :, None] - r[:, None, :])
    return float(np.mean(np.einsum("xi,xj,xij->x", policy.probs(), ref.probs(), beats)))


def train_on_preferences(gen: Generator, cfg: ExperimentConfig, task=None, data=None):
    task = task if task is not None else cfg.task()
    data = data if data is not None else sample_preferences(task, cfg.num_pairs, cfg.seed)
    lcfg = LossConfig(gen, beta=task.beta_star, epsilon=cfg.epsilon, variant="pairwise_smoothed")
    opt = replace(cfg.optimizer, log_every=max(cfg.optimizer.max_steps, 1))
    return train(opt, lcfg, task.ref, task.ref, task.reward, data)


def run_alpha_sweep(cfg: ExperimentConfig) -> list[dict]:
    for a in cfg.alphas:
        if not 0.0 < a < 1.0:
            raise ConfigError(f"alpha must lie in (0, 1), got {a}")
    task = cfg.task()
    data = sample_preferences(task, cfg.num_pairs, cfg.seed)

    def one(a):
        try:
            rep = train_on_preferences(alpha_divergence(a), cfg, task, data)
        except FPOError as exc:
            log.warning("alpha %s failed: %s", a, exc)
            return _nan_row(SCHEMAS["alpha_sweep"], alpha=a)
        return {
            "alpha": a,
            "final_loss": rep.final_loss,
            "final_tv_hat": rep.final_tv,
            "win_proxy": win_proxy(rep.final_policy, task.ref, task.reward),
        }

    return _ordered_map(one, cfg.alphas)


# ----------------------------------------------------------------------------
# divergence behavior: fitting one discretized Gaussian to a target


@dataclass(frozen=True)
class GridDensityFamily:
    """Discretized Gaussians on a fixed increasing grid."""

    grid: np.ndarray

    def __post_init__(self):
        g = np.asarray(self.grid, dtype=float)
        if g.ndim != 1 or g.size < 3 or np.any(np.diff(g) <= 0):
            raise ConfigError("grid must be strictly increasing with >= 3 points")
        object.__setattr__(self, "grid", g)

    def log_probs(self, mu: float, log_sigma: float) -> np.ndarray:
        z = -0.5 * ((self.grid - mu) / math.exp(log_sigma)) ** 2
        return log_softmax(z)

    def divergence_and_grad(self, gen: Generator, mu, log_sigma, log_q):
        """D_f(p || q) = sum q f(p/q) and its gradient in (mu, log_sigma)."""
        log_p = self.log_probs(mu, log_sigma)
        lu = log_p - log_q
        val = float(np.sum(np.exp(log_q) * gen.f_log(lu)))
        p = np.exp(log_p)
        fp = gen.df_log(lu)
        dz = p * (fp - np.sum(p * fp))
        s2 = math.exp(2 * log_sigma)
        dx = self.grid - mu
        return val, np.array([np.sum(dz * dx / s2), np.sum(dz * dx * dx / s2)])


def target_log_probs(kind: str = "bimodal", grid=REFERENCE_GRID, center: float = REFERENCE_MODE_CENTER) -> np.ndarray:
    """Bimodal: equal mixture of unit Gaussians at +-center. Unimodal: N(1, 1)."""
    grid = np.asarray(grid, dtype=float)
    if kind == "bimodal":
        z = np.logaddexp(-0.5 * (grid + center) ** 2, -0.5 * (grid - center) ** 2)
    elif kind == "unimodal":
        z = -0.5 * (grid - 1.0) ** 2
    else:
        raise ConfigError(f"unknown target {kind!r}")
    return log_softmax(z)


def basin_split(log_q: np.ndarray) -> int:
    """Index of the target's lowest interior point between its two highest peaks."""
    q = np.exp(log_q)
    peaks = [i for i in range(1, q.size - 1) if q[i] >= q[i - 1] and q[i] >= q[i + 1]]
    if len(peaks) < 2:
        return int(np.argmax(q))
    top = sorted(sorted(peaks, key=lambda i: -q[i])[:2])
    return top[0] + int(np.argmin(q[top[0] : top[1] + 1]))


def basin_masses(p: np.ndarray, split: int) -> tuple[float, float]:
    """Mass left and right of ``split``; the split point counts half to each side."""
    left = float(np.sum(p[:split]) + 0.5 * p[split])
    return left, float(np.sum(p[split + 1 :]) + 0.5 * p[split])


def fit_family(gen, family: GridDensityFamily, log_q, starts, steps=3000, lr=0.05):
    """Adam from each start; returns (loss, mu, log_sigma) of the best finite fit."""
    best = None
    for mu0, ls0 in starts:
        state = AdamState.zeros_like([mu0, ls0])
        ok = True
        for _ in range(steps):
            with np.errstate(all="ignore"):
                _, grad = family.divergence_and_grad(gen, state.params[0], state.params[1], log_q)
            if not np.all(np.isfinite(grad)):
                ok = False
                break
            state = adam_step(state, grad, lr)
            state.params[1] = min(max(state.params[1], -5.0), 3.0)
        if not ok:
            continue
        with np.errstate(all="ignore"):
            val, _ = family.divergence_and_grad(gen, state.params[0], state.params[1], log_q)
        if np.isfinite(val) and (best is None or val < best[0]):
            best = (val, float(state.params[0]), float(state.params[1]))
    if best is None:
        raise OptimizationError(f"no start converged for {gen}")
    return best


def run_divergence_behavior(cfg: ExperimentConfig) -> list[dict]:
    family = GridDensityFamily(REFERENCE_GRID)
    log_q = target_log_probs(cfg.target, center=cfg.mode_center)
    split = basin_split(log_q)
    if cfg.target == "bimodal":
        c = cfg.mode_center
        starts = [(-c, 0.0), (0.0, 0.0), (c, 0.0)]
    else:
        mode = float(REFERENCE_GRID[np.argmax(log_q)])
        starts = [(mode - 2.0, 0.0), (mode, 0.0), (mode + 2.0, 0.0)]

    def one(gen):
        _, mu, ls = fit_family(gen, family, log_q, starts)
        m1, m2 = basin_masses(np.exp(family.log_probs(mu, ls)), split)
        return {"generator": str(gen), "mass_basin_1": m1, "mass_basin_2": m2, "mu": mu, "sigma": math.exp(ls)}

    return _ordered_map(one, cfg.generator_objects())


# ----------------------------------------------------------------------------
# output


RUNNERS = {
    "generator_check": run_generator_check,
    "theorem1": run_theorem1,
    "theorem2": run_theorem2,
    "equivalence": run_equivalence,
    "alpha_sweep": run_alpha_sweep,
    "divergence_behavior": run_divergence_behavior,
}


def run_experiment(cfg: ExperimentConfig) -> list[dict]:
    return RUNNERS[cfg.experiment](cfg)


def _cell(v):
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _json_value(v):
    if isinstance(v, (np.floating, float)):
        v = float(v)
        return v if math.isfinite(v) else None
    if isinstance(v, np.integer):
        return int(v)
    return v


def render_rows(rows: list[dict], experiment: str, fmt: str = "csv") -> str:
    cols = SCHEMAS[experiment]
    if fmt == "json":
        return json.dumps([{c: _json_value(r.get(c)) for c in cols} for r in rows], indent=1) + "\n"
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for r in rows:
        w.writerow([_cell(r.get(c)) for c in cols])
    return buf.getvalue()


def write_rows(rows: list[dict], experiment: str, path: str, fmt: str = "csv") -> None:
    with open(path, "w", newline="") as fh:
        fh.write(render_rows(rows, experiment, fmt))
