import json
import math

import numpy as np
import pytest

from fpo.cli import main
from fpo.datagen import sample_preferences
from fpo.errors import ConfigError
from fpo.generators import alpha_divergence, default_generators, forward_kl, parse_generator, reverse_kl
from fpo.harness import (
    REFERENCE_GRID,
    SCHEMAS,
    ExperimentConfig,
    GridDensityFamily,
    basin_masses,
    basin_split,
    exact_hat_divergence,
    mc_estimates,
    render_rows,
    run_experiment,
    target_log_probs,
    theorem2_errors,
    train_on_preferences,
    win_proxy,
)
from fpo.trainer import OptimizerConfig

FAST = OptimizerConfig("adam", 0.05, max_steps=300)


def brute_force_fit(gen, log_q, mus=REFERENCE_GRID, log_sigmas=np.linspace(-2.0, 3.0, 101)):
    """Exhaustive (mu, log sigma) search; returns (loss, mu, log_sigma)."""
    fam = GridDensityFamily(REFERENCE_GRID)
    best = (math.inf, None, None)
    for mu in mus:
        for ls in log_sigmas:
            with np.errstate(all="ignore"):
                val, _ = fam.divergence_and_grad(gen, mu, ls, log_q)
            if val < best[0]:
                best = (val, float(mu), float(ls))
    return best


def brute_force_masses(gen, center):
    log_q = target_log_probs("bimodal", center=center)
    _, mu, ls = brute_force_fit(gen, log_q)
    p = np.exp(GridDensityFamily(REFERENCE_GRID).log_probs(mu, ls))
    return basin_masses(p, basin_split(log_q))


# ----------------------------------------------------------------------------
# row contracts


@pytest.mark.parametrize(
    "experiment, kw, n",
    [
        ("generator_check", {}, 5),
        ("theorem1", dict(optimizer=FAST), 5),
        ("theorem2", dict(num_seeds=10, generators=["fkl", "rkl"]), 8),
        ("equivalence", dict(num_checks=20), 6),
        ("alpha_sweep", dict(optimizer=FAST, num_pairs=200, alphas=[0.2, 0.8]), 2),
        ("divergence_behavior", dict(generators=["fkl", "rkl"]), 2),
    ],
)
def test_row_counts_and_schema(experiment, kw, n):
    rows = run_experiment(ExperimentConfig(experiment, **kw))
    assert len(rows) == n
    header = render_rows(rows, experiment).splitlines()[0]
    assert header == ",".join(SCHEMAS[experiment])


def test_config_errors():
    with pytest.raises(ConfigError):
        ExperimentConfig("theorem3")
    with pytest.raises(ConfigError):
        ExperimentConfig("theorem2", ks=[])
    with pytest.raises(ConfigError):
        run_experiment(ExperimentConfig("alpha_sweep", alphas=[1.0]))
    with pytest.raises(ConfigError):
        ExperimentConfig("theorem1", init="sft")


# ----------------------------------------------------------------------------
# theorem 1


def test_theorem1_all_generators_converge():
    rows = run_experiment(ExperimentConfig("theorem1"))
    for row in rows:
        assert row["final_tv_hat"] < 1e-3, row
        assert row["steps"] <= 5000
        assert row["seconds"] is None


def test_theorem1_zero_steps_reports_initial_tv():
    opt = OptimizerConfig("adam", 0.05, max_steps=0)
    rows = run_experiment(ExperimentConfig("theorem1", optimizer=opt))
    assert all(r["steps"] == 0 for r in rows)
    assert len({r["final_tv_hat"] for r in rows}) == 1 and rows[0]["final_tv_hat"] > 0.01


def test_theorem1_zero_reward_from_reference():
    opt = OptimizerConfig("adam", 0.05, max_steps=0)
    rows = run_experiment(ExperimentConfig("theorem1", reward_scale=0.0, init="ref", optimizer=opt))
    assert all(r["final_tv_hat"] < 1e-6 and r["final_tv"] < 1e-6 for r in rows)


def test_theorem1_timing_column():
    opt = OptimizerConfig("adam", 0.05, max_steps=5)
    rows = run_experiment(ExperimentConfig("theorem1", generators=["fkl"], optimizer=opt, timing=True))
    assert rows[0]["seconds"] >= 0


# ----------------------------------------------------------------------------
# theorem 2


def test_theorem2_zero_when_g_tracks_reward():
    cfg = ExperimentConfig("theorem2")
    task = cfg.task()
    theta = task.ref.with_logits(task.ref.logits + task.reward.values / task.beta_star + 5.0)
    for gen in default_generators():
        assert abs(exact_hat_divergence(gen, theta, task)) < 1e-12
        for k in (2, 8, 32):
            est = mc_estimates(gen, theta, task, k, [[0, s] for s in range(5)])
            assert np.max(np.abs(est)) < 1e-12


def test_theorem2_fkl_k128_relative_error():
    cfg = ExperimentConfig("theorem2")
    task = cfg.task()
    from fpo.harness import frozen_theta

    theta = frozen_theta(task, cfg.seed)
    exact = exact_hat_divergence(forward_kl(), theta, task)
    err = theorem2_errors(forward_kl(), theta, task, 128, 100, cfg.seed)
    assert np.median(err) / exact < 0.10


# ----------------------------------------------------------------------------
# equivalences and alpha sweep


def test_equivalence_rows():
    rows = {r["check"]: r["max_gap"] for r in run_experiment(ExperimentConfig("equivalence", num_checks=300))}
    assert rows["dpo_vs_rkl_eps0"] < 1e-10
    assert rows["exo_vs_fkl"] < 1e-12
    assert rows["alpha_1e-4_vs_fkl"] < 1e-3
    assert rows["affine_shift_invariance"] < 1e-12
    assert rows["alpha_0.5_vs_nearest_endpoint"] > 1e-2


def test_alpha_sweep_endpoints_match_kl_runs():
    cfg = ExperimentConfig("alpha_sweep", optimizer=OptimizerConfig("adam", 0.05, max_steps=500))
    task = cfg.task()
    data = sample_preferences(task, cfg.num_pairs, cfg.seed)
    pairs = [(alpha_divergence(1e-5), forward_kl()), (alpha_divergence(1 - 1e-5), reverse_kl())]
    for a_gen, kl in pairs:
        a = train_on_preferences(a_gen, cfg, task, data)
        b = train_on_preferences(kl, cfg, task, data)
        assert abs(a.final_loss - b.final_loss) < 1e-3


def test_win_proxy_of_reference_is_half():
    cfg = ExperimentConfig("alpha_sweep", alphas=[0.5], optimizer=OptimizerConfig("adam", 0.05, max_steps=0))
    task = cfg.task()
    assert win_proxy(task.ref, task.ref, task.reward) == pytest.approx(0.5, abs=1e-15)
    row = run_experiment(cfg)[0]
    assert row["win_proxy"] == pytest.approx(0.5, abs=1e-15)


def test_alpha_sweep_improves_win_proxy():
    cfg = ExperimentConfig("alpha_sweep", alphas=[0.5], num_pairs=500, optimizer=OptimizerConfig("adam", 0.05, max_steps=300))
    assert run_experiment(cfg)[0]["win_proxy"] > 0.6


# ----------------------------------------------------------------------------
# divergence behavior


def test_divergence_gradient_matches_finite_difference():
    fam = GridDensityFamily(REFERENCE_GRID)
    log_q = target_log_probs()
    for gen in default_generators():
        _, g = fam.divergence_and_grad(gen, 0.7, 0.2, log_q)
        h = 1e-6
        num = [
            (fam.divergence_and_grad(gen, 0.7 + h, 0.2, log_q)[0] - fam.divergence_and_grad(gen, 0.7 - h, 0.2, log_q)[0]) / (2 * h),
            (fam.divergence_and_grad(gen, 0.7, 0.2 + h, log_q)[0] - fam.divergence_and_grad(gen, 0.7, 0.2 - h, log_q)[0]) / (2 * h),
        ]
        np.testing.assert_allclose(g, num, rtol=1e-5, atol=1e-9)


def test_unimodal_mean_recovered_within_one_cell():
    cell = REFERENCE_GRID[1] - REFERENCE_GRID[0]
    for row in run_experiment(ExperimentConfig("divergence_behavior", target="unimodal")):
        assert abs(row["mu"] - 1.0) < cell, row


def test_reference_target_thresholds_hold_under_brute_force():
    m = brute_force_masses(forward_kl(), 4.0)
    assert max(m) >= 0.8
    for name in ("rkl", "js", "jeffreys", "alpha:0.5"):
        m = brute_force_masses(parse_generator(name), 4.0)
        assert min(m) >= 0.2, name


def test_adam_fit_agrees_with_brute_force():
    rows = {r["generator"]: r for r in run_experiment(ExperimentConfig("divergence_behavior", generators=["fkl", "rkl"]))}
    assert max(rows["fkl"]["mass_basin_1"], rows["fkl"]["mass_basin_2"]) >= 0.8
    assert min(rows["rkl"]["mass_basin_1"], rows["rkl"]["mass_basin_2"]) >= 0.2
    _, mu, ls = brute_force_fit(forward_kl(), target_log_probs())
    assert abs(abs(rows["fkl"]["mu"]) - abs(mu)) < 0.13
    assert rows["fkl"]["sigma"] == pytest.approx(math.exp(ls), rel=0.06)


def test_close_modes_are_not_separated():
    """With modes at +-2 the best u ln u fit is one broad Gaussian over both."""
    m = brute_force_masses(forward_kl(), 2.0)
    assert max(m) < 0.6
    cfg = ExperimentConfig("divergence_behavior", generators=["fkl"], mode_center=2.0)
    row = run_experiment(cfg)[0]
    assert max(row["mass_basin_1"], row["mass_basin_2"]) < 0.6


# ----------------------------------------------------------------------------
# rendering, CLI and determinism


def test_render_json_nan_is_null():
    rows = [{"generator": "fkl", "final_tv_hat": math.nan, "final_tv": 0.1, "steps": 3, "seconds": None}]
    d = json.loads(render_rows(rows, "theorem1", "json"))
    assert d[0]["final_tv_hat"] is None and d[0]["steps"] == 3


def test_cli_theorem1_row_count(tmp_path, capsys):
    out = tmp_path / "t1.csv"
    argv = ["theorem1", "--prompts", "4", "--responses", "8", "--generators", "fkl,rkl,js,jeffreys,alpha:0.5",
            "--max-steps", "50", "--out", str(out)]
    assert main(argv) == 0
    assert len(out.read_text().splitlines()) == 6
    assert "5 rows" in capsys.readouterr().out


def test_cli_equivalence_json(tmp_path):
    out = tmp_path / "eq.json"
    assert main(["equivalence", "--num-checks", "20", "--out", str(out)]) == 0
    data = json.loads(out.read_text())
    assert isinstance(data, list) and {"check", "max_gap"} == set(data[0])


@pytest.mark.parametrize(
    "argv",
    [["theorem1", "--bogus"], ["alpha-sweep", "--alphas", "0.5,1.5"], ["nothing"], [],
     ["theorem2", "--ks", ""], ["theorem1", "--generators", "kl"], ["theorem1", "--epsilon", "0.7"]],
)
def test_cli_config_errors_exit_1(argv, capsys):
    assert main(argv) == 1


def test_cli_numerical_failure_exits_2(monkeypatch, capsys):
    from fpo import cli
    from fpo.errors import DivergenceError

    def boom(cfg):
        raise DivergenceError("blew up", step=3)

    monkeypatch.setattr(cli, "run_experiment", boom)
    assert main(["theorem1"]) == 2
    assert "numerical failure" in capsys.readouterr().err


@pytest.mark.parametrize(
    "argv",
    [
        ["generator-check"],
        ["theorem1", "--max-steps", "200"],
        ["theorem2", "--num-seeds", "20"],
        ["equivalence", "--num-checks", "50"],
        ["alpha-sweep", "--alphas", "0.1,0.3,0.5,0.7,0.9", "--seed", "7", "--max-steps", "100", "--pairs", "300"],
        ["divergence-behavior", "--generators", "fkl,rkl"],
    ],
    ids=lambda a: a[0],
)
def test_cli_byte_identical_reruns(argv, tmp_path, monkeypatch):
    paths = []
    for i, threads in enumerate(("1", "4")):
        monkeypatch.setenv("FPO_THREADS", threads)
        p = tmp_path / f"run{i}.csv"
        assert main(argv + ["--out", str(p)]) == 0
        paths.append(p.read_bytes())
    assert paths[0] == paths[1]
