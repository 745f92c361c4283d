import numpy as np
import pytest

from cfgen.scm import (
    ConfigurationError,
    ScmCoefficients,
    ScmConfig,
    StaticCovariateConfig,
    Trajectory,
    _simulate_arrays,
    all_combos,
    combo_to_array,
    counterfactual_from_trajectory,
    load_trajectories,
    preset_coefficients,
    sample_counterfactual,
    save_trajectories,
    simulate_dataset,
    windowize,
)

D1 = preset_coefficients("table4-d1")
D3 = preset_coefficients("table4-d3")


def test_preset_lengths_match_table():
    for name, d in [("table4-d1", 1), ("table4-d3", 3), ("table4-d5", 5)]:
        c = preset_coefficients(name)
        c.validate(d)
        assert len(c.alpha) == 1 + 2 * d
        assert len(c.beta) == 2 * d
        assert len(c.gamma) == 2 * d - 1


def test_coefficient_length_mismatch_rejected():
    with pytest.raises(ConfigurationError):
        D1.validate(3)
    with pytest.raises(ConfigurationError):
        ScmCoefficients([0, 1, 2], [0, 1], [0], noise_variance=-1.0)


def test_d1_covariates_vanish_after_start():
    # gamma = (0): both recurrence sums are empty, so X_t = 0 for t >= 1
    cfg = ScmConfig(d=1, T=50, n_traj=20, seed=3)
    trajs = simulate_dataset(cfg, D1)
    for traj in trajs:
        assert 0.0 <= traj.x[0] <= 1.0
        np.testing.assert_array_equal(traj.x[1:], np.zeros(49))


def test_d1_outcome_closed_form_with_suppressed_noise():
    # alpha = (-3, 2, -1), X on 0: A=1 -> Y = -1, A=0 -> Y = -3
    coeffs = ScmCoefficients(D1.alpha, D1.beta, D1.gamma, noise_variance=1e-20)
    cfg = ScmConfig(d=1, T=30, n_traj=10, seed=0)
    for traj in simulate_dataset(cfg, coeffs):
        expect = np.where(traj.a[1:] > 0.5, -1.0, -3.0)
        np.testing.assert_allclose(traj.y[1:, 0], expect, atol=1e-8)


def test_initial_covariate_uniform_and_positivity():
    cfg = ScmConfig(d=3, T=40, n_traj=100, seed=11)
    x0, a_u, y_n, v = np.random.uniform(size=100), np.random.uniform(size=(100, 40)), np.zeros((100, 40)), None
    X, A, Y, P = _simulate_arrays(D3, cfg, x0, a_u, y_n, v)
    assert np.all((P > 0.0) & (P < 1.0))
    trajs = simulate_dataset(cfg, D3)
    assert all(0.0 <= t.x[0] <= 1.0 for t in trajs)


def test_determinism_bit_identical():
    cfg = ScmConfig(d=3, T=25, n_traj=30, seed=42)
    t1 = simulate_dataset(cfg, D3)
    t2 = simulate_dataset(cfg, D3)
    for a, b in zip(t1, t2):
        np.testing.assert_array_equal(a.x, b.x)
        np.testing.assert_array_equal(a.a, b.a)
        np.testing.assert_array_equal(a.y, b.y)


def test_windowize_counts():
    cfg = ScmConfig(d=3, T=3, n_traj=4, seed=0)
    assert len(windowize(simulate_dataset(cfg, D3), 3)) == 4
    cfg = ScmConfig(d=1, T=100, n_traj=2, seed=0)
    assert len(windowize(simulate_dataset(cfg, D1), 1)) == 200


def test_windowize_last_sample_is_tail():
    cfg = ScmConfig(d=3, T=12, n_traj=1, seed=5)
    traj = simulate_dataset(cfg, D3)[0]
    samples = windowize([traj], 3)
    last = samples[-1]
    np.testing.assert_array_equal(last.a_window, traj.a[-3:])
    np.testing.assert_array_equal(last.x_window, traj.x[-3:])
    np.testing.assert_array_equal(last.y, traj.y[-1])
    # context holds the d treatments / d-1 covariates preceding the window
    np.testing.assert_array_equal(last.a_context, traj.a[-6:-3])
    np.testing.assert_array_equal(last.x_context, traj.x[-5:-3])


def test_windowize_rejects_short_trajectory():
    short = Trajectory(x=np.zeros(2), a=np.zeros(2), y=np.zeros((2, 1)))
    with pytest.raises(ValueError, match="trajectory 0"):
        windowize([short], 3)


def test_counterfactual_means_d1():
    cfg = ScmConfig(d=1, T=100, n_traj=1, seed=0)
    y0 = sample_counterfactual(D1, cfg, np.array([0.0]), 100_000, seed=1)
    y1 = sample_counterfactual(D1, cfg, np.array([1.0]), 100_000, seed=2)
    assert y0.mean() == pytest.approx(-3.0, abs=0.01)
    assert y1.mean() == pytest.approx(-1.0, abs=0.01)
    # variance equals the configured noise variance (3 standard errors)
    se_var = D1.noise_variance * np.sqrt(2.0 / (100_000 - 1))
    assert y0.var() == pytest.approx(D1.noise_variance, abs=3 * se_var)


def test_counterfactual_degenerate_noise():
    coeffs = ScmCoefficients(D1.alpha, D1.beta, D1.gamma, noise_variance=1e-30)
    cfg = ScmConfig(d=1, T=20, n_traj=1, seed=0)
    ys = sample_counterfactual(coeffs, cfg, np.array([1.0]), 500, seed=3)
    np.testing.assert_allclose(ys, -1.0, atol=1e-10)


def test_counterfactual_uniform_prefix_mode_runs():
    cfg = ScmConfig(d=3, T=30, n_traj=1, seed=0)
    ys = sample_counterfactual(D3, cfg, np.array([1.0, 0.0, 1.0]), 2000, seed=4,
                               prefix_mode="uniform")
    assert ys.shape == (2000, 1)
    assert np.all(np.isfinite(ys))


def test_consistency_clamping_reproduces_observed():
    # clamping to the realized tail with the same noise reproduces Y bit-for-bit
    cfg = ScmConfig(d=3, T=40, n_traj=200, seed=9)
    from cfgen.scm import _draw_streams
    x0, a_u, y_n, v = _draw_streams(cfg, cfg.n_traj)
    noise = np.sqrt(D3.noise_variance) * y_n
    X, A, Y, _ = _simulate_arrays(D3, cfg, x0, a_u, noise, v)
    for combo in ("000", "101", "111"):
        a_bar = combo_to_array(combo)
        m = np.all(A[:, -3:] == a_bar, axis=1)
        if not m.any():
            continue
        Xc, Ac, Yc, _ = _simulate_arrays(D3, cfg, x0[m], a_u[m], noise[m], None,
                                         clamp_from=cfg.T - 3, a_bar=a_bar)
        np.testing.assert_array_equal(Yc[:, -1], Y[m, -1])


def test_scalar_clamping_matches_batch_path():
    cfg = ScmConfig(d=3, T=30, n_traj=50, seed=13)
    from cfgen.scm import _draw_streams
    x0, a_u, y_n, v = _draw_streams(cfg, cfg.n_traj)
    noise = np.sqrt(D3.noise_variance) * y_n
    X, A, Y, _ = _simulate_arrays(D3, cfg, x0, a_u, noise, v)
    a_bar = np.array([1.0, 1.0, 0.0])
    Xc, Ac, Yc, _ = _simulate_arrays(D3, cfg, x0, a_u, noise, None,
                                     clamp_from=cfg.T - 3, a_bar=a_bar)
    for i in range(10):
        traj = Trajectory(x=X[i], a=A[i], y=Y[i, :, None])
        y_scalar = counterfactual_from_trajectory(D3, cfg, traj, a_bar,
                                                  y_noise=noise[i, -1])
        assert y_scalar == pytest.approx(Yc[i, -1], abs=1e-10)


def test_beta0_override_reduces_exposure():
    cfg_bal = ScmConfig(d=3, T=60, n_traj=150, seed=21)
    cfg_imb = ScmConfig(d=3, T=60, n_traj=150, seed=21, beta0_override=-2.0)
    a_bal = np.mean([t.a.mean() for t in simulate_dataset(cfg_bal, D3)])
    a_imb = np.mean([t.a.mean() for t in simulate_dataset(cfg_imb, D3)])
    assert a_imb < a_bal - 0.1


def test_static_covariate_present_and_bounded():
    sc = StaticCovariateConfig(low=-1.0, high=0.0)
    cfg = ScmConfig(d=1, T=20, n_traj=50, seed=2, static_covariate=sc)
    trajs = simulate_dataset(cfg, D1)
    vs = np.array([t.v for t in trajs])
    assert np.all((vs >= -1.0) & (vs <= 0.0))
    # v shifts the outcome by coef_y * v on the d=1 preset (X stays 0)
    y_res = np.concatenate([
        t.y[1:, 0] - (-3.0 + 2.0 * t.a[1:] + sc.coef_y * t.v) for t in trajs])
    assert np.abs(y_res).std() == pytest.approx(np.sqrt(D1.noise_variance), rel=0.15)


def test_combo_labels_oldest_first():
    assert all_combos(2) == ["00", "01", "10", "11"]
    np.testing.assert_array_equal(combo_to_array("011"), [0.0, 1.0, 1.0])


def test_jsonl_roundtrip(tmp_path):
    cfg = ScmConfig(d=3, T=10, n_traj=5, seed=8)
    trajs = simulate_dataset(cfg, D3)
    path = tmp_path / "data.jsonl"
    save_trajectories(path, trajs, cfg, D3)
    loaded, header = load_trajectories(path)
    assert header["d"] == 3 and header["T"] == 10 and header["m"] == 1
    assert header["coeffs"]["alpha"] == D3.alpha.tolist()
    for a, b in zip(trajs, loaded):
        np.testing.assert_array_equal(a.x, b.x)
        np.testing.assert_array_equal(a.a, b.a)
        np.testing.assert_array_equal(a.y, b.y)
