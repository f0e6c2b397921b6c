import numpy as np
import pytest

from feedcap.channel_filter import (
    SequentialStrategy,
    _plant_value_grad,
    _poss_plant,
    output_riccati_step,
    run_output_filter,
)
from feedcap.noise_filter import run_noise_filter

from gen import random_realization, random_strategy
from bruteforce import closed_loop


def test_strategy_constructors_and_validation():
    s = SequentialStrategy.no_feedback(n=4, n_s=2, kappa=1.5)
    assert s.n == 4 and np.all(s.Lambda == 0.0) and np.all(s.K_Z == 1.5)
    z = SequentialStrategy.zero(n=3, n_s=1)
    assert np.all(z.K_Z == 0.0)
    with pytest.raises(ValueError, match="nonnegative"):
        SequentialStrategy(Lambda=np.zeros((2, 1)), K_Z=[1.0, -0.1])
    with pytest.raises(ValueError, match="does not match"):
        SequentialStrategy(Lambda=np.zeros((2, 1)), K_Z=[1.0])
    with pytest.raises(ValueError, match="non-finite"):
        SequentialStrategy(Lambda=[[np.inf]], K_Z=[1.0])


def test_output_filter_matches_projection_oracle():
    # cov(Shat - Shathat), output innovations and per-step power against
    # least-squares conditioning on the primitives
    rng = np.random.default_rng(20)
    for _ in range(50):
        r = random_realization(rng, n_max=6)
        s = random_strategy(rng, r)
        out = run_output_filter(r, s)
        ref = closed_loop(r, s)
        assert np.abs(out.K - ref.K).max() < 1e-9
        assert np.abs(out.K_I - ref.K_I).max() < 1e-9
        assert np.abs(out.power - ref.power).max() < 1e-9


def test_zero_strategy_adds_nothing():
    # with X = 0 the receiver sees V itself: K_I = K_Ihat and K = 0
    rng = np.random.default_rng(21)
    r = random_realization(rng, n=5)
    nt = run_noise_filter(r)
    out = run_output_filter(r, SequentialStrategy.zero(r.n, r.n_s), nt)
    assert np.abs(out.K_I - nt.K_Ihat).max() < 1e-12
    assert np.abs(out.K).max() < 1e-12
    assert np.all(out.power == 0.0)


def test_estimate_covariance_stays_psd():
    rng = np.random.default_rng(22)
    for _ in range(60):
        r = random_realization(rng, n_max=8)
        s = random_strategy(rng, r, lam_scale=float(rng.uniform(0.2, 3.0)))
        out = run_output_filter(r, s)
        for t in range(r.n):
            assert np.linalg.eigvalsh(out.K[t]).min() >= -1e-9
        assert np.all(out.K_I > 0.0)
        assert np.all(out.power >= 0.0)


def test_per_step_rate_nonnegative():
    # K_I_t >= K_Ihat_t: feedback cannot reduce the output innovations below
    # the noise innovations
    rng = np.random.default_rng(23)
    for _ in range(40):
        r = random_realization(rng, n_max=7)
        s = random_strategy(rng, r)
        nt = run_noise_filter(r)
        out = run_output_filter(r, s, nt)
        assert np.all(out.K_I >= nt.K_Ihat * (1.0 - 1e-12))


def test_shape_mismatch_is_rejected():
    rng = np.random.default_rng(24)
    r = random_realization(rng, n=4)
    s = SequentialStrategy.no_feedback(n=3, n_s=r.n_s, kappa=1.0)
    with pytest.raises(ValueError, match="does not match"):
        run_output_filter(r, s)


def test_single_step_matches_full_run():
    rng = np.random.default_rng(25)
    r = random_realization(rng, n=6)
    s = random_strategy(rng, r)
    nt = run_noise_filter(r)
    out = run_output_filter(r, s, nt)
    K = np.zeros((r.n_s, r.n_s))
    for t in range(r.n - 1):
        K, F, k_i = output_riccati_step(
            r.A[t], r.C[t, 0], s.Lambda[t], s.K_Z[t], nt.M[t], nt.K_Ihat[t], K)
        assert np.abs(K - out.K[t + 1]).max() < 1e-12
        assert np.abs(F - out.F[t]).max() < 1e-12
        assert k_i == pytest.approx(out.K_I[t], abs=1e-12)
    with pytest.raises(ValueError, match="K_Z"):
        output_riccati_step([[0.5]], [1.0], [0.1], -1.0, [0.2], 1.0, [[0.1]])


def test_adjoint_gradient_matches_finite_differences():
    rng = np.random.default_rng(26)
    h = 1e-5
    for _ in range(12):
        r = random_realization(rng, n_max=5)
        plant = _poss_plant(r, run_noise_filter(r))
        Lambda = rng.standard_normal((r.n, r.n_s))
        K_Z = rng.uniform(0.2, 1.5, size=r.n)
        mu = float(rng.uniform(0.05, 0.8))

        def lagrangian(lam, kz):
            v, p, _, _ = _plant_value_grad(plant, lam, kz, mu)
            return v - mu * p

        _, _, g_lam, g_kz = _plant_value_grad(plant, Lambda, K_Z, mu)
        for idx in np.ndindex(Lambda.shape):
            bump = np.zeros_like(Lambda)
            bump[idx] = h
            fd = (lagrangian(Lambda + bump, K_Z) - lagrangian(Lambda - bump, K_Z)) / (2 * h)
            assert g_lam[idx] == pytest.approx(fd, rel=1e-4, abs=1e-7)
        for t in range(r.n):
            bump = np.zeros_like(K_Z)
            bump[t] = h
            fd = (lagrangian(Lambda, K_Z + bump) - lagrangian(Lambda, K_Z - bump)) / (2 * h)
            assert g_kz[t] == pytest.approx(fd, rel=1e-4, abs=1e-7)


def test_trace_csv_layout(tmp_path):
    rng = np.random.default_rng(27)
    r = random_realization(rng, n=3)
    out = run_output_filter(r, random_strategy(rng, r))
    path = tmp_path / "out.csv"
    out.to_csv(str(path))
    lines = path.read_text().strip().split("\n")
    assert len(lines) == 1 + r.n
    assert lines[0].split(",")[-2:] == ["K_I", "power"]
