import json

import numpy as np
import pytest

from feedcap.model import (
    ModelFormatError,
    PoSsRealization,
    assemble_noise_covariance,
    build_arma11,
    build_two_driver,
    build_white_noise,
    is_time_invariant,
    load_model,
    noise_mean,
    save_model,
    validate_realization,
    with_horizon,
)

from gen import random_realization
from bruteforce import unroll_noise


def test_time_invariant_builder_shapes():
    r = PoSsRealization.time_invariant(
        n=5, A=[[0.3, 0.1], [0.0, 0.5]], B=[[1.0], [0.2]], C=[[1.0, 0.0]],
        N=[[0.7]], K_W=[[2.0]],
    )
    assert (r.n, r.n_s, r.n_w) == (5, 2, 1)
    assert r.A.shape == (4, 2, 2) and r.B.shape == (4, 2, 1)
    assert r.C.shape == (5, 1, 2) and r.N.shape == (5, 1, 1) and r.K_W.shape == (5, 1, 1)
    assert r.mu_S1.shape == (2,) and r.K_S1.shape == (2, 2)
    assert is_time_invariant(r)
    assert r.meta == {}


def test_horizon_one_has_empty_transitions():
    r = PoSsRealization.time_invariant(n=1, A=[[0.5]], B=[[1.0]], C=[[1.0]], N=[[1.0]], K_W=[[1.0]])
    assert r.A.shape == (0, 1, 1) and r.B.shape == (0, 1, 1)
    assert validate_realization(r).ok


def test_shape_errors_name_the_field():
    good = dict(
        n=3,
        A=np.zeros((2, 1, 1)), B=np.zeros((2, 1, 1)),
        C=np.ones((3, 1, 1)), N=np.ones((3, 1, 1)), K_W=np.ones((3, 1, 1)),
        mu_S1=np.zeros(1), K_S1=np.zeros((1, 1)),
    )
    PoSsRealization(**good)
    with pytest.raises(ValueError, match="C"):
        PoSsRealization(**{**good, "C": np.ones((3, 2, 1))})
    with pytest.raises(ValueError, match="A"):
        PoSsRealization(**{**good, "A": np.zeros((3, 1, 1))})
    with pytest.raises(ValueError, match="K_S1"):
        PoSsRealization(**{**good, "K_S1": np.zeros((2, 2))})
    with pytest.raises(ValueError, match="n"):
        PoSsRealization(**{**good, "n": 0})


def test_fields_are_read_only():
    r = build_white_noise(1.0, 3)
    with pytest.raises(ValueError):
        r.K_W[0, 0, 0] = 5.0


def test_validate_flags_each_violation_kind():
    rng = np.random.default_rng(0)
    r = random_realization(rng, n=4)
    assert validate_realization(r).ok

    bad_a = np.array(r.A)
    bad_a[0, 0, 0] = np.nan
    nonfinite = PoSsRealization(n=r.n, A=bad_a, B=r.B, C=r.C, N=r.N, K_W=r.K_W,
                                mu_S1=r.mu_S1, K_S1=r.K_S1)
    rep = validate_realization(nonfinite)
    assert not rep.ok and any("A contains non-finite" in v for v in rep.violations)

    asym = np.array(r.K_S1)
    if asym.shape[0] == 1:
        asym = np.array([[1.0, 0.5], [0.0, 1.0]])
        r2 = random_realization(rng, n=3, n_s_max=2)
        while r2.n_s != 2:
            r2 = random_realization(rng, n=3, n_s_max=2)
        rep = validate_realization(PoSsRealization(
            n=r2.n, A=r2.A, B=r2.B, C=r2.C, N=r2.N, K_W=r2.K_W, mu_S1=r2.mu_S1, K_S1=asym))
    else:
        asym[0, 1] += 1.0
        rep = validate_realization(PoSsRealization(
            n=r.n, A=r.A, B=r.B, C=r.C, N=r.N, K_W=r.K_W, mu_S1=r.mu_S1, K_S1=asym))
    assert not rep.ok and any("not symmetric" in v for v in rep.violations)

    # N = 0 kills the feedthrough variance R_t
    degenerate = PoSsRealization(n=r.n, A=r.A, B=r.B, C=r.C, N=np.zeros_like(r.N),
                                 K_W=r.K_W, mu_S1=r.mu_S1, K_S1=r.K_S1)
    rep = validate_realization(degenerate)
    assert not rep.ok and any("R_t" in v for v in rep.violations)


def test_noise_covariance_matches_unrolled_primitives():
    rng = np.random.default_rng(1)
    for _ in range(40):
        r = random_realization(rng, n_max=6)
        K_V = assemble_noise_covariance(r)
        ref = unroll_noise(r).K_V
        assert np.abs(K_V - ref).max() < 1e-10
        assert np.abs(K_V - K_V.T).max() == 0.0


def test_noise_mean_matches_unrolled_primitives():
    rng = np.random.default_rng(2)
    for _ in range(20):
        r = random_realization(rng, n_max=6)
        assert np.abs(noise_mean(r) - unroll_noise(r).V_mean).max() < 1e-12


def test_arma11_covariance_is_stationary_toeplitz():
    # V_t = c V_{t-1} + W_t - a W_{t-1}: standard ARMA(1,1) autocovariances
    c, a, sw, n = 0.6, 0.25, 1.3, 8
    r = build_arma11(c, a, sw, n)
    K_V = assemble_noise_covariance(r)
    s2 = sw**2
    g0 = s2 * (1 + a**2 - 2 * c * a) / (1 - c**2)
    g1 = s2 * (1 - c * a) * (c - a) / (1 - c**2)
    gamma = [g0, g1]
    for _ in range(n - 2):
        gamma.append(c * gamma[-1])
    for i in range(n):
        for j in range(n):
            assert K_V[i, j] == pytest.approx(gamma[abs(i - j)], abs=1e-10)
    assert r.meta["family"] == "arma11"


def test_arma11_unstable_pole_is_flagged():
    r = build_arma11(1.2, 0.3, 1.0, 4)
    assert r.meta.get("unstable_ar") is True
    assert np.all(r.K_S1 == 0.0)
    with pytest.raises(ValueError):
        build_arma11(0.5, 0.1, 0.0, 4)


def test_white_noise_covariance_is_diagonal():
    r = build_white_noise(1.7, 6)
    assert np.array_equal(assemble_noise_covariance(r), 1.7**2 * np.eye(6))


def test_two_driver_builder_blocks():
    base = PoSsRealization.time_invariant(
        n=5, A=[[0.5]], B=[[1.0]], C=[[1.0]], N=[[1.0]], K_W=[[1.0]])
    r = build_two_driver(base, B1=[[1.0]], B2=[[0.0]], N1=[[0.0]], N2=[[1.0]])
    assert r.n_w == 2 and r.n_s == 1
    assert np.array_equal(r.B[0], [[1.0, 0.0]])
    assert np.array_equal(r.N[0, 0], [0.0, 1.0])
    assert np.array_equal(r.K_W[0], np.eye(2))
    assert r.meta["family"] == "two_driver"
    assert validate_realization(r).ok
    with pytest.raises(ValueError):
        build_two_driver(base, B1=[[1.0, 0.0]], B2=[[0.0]], N1=[[0.0]], N2=[[1.0]])


def test_save_load_round_trip_time_varying(tmp_path):
    rng = np.random.default_rng(3)
    r = random_realization(rng, n=4, time_varying=True)
    path = str(tmp_path / "model.json")
    save_model(r, path)
    r2 = load_model(path)
    for name in ("A", "B", "C", "N", "K_W", "mu_S1", "K_S1"):
        assert np.array_equal(getattr(r, name), getattr(r2, name)), name


def test_save_load_round_trip_time_invariant_shorthand(tmp_path):
    r = build_arma11(0.5, 0.1, 1.0, 6)
    path = str(tmp_path / "model.json")
    save_model(r, path)
    obj = json.loads(open(path).read())
    assert obj["time_invariant"] is True and np.array(obj["A"]).shape == (1, 1)
    r2 = load_model(path)
    assert r2.n == 6 and is_time_invariant(r2)
    assert np.array_equal(r.A, r2.A) and np.array_equal(r.K_S1, r2.K_S1)
    assert r2.meta["family"] == "arma11"


def test_load_errors_name_the_problem(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text("{not json")
    with pytest.raises(ModelFormatError, match="not valid JSON"):
        load_model(str(p))

    p.write_text(json.dumps({"n": 2}))
    with pytest.raises(ModelFormatError, match="missing required field 'A'"):
        load_model(str(p))

    ok = {"n": 2, "time_invariant": True, "A": [[0.5]], "B": [[1.0]], "C": [[1.0]],
          "N": [[1.0]], "K_W": [[1.0]], "mu_S1": [0.0], "K_S1": [[0.0]]}
    p.write_text(json.dumps({**ok, "K_W": [["x"]]}))
    with pytest.raises(ModelFormatError, match="'K_W'"):
        load_model(str(p))

    p.write_text(json.dumps({**ok, "meta": 7}))
    with pytest.raises(ModelFormatError, match="'meta'"):
        load_model(str(p))

    p.write_text(json.dumps([1, 2]))
    with pytest.raises(ModelFormatError, match="top level"):
        load_model(str(p))

    p.write_text(json.dumps({**ok, "n_s": 3}))
    with pytest.raises(ModelFormatError, match="'n_s'.*contradicts"):
        load_model(str(p))


def test_save_model_emits_dimension_fields(tmp_path):
    r = build_arma11(0.5, 0.1, 1.0, 4)
    path = str(tmp_path / "model.json")
    save_model(r, path)
    obj = json.loads(open(path).read())
    assert obj["n_s"] == 1 and obj["n_w"] == 1
    assert load_model(path).n == 4


def test_save_load_round_trip_horizon_one(tmp_path):
    # n=1 stacks serialize as "[]"; the loader must restore their shape
    r = PoSsRealization.time_invariant(n=1, A=[[0.0]], B=[[0.0]], C=[[1.0, 0.5]],
                                       N=[[1.0]], K_W=[[2.0]], K_S1=np.eye(2))
    path = str(tmp_path / "model.json")
    save_model(r, path)
    r2 = load_model(path)
    assert r2.n == 1 and r2.n_s == 2 and r2.n_w == 1
    assert np.array_equal(r2.K_S1, np.eye(2)) and r2.K_W[0, 0, 0] == 2.0


def test_with_horizon_rebuilds_time_invariant():
    r = build_arma11(0.5, 0.1, 1.0, 6)
    short = with_horizon(r, 3)
    long = with_horizon(r, 9)
    assert short.n == 3 and long.n == 9
    assert np.array_equal(short.A[0], r.A[0]) and np.array_equal(long.K_W[0], r.K_W[0])

    rng = np.random.default_rng(4)
    tv = random_realization(rng, n=4, time_varying=True)
    while is_time_invariant(tv):
        tv = random_realization(rng, n=4, time_varying=True)
    with pytest.raises(ValueError, match="time-invariant"):
        with_horizon(tv, 6)

    one = PoSsRealization.time_invariant(n=1, A=[[0.0]], B=[[0.0]], C=[[1.0]],
                                         N=[[1.0]], K_W=[[1.0]])
    with pytest.raises(ValueError, match="extend"):
        with_horizon(one, 4)
