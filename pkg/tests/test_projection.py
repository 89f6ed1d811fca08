import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from oracles import chi2_quantile_by_bisection
from xsilo.projection import (
    ClipViolation,
    DimensionError,
    ProjectionSpec,
    generate_projection,
    project_and_sum,
    reconstruct,
    sensitivity_holds,
    solve_sensitivity,
)


def test_documented_sensitivities():
    assert solve_sensitivity(3, 0.0, 0.1) == 0.0
    oracle = math.sqrt(chi2_quantile_by_bisection(0.95, 1))
    assert oracle == pytest.approx(1.95996, abs=1e-4)
    assert solve_sensitivity(1, 1.0, 0.05) == pytest.approx(oracle, abs=1e-9)
    k = 10**6
    approx = 1 + stats.norm.ppf(0.99) * math.sqrt(2 / k) / 2
    got = solve_sensitivity(k, 1.0, 0.01)
    assert got == pytest.approx(approx, abs=5e-5)
    assert got == pytest.approx(1.0016, abs=1e-4)


@pytest.mark.parametrize("k,dp", [(2, 0.1), (5, 1e-3), (20, 1e-6), (100, 0.05)])
def test_solver_matches_quadrature(k, dp):
    got = solve_sensitivity(k, 1.0, dp)
    assert got**2 * k == pytest.approx(chi2_quantile_by_bisection(1 - dp, k), rel=1e-8)


@given(st.integers(1, 5000), st.floats(0.01, 100), st.floats(1e-9, 0.5))
def test_solver_is_minimal_and_valid(k, C, dp):
    c = solve_sensitivity(k, C, dp)
    assert sensitivity_holds(k, C, c, dp)
    assert not sensitivity_holds(k, C, c * (1 - 1e-9), dp)
    assert c == pytest.approx(C * math.sqrt(stats.chi2.ppf(1 - dp, k) / k), rel=1e-9)


def test_solver_tends_to_clip_norm():
    vals = [solve_sensitivity(k, 1.0, 1e-3) for k in (10, 100, 10**4, 10**6)]
    assert vals == sorted(vals, reverse=True)
    assert vals[-1] - 1 < 0.01


def test_spec_validation():
    with pytest.raises(DimensionError):
        ProjectionSpec(5, 6, b"s", 1.0)
    with pytest.raises(DimensionError):
        ProjectionSpec(5, 0, b"s", 1.0)
    with pytest.raises(ValueError):
        ProjectionSpec(5, 2, b"s", 0.0)
    with pytest.raises(ValueError):
        ProjectionSpec(5, 2, b"s", 1.0, proj_sensitivity=0.1)
    s = ProjectionSpec(50, 10, b"s", 2.0, 1e-3)
    assert s.to_dict() == {"d": 50, "k": 10, "C": 2.0, "C_tilde": s.proj_sensitivity, "delta_prime": 1e-3}


def test_matrix_determinism_and_moments():
    spec = ProjectionSpec(2000, 500, b"shared", 1.0)
    a = generate_projection(spec, 3)
    b = np.array(generate_projection(ProjectionSpec(2000, 500, b"shared", 1.0), 3))
    assert np.array_equal(a, b)
    assert not np.array_equal(a, generate_projection(spec, 4))
    assert a.shape == (2000, 500) and not a.flags.writeable
    assert abs(a.var() * 500 - 1) < 0.05
    assert abs(a.mean()) < 5 / math.sqrt(a.size) / math.sqrt(500)


def test_expected_projection_is_identity():
    d, k, trials = 6, 3, 10_000
    spec = ProjectionSpec(d, k, b"mean", 1.0)
    u = np.linspace(-1, 1, d)
    samples = np.stack([generate_projection(spec, t) @ (generate_projection(spec, t).T @ u) for t in range(trials)])
    se = samples.std(axis=0) / math.sqrt(trials)
    assert np.all(np.abs(samples.mean(axis=0) - u) < 3 * se)


def test_project_and_sum_contracts(rng):
    d, k = 30, 8
    P = generate_projection(ProjectionSpec(d, k, b"p", 1.0))
    assert not project_and_sum(np.zeros((4, d)), P).any()
    assert project_and_sum(np.zeros((0, d)), P).shape == (k,)
    Z = rng.normal(size=(5, d))
    Z /= np.maximum(1, np.linalg.norm(Z, axis=1, keepdims=True))
    whole = project_and_sum(Z, P, clip_norm=1.0)
    parts = project_and_sum(Z[:2], P) + project_and_sum(Z[2:], P)
    assert np.allclose(whole, parts, rtol=1e-9, atol=1e-12)
    assert np.allclose(whole, P.T @ Z.sum(axis=0))
    assert np.allclose(project_and_sum(Z, np.eye(d)), Z.sum(axis=0))
    with pytest.raises(ClipViolation):
        project_and_sum(Z * 3, P, clip_norm=1.0)
    with pytest.raises(DimensionError):
        project_and_sum(np.ones((1, d + 1)), P)


def test_reconstruct_contracts():
    P = generate_projection(ProjectionSpec(10, 4, b"r", 1.0))
    assert not reconstruct(np.zeros(4), P).any()
    with pytest.raises(DimensionError):
        reconstruct(np.zeros(5), P)


def test_reconstruction_error_near_sqrt_d_over_k():
    d, k = 10_000, 400
    spec = ProjectionSpec(d, k, b"recon", 1.0)
    u = np.zeros(d)
    u[:100] = 0.1
    errs = []
    for t in range(6):
        P = generate_projection(spec, t)
        errs.append(np.linalg.norm(reconstruct(P.T @ u, P) - u))
    assert abs(np.mean(errs) / math.sqrt(d / k) - 1) < 0.2


def test_inner_product_concentrates_with_k():
    d = 64
    u = np.ones(d) / math.sqrt(d)
    q95 = []
    for k in (8, 16, 32, 64):
        spec = ProjectionSpec(d, k, b"jl", 1.0)
        devs = [abs(np.sum((generate_projection(spec, t).T @ u) ** 2) - 1) for t in range(1000)]
        q95.append(np.quantile(devs, 0.95))
    assert q95 == sorted(q95, reverse=True)


def test_projected_norm_law_small():
    d, k, C, dp = 12, 3, 1.5, 0.05
    spec = ProjectionSpec(d, k, b"law", C, dp)
    a = np.full(d, C / math.sqrt(d))
    sq = np.array([np.sum((generate_projection(spec, t).T @ a) ** 2) for t in range(5000)])
    assert stats.kstest(sq, stats.gamma(k / 2, scale=2 * C**2 / k).cdf).pvalue > 0.01
    rate = np.mean(np.sqrt(sq) <= spec.proj_sensitivity)
    assert rate >= 1 - dp - 3 * math.sqrt(dp * (1 - dp) / len(sq))
