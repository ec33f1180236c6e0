"""Checks of the closed-form reference distributions against independent
numerical integration (quadrature oracles live here, not in the package)."""

import math

import numpy as np
import pytest
from scipy import integrate

from hsgas import stats


def test_speed_pdf_normalizes():
    for T in (0.5, 1.0, 3.0):
        total, err = integrate.quad(lambda s: stats.maxwell_speed_pdf(s, T),
                                    0, 40 * math.sqrt(T))
        assert total == pytest.approx(1.0, abs=1e-10)


def test_speed_cdf_matches_quadrature():
    T = 1.3
    for s in (0.1, 0.7, 1.5, 2.9, 4.0):
        ref, _ = integrate.quad(lambda x: stats.maxwell_speed_pdf(x, T), 0, s)
        assert stats.maxwell_speed_cdf(s, T) == pytest.approx(ref, abs=1e-12)


def test_speed_moments_match_theory():
    T = 0.8
    mean, _ = integrate.quad(lambda s: s * stats.maxwell_speed_pdf(s, T), 0, 50)
    msq, _ = integrate.quad(lambda s: s * s * stats.maxwell_speed_pdf(s, T), 0, 50)
    assert mean == pytest.approx(math.sqrt(8.0 * T / math.pi), rel=1e-10)
    assert msq == pytest.approx(3.0 * T, rel=1e-10)


def test_velocity_pdf_consistent_with_speed_pdf():
    """4 pi s^2 times the velocity density must equal the speed density."""
    T = 1.7
    for s in (0.3, 1.1, 2.2):
        v = np.array([s, 0.0, 0.0])
        lhs = 4.0 * math.pi * s * s * stats.maxwell_velocity_pdf(v, T)
        assert float(lhs) == pytest.approx(stats.maxwell_speed_pdf(s, T), rel=1e-12)


def test_quantile_inverts_cdf():
    T = 2.0
    for p in (0.01, 0.25, 0.5, 0.9, 0.999):
        s = stats.maxwell_speed_quantile(p, T)
        assert stats.maxwell_speed_cdf(s, T) == pytest.approx(p, abs=1e-10)


def test_equal_mass_edges_carry_equal_mass():
    T, k = 1.0, 8
    s_max = 4.5
    edges = stats.equal_mass_speed_edges(k, T, s_max)
    assert edges[0] == 0.0
    assert edges[-1] == s_max
    masses = np.diff([stats.maxwell_speed_cdf(e, T) for e in edges])
    assert np.allclose(masses, masses[0], rtol=1e-8)
    assert np.all(np.diff(edges) > 0)


def test_mean_relative_speed_against_double_quadrature():
    """Average of |v - w| over Maxwellian w, for a fixed speed |v| = u.

    The oracle integrates over the partner speed and the angle between the
    two velocities; the closed form must agree."""
    T = 1.0

    def oracle(u):
        def inner(w):
            f = lambda mu: math.sqrt(max(u * u + w * w - 2 * u * w * mu, 0.0))
            avg, _ = integrate.quad(f, -1, 1)
            return 0.5 * avg * stats.maxwell_speed_pdf(w, T)
        val, _ = integrate.quad(inner, 0, 30, limit=200)
        return val

    for u in (0.05, 0.4, 1.0, 2.3, 3.5):
        assert stats.mean_relative_speed(u, T) == pytest.approx(oracle(u), rel=1e-7)


def test_mean_relative_speed_zero_limit():
    T = 0.7
    expect = math.sqrt(8.0 * T / math.pi)
    assert stats.mean_relative_speed(0.0, T) == pytest.approx(expect, rel=1e-12)
    assert stats.mean_relative_speed(1e-15, T) == pytest.approx(expect, rel=1e-9)


def test_binned_mean_relative_speed_is_density_weighted_average():
    T = 1.0
    edges = np.array([0.0, 0.8, 1.6, 4.5])
    out = stats.binned_mean_relative_speed(edges, T)

    for b in range(3):
        lo, hi = edges[b], edges[b + 1]
        num, _ = integrate.quad(
            lambda u: stats.mean_relative_speed(u, T) * stats.maxwell_speed_pdf(u, T),
            lo, hi)
        den, _ = integrate.quad(lambda u: stats.maxwell_speed_pdf(u, T), lo, hi)
        assert out[b] == pytest.approx(num / den, rel=1e-8)


def test_replica_mean_sem():
    tables = [np.array([1.0, 2.0]), np.array([3.0, 2.0]), np.array([2.0, 2.0])]
    mean, sem = stats.replica_mean_sem(tables)
    assert np.allclose(mean, [2.0, 2.0])
    assert sem[0] == pytest.approx(np.std([1, 3, 2], ddof=1) / math.sqrt(3))
    assert sem[1] == 0.0
    _, sem1 = stats.replica_mean_sem([np.array([5.0])])
    assert np.isinf(sem1).all()


def test_bootstrap_sigma_tracks_standard_error():
    rng = np.random.default_rng(11)
    tables = [{"x": rng.normal(size=1)} for _ in range(400)]

    def statistic(ts):
        return np.array([np.mean([t["x"] for t in ts])])

    value, sigma = stats.bootstrap_over_replicas(tables, statistic, 400,
                                                 np.random.default_rng(0))
    direct = np.std([t["x"] for t in tables], ddof=1) / math.sqrt(400)
    assert sigma[0] == pytest.approx(direct, rel=0.2)
    assert value[0] == pytest.approx(statistic(tables)[0], abs=1e-12)


def test_bootstrap_is_deterministic_under_seed():
    tables = [{"x": np.array([float(i)])} for i in range(20)]
    stat = lambda ts: np.array([sum(float(t["x"][0]) for t in ts)])
    a = stats.bootstrap_over_replicas(tables, stat, 50, np.random.default_rng(7))
    b = stats.bootstrap_over_replicas(tables, stat, 50, np.random.default_rng(7))
    assert a[0] == b[0] and a[1] == b[1]


def _ball_overlap_mc(r, R, offset, n=400_000, seed=5):
    """Monte Carlo volume of ball(r, center z=offset) intersect ball(R, origin)."""
    rng = np.random.default_rng(seed)
    pts = rng.uniform(-r, r, size=(n, 3))
    inside_small = np.einsum("ij,ij->i", pts, pts) <= r * r
    pts[:, 2] += offset
    inside_big = np.einsum("ij,ij->i", pts, pts) <= R * R
    frac = np.mean(inside_small & inside_big)
    return (2 * r) ** 3 * frac


def test_sphere_intersection_special_cases():
    v = stats.sphere_intersection_volume
    assert v(0.2, 1.0, 0.0) == pytest.approx(4 * math.pi / 3 * 0.2**3, rel=1e-14)
    assert v(0.2, 1.0, 0.5) == pytest.approx(4 * math.pi / 3 * 0.2**3, rel=1e-14)
    assert v(2.0, 1.0, 0.0) == pytest.approx(4 * math.pi / 3, rel=1e-14)  # engulfed
    assert v(0.3, 1.0, 5.0) == 0.0  # disjoint


def test_sphere_intersection_lens_against_monte_carlo():
    cases = [(0.5, 1.0, 0.8), (0.7, 1.0, 1.1), (1.0, 1.0, 0.4)]
    for r, R, off in cases:
        exact = stats.sphere_intersection_volume(r, R, off)
        mc = _ball_overlap_mc(r, R, off)
        assert exact == pytest.approx(mc, rel=0.02)
