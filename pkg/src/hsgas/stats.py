"""Small statistical helpers shared by the estimator and sweep layers."""

from __future__ import annotations

import math

import numpy as np
from scipy import integrate, optimize, special


def maxwell_speed_pdf(s, T: float):
    """Speed density of a Maxwellian with per-component variance T."""
    s = np.asarray(s, dtype=float)
    return 4.0 * math.pi * s**2 * (2.0 * math.pi * T) ** -1.5 * np.exp(-(s**2) / (2.0 * T))


def maxwell_speed_cdf(s, T: float):
    s = np.asarray(s, dtype=float)
    z = s / math.sqrt(2.0 * T)
    return special.erf(z) - np.sqrt(2.0 / math.pi) * (s / math.sqrt(T)) * np.exp(-(s**2) / (2.0 * T))


def maxwell_velocity_pdf(v: np.ndarray, T: float) -> np.ndarray:
    """Density per d^3v at velocity rows v (shape (..., 3))."""
    v = np.asarray(v, dtype=float)
    v2 = np.einsum("...i,...i->...", v, v)
    return (2.0 * math.pi * T) ** -1.5 * np.exp(-v2 / (2.0 * T))


def maxwell_speed_quantile(p: float, T: float) -> float:
    hi = 10.0 * math.sqrt(T)
    return float(optimize.brentq(lambda s: maxwell_speed_cdf(s, T) - p, 0.0, hi, xtol=1e-12))


def equal_mass_speed_edges(k: int, T: float, s_max: float) -> np.ndarray:
    """k speed bins with equal Maxwellian mass below s_max (last edge = s_max)."""
    top = float(maxwell_speed_cdf(s_max, T))
    edges = [0.0]
    for i in range(1, k):
        edges.append(maxwell_speed_quantile(top * i / k, T))
    edges.append(s_max)
    return np.array(edges)


def mean_relative_speed(u, T: float):
    """<|u e - w|> for w Maxwellian with per-component variance T.

    Closed form sqrt(2T/pi) exp(-u^2/2T) + (u + T/u) erf(u/sqrt(2T)); the u->0
    limit is the Maxwellian mean speed sqrt(8T/pi).
    """
    u = np.asarray(u, dtype=float)
    out = np.full(u.shape, math.sqrt(8.0 * T / math.pi))
    nz = u > 1e-12 * math.sqrt(T)
    un = u[nz]
    out[nz] = np.sqrt(2.0 * T / math.pi) * np.exp(-(un**2) / (2.0 * T)) + (
        un + T / un
    ) * special.erf(un / math.sqrt(2.0 * T))
    return out


def binned_mean_relative_speed(edges: np.ndarray, T: float) -> np.ndarray:
    """Maxwell-weighted average of mean_relative_speed over each speed bin."""
    out = np.empty(len(edges) - 1)
    for k in range(len(out)):
        lo, hi = edges[k], edges[k + 1]
        num, _ = integrate.quad(
            lambda s: float(mean_relative_speed(s, T) * maxwell_speed_pdf(s, T)), lo, hi
        )
        den, _ = integrate.quad(lambda s: float(maxwell_speed_pdf(s, T)), lo, hi)
        out[k] = num / den if den > 0 else float(mean_relative_speed(0.5 * (lo + hi), T))
    return out


def replica_mean_sem(values: list | np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Mean and standard error over the replica axis (axis 0)."""
    arr = np.asarray(values, dtype=float)
    m = arr.shape[0]
    mean = arr.mean(axis=0)
    if m < 2:
        return mean, np.full_like(mean, np.inf, dtype=float)
    sem = arr.std(axis=0, ddof=1) / math.sqrt(m)
    return mean, sem


def bootstrap_over_replicas(tables: list, statistic, n_boot: int, rng: np.random.Generator):
    """Estimate the sampling sigma of `statistic(list_of_tables)` by resampling
    replicas with replacement.  Returns (point_value, sigma_array_or_scalar)."""
    point = statistic(tables)
    m = len(tables)
    draws = []
    for _ in range(n_boot):
        idx = rng.integers(0, m, size=m)
        draws.append(statistic([tables[i] for i in idx]))
    draws = np.asarray(draws, dtype=float)
    return point, draws.std(axis=0, ddof=1)


def sphere_intersection_volume(r: float, R: float, offset: float) -> float:
    """Volume of a sphere of radius r centered `offset` from the center of a
    sphere of radius R, clipped to the larger sphere (lens formula)."""
    if offset + r <= R:
        return 4.0 * math.pi * r**3 / 3.0
    if offset + R <= r:
        return 4.0 * math.pi * R**3 / 3.0
    if offset >= r + R:
        return 0.0
    # standard two-sphere intersection volume
    term = (R + r - offset) ** 2 * (
        offset**2 + 2.0 * offset * r - 3.0 * r**2 + 2.0 * offset * R + 6.0 * r * R - 3.0 * R**2
    )
    return math.pi * term / (12.0 * offset)
