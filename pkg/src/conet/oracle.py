"""Brute-force reference for the empirical VB factorization.

Evaluates the empirical VB free energy of a candidate ``(rank, noise
variance)`` pair directly and minimizes it over a dense grid.  Kept apart
from :mod:`conet.lowrank` so tests can check one against the other.
"""
from __future__ import annotations

import math

import numpy as np

from .errors import InputError


def _component_gain(x, alpha):
    # per-component free-energy change when the component is kept, with the
    # prior variance product at its optimum; None when no VB solution exists
    if x <= (1.0 + math.sqrt(alpha)) ** 2:
        return None
    # tau is the larger root of  t^2 - (x - 1 - alpha) t + alpha = 0
    roots = np.roots([1.0, -(x - 1.0 - alpha), alpha])
    tau = float(np.max(roots.real))
    return math.log(tau + 1.0) + alpha * math.log(tau / alpha + 1.0) - tau


def vb_free_energy_oracle(spectrum, shape, candidate_rank: int,
                          candidate_noise_variance: float) -> float:
    """Free energy of keeping the top ``candidate_rank`` components at noise ``sigma^2``.

    Returns ``inf`` when a kept component is too small to admit a VB solution.
    """
    s = np.asarray(getattr(spectrum, "values", spectrum), dtype=np.float64)
    rows, cols = shape
    L, M = min(rows, cols), max(rows, cols)
    if not 0 <= candidate_rank <= L:
        raise InputError(f"candidate rank {candidate_rank} outside [0, {L}]")
    sigma2 = float(candidate_noise_variance)
    if not sigma2 > 0:
        raise InputError("candidate noise variance must be positive")
    alpha = L / M
    energy = L * M * math.log(2.0 * math.pi * sigma2) + float(np.sum(s**2)) / sigma2
    for h in range(candidate_rank):
        gain = _component_gain(s[h] ** 2 / (M * sigma2), alpha)
        if gain is None:
            return math.inf
        energy += M * gain
    return 0.5 * energy


def free_energy_table(spectrum, shape, noise_grid):
    """Free energy for every (noise variance, rank) pair; shape ``(len(grid), L + 1)``."""
    s = np.asarray(getattr(spectrum, "values", spectrum), dtype=np.float64)
    rows, cols = shape
    L, M = min(rows, cols), max(rows, cols)
    alpha = L / M
    sigma2 = np.asarray(noise_grid, dtype=np.float64)[:, None]
    x = s[None, :L] ** 2 / (M * sigma2)
    b = x - 1.0 - alpha
    with np.errstate(invalid="ignore", divide="ignore"):
        tau = 0.5 * (b + np.sqrt(b * b - 4.0 * alpha))
        gain = np.log(tau + 1.0) + alpha * np.log(tau / alpha + 1.0) - tau
    gain = np.where(x > (1.0 + math.sqrt(alpha)) ** 2, gain, np.inf)
    base = L * M * np.log(2.0 * math.pi * sigma2[:, 0]) + float(np.sum(s**2)) / sigma2[:, 0]
    table = np.empty((sigma2.shape[0], L + 1))
    table[:, 0] = base
    table[:, 1:] = base[:, None] + M * np.cumsum(gain, axis=1)
    return 0.5 * table


def grid_argmin(spectrum, shape, n_grid: int = 20000, decades: float = 12.0):
    """Exhaustive search over rank x log-spaced noise variance.

    Returns ``(rank, sigma2, free_energy)`` of the best grid point.
    """
    s = np.asarray(getattr(spectrum, "values", spectrum), dtype=np.float64)
    rows, cols = shape
    L, M = min(rows, cols), max(rows, cols)
    top = float(np.sum(s**2)) / (L * M)
    if top == 0:
        return 0, 0.0, -math.inf
    grid = top * np.logspace(-decades, 0.0, n_grid)
    table = free_energy_table(s, shape, grid)
    i, r = np.unravel_index(np.argmin(table), table.shape)
    return int(r), float(grid[i]), float(table[i, r])
