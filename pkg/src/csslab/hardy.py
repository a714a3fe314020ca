"""Numerical verification of weighted and logarithmic Hardy-type inequalities.

Every reported "constant" here is a ratio over a declared test family; the
suite certifies refinement stability of these ratios, not sharp constants.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError
from .grid import (EquivariantField, RadialGrid, derivative_samples, integrate,
                   sobolev_norm, seminorm_weighted, adapted_norm)
from .linops import LinOpContext


@dataclass
class HardyReport:
    ell: float
    k: float
    ratio: float
    family: str
    interval: tuple


def _interval_quadrature(grid, samples, r1, r2):
    """L^2-type integral int_{r1}^{r2} samples r dr on the grid nodes."""
    mask = (grid.nodes >= r1) & (grid.nodes <= r2)
    return float(np.sum(grid.weights[mask] * samples[mask]) / (2.0 * np.pi))


def _boundary_value(grid, values, r):
    return complex(np.interp(r, grid.nodes, values.real)
                   + 1j * np.interp(r, grid.nodes, values.imag))


def weighted_hardy_ratio(ell, k, f: EquivariantField, r1, r2):
    """LHS/RHS quotient of the weighted Hardy inequality for d_r - ell/r.

    Noncritical case (ell != k):
        int |f/r^{k+1}|^2 r dr <~ int |(d_r - ell/r) f / r^k|^2 r dr + boundary,
    with the boundary value at r2 when ell > k and at r1 when ell < k.
    Critical case (ell == k) carries <log r> weights on both sides and the
    boundary anchor at r = 1 (or the nearer endpoint when 1 is outside).
    """
    if not (0 < r1 < r2 <= f.grid.r_max):
        raise DomainError("degenerate or out-of-range interval")
    grid = f.grid
    r = grid.nodes
    df = derivative_samples(grid, f.values, 1)
    op = df - ell * f.values / r
    if ell != k:
        lhs = _interval_quadrature(grid, np.abs(f.values / r ** (k + 1)) ** 2,
                                   r1, r2)
        rhs = _interval_quadrature(grid, np.abs(op / r ** k) ** 2, r1, r2)
        if ell > k:
            bnd = abs(r2 ** (-k) * _boundary_value(grid, f.values, r2)) ** 2
        else:
            bnd = abs(r1 ** (-k) * _boundary_value(grid, f.values, r1)) ** 2
    else:
        logw = np.sqrt(1.0 + np.log(r) ** 2)
        lhs = _interval_quadrature(
            grid, np.abs(f.values / (r ** (k + 1) * logw)) ** 2, r1, r2)
        rhs = _interval_quadrature(
            grid, np.abs(op / (r ** k * logw)) ** 2, r1, r2)
        if r1 <= 1.0 <= r2:
            bnd = abs(_boundary_value(grid, f.values, 1.0)) ** 2
        elif r2 <= 1.0:
            bnd = abs(r2 ** (-k) * _boundary_value(grid, f.values, r2)) ** 2
        else:
            bnd = abs(r1 ** (-k) * _boundary_value(grid, f.values, r1)) ** 2
    denom = rhs + bnd
    if denom == 0.0:
        return 0.0
    return float(lhs / denom)


def gen_hardy_ratio(k, f: EquivariantField):
    """|| |f|_{-k} ||_{L^2} / ||f||_{H-dot^k_m}; requires 0 <= k <= m."""
    if not 0 <= k <= f.m:
        raise DomainError("generalized Hardy needs 0 <= k <= m")
    _, num = seminorm_weighted(f, k, sign=-1)
    den = sobolev_norm(f, k)
    if den == 0.0:
        return 0.0
    return float(num / den)


def subcoercivity_ratio_L(ctx: LinOpContext, v: EquivariantField):
    """(||L v|| + ||Q v||) / ||v||_{H-dot^1_m} at the static vortex."""
    if v.m != ctx.m:
        raise DomainError("field index does not match the context")
    den = sobolev_norm(v, 1)
    if den == 0.0:
        raise DomainError("zero field has no subcoercivity ratio")
    lv = np.sqrt(integrate(ctx.grid, np.abs(ctx.l_q(v.values)) ** 2))
    qv = np.sqrt(integrate(ctx.grid, np.abs(ctx.tables.q * v.values) ** 2))
    return float((lv + qv) / den)


def norm_comparison(level, f: EquivariantField):
    """Adapted-vs-plain Sobolev comparison at levels 3 and 5.

    For m >= 3 the two norms are equivalent and the ratio is reported; for
    small m the extra tail/unit-scale terms are reported separately.
    """
    if level not in (3, 5):
        raise DomainError("comparison defined at levels 3 and 5")
    grid, m, r = f.grid, f.m, f.grid.nodes
    out = {
        "adapted": adapted_norm(f, level),
        "plain": sobolev_norm(f, level),
    }
    out["ratio"] = out["adapted"] / out["plain"] if out["plain"] > 0 else np.inf
    if level == 3 and m == 2:
        mask = r >= 1.0
        out["tail_term"] = float(np.sqrt(np.sum(
            grid.weights[mask] * np.abs(f.values[mask] / r[mask] ** 3) ** 2)))
    if level == 3 and m == 1:
        mask = (r >= 1.0) & (r <= 2.0)
        out["unit_scale_term"] = float(np.sqrt(np.sum(
            grid.weights[mask] * np.abs(f.values[mask]) ** 2)))
    return out


# -- test families -------------------------------------------------------------


def random_smooth_field(grid: RadialGrid, m, rng, p_choices=None,
                        complex_valued=True):
    """r^p times Gaussian bumps at random centers/widths (the test family)."""
    p_choices = p_choices or (m, m + 1, m + 2)
    p = rng.choice(p_choices)
    c = rng.uniform(0.5, grid.r_max / 4.0)
    w = rng.uniform(0.3, 2.0)
    vals = grid.nodes ** p * np.exp(-(grid.nodes - c) ** 2 / (2.0 * w ** 2))
    vals = vals / max(np.max(np.abs(vals)), 1e-300)
    if complex_valued:
        vals = vals * (rng.standard_normal() + 1j * rng.standard_normal())
    return EquivariantField(grid, m, vals.astype(complex))


def noncritical_family_sup(ell, k, grid, m, n_fields=100, seed=0, r1=None,
                           r2=None):
    """Max weighted-Hardy ratio over the random smooth family."""
    rng = np.random.default_rng(seed)
    r1 = r1 if r1 is not None else grid.nodes[4]
    r2 = r2 if r2 is not None else grid.r_max
    vals = []
    for _ in range(n_fields):
        f = random_smooth_field(grid, m, rng)
        vals.append(weighted_hardy_ratio(ell, k, f, r1, r2))
    return float(np.max(vals))


def critical_kernel_family(grid: RadialGrid, m, k, j_values=(2, 4, 8, 16, 32)):
    """Log-Hardy necessity check on the kernel family f = r^k over [e^-j, 1].

    The derivative term vanishes identically, so the unlogged quotient equals
    the digamma-type integral log(1/r1) and grows linearly in j, while the
    logged quotient saturates (arctan-like).  Returns (unlogged, logged).
    """
    vals_f = grid.nodes ** k
    f = EquivariantField(grid, m, vals_f.astype(complex))
    unlogged, logged = [], []
    for j in j_values:
        r1 = float(np.exp(-j))
        if r1 < grid.nodes[0]:
            raise DomainError("grid does not reach the inner radius; "
                              "use a deep geometric grading")
        unlogged.append(_unlogged_critical(grid, f, k, r1))
        logged.append(weighted_hardy_ratio(k, k, f, r1, 1.0))
    return np.array(unlogged), np.array(logged)


def _unlogged_critical(grid, f, k, r1):
    """Critical-exponent quotient without the log weights (boundary at 1)."""
    r = grid.nodes
    df = derivative_samples(grid, f.values, 1)
    op = df - k * f.values / r
    lhs = _interval_quadrature(grid, np.abs(f.values / r ** (k + 1)) ** 2,
                               r1, 1.0)
    rhs = _interval_quadrature(grid, np.abs(op / r ** k) ** 2, r1, 1.0)
    bnd = abs(_boundary_value(grid, f.values, 1.0)) ** 2
    return float(lhs / (rhs + bnd))
