"""Time integration of the gauged Schrodinger flow.

Fixed frame: Crank-Nicolson on the equivariant Laplacian with the real
potential triple (centrifugal-gauge, nonlocal scalar potential, cubic)
evaluated at the time midpoint through a fixed number of Picard sweeps.
The Laplacian is discretized in flux form, which makes it exactly symmetric
for the quadrature inner product; since every potential is real, each step
is a Cayley transform and the discrete charge is conserved to roundoff.

Renormalized frame: the same step augmented with the scaling transport
lam_s/lam * (y d_y + 1) and a phase transport gamma_s, with coefficients
supplied per step by a modulation hook; the transport matrix is
skew-symmetrized for the quadrature inner product so modulus is still
exactly conserved.  Physical time accumulates as dt = lam^2 ds.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_banded

from .errors import (ConfigurationError, DomainError, FrameCollapseError,
                     NumericsError)
from .gauge import charge, compute_gauge, energy, virial_second
from .grid import EquivariantField, RadialGrid, integrate, sobolev_norm

SCHEMES = ("crank-nicolson-picard", "imex-ab2")


@dataclass
class SolverConfig:
    scheme: str = "crank-nicolson-picard"
    dt: float = 1e-3
    dt_min: float = 1e-9
    picard_iters: int = 2
    cfl_guard: float = np.inf          # cap on dt / h_min
    t_end: float | None = None
    s_end: float | None = None
    lambda_min: float | None = None    # stop when lam/lam0 drops below this
    hdot1_max: float | None = None
    adapt_dt: bool = False             # scale dt with the instantaneous lam^2
    snapshot_every: int = 0            # 0: keep only first/last

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ConfigurationError(f"scheme must be one of {SCHEMES}")
        if not (self.dt > self.dt_min > 0):
            raise ConfigurationError("need dt > dt_min > 0")
        if self.picard_iters < 1:
            raise ConfigurationError("picard_iters must be at least 1")


@dataclass
class TrajectoryRecord:
    grid: RadialGrid
    m: int
    frame: str
    times: np.ndarray = field(default_factory=lambda: np.empty(0))
    s_times: np.ndarray = field(default_factory=lambda: np.empty(0))
    diagnostics: dict = field(default_factory=dict)
    snapshots: list = field(default_factory=list)   # (step index, field)
    stop_reason: str = "time-end"
    mod_series: dict = field(default_factory=dict)


def finite_volume_weights(grid):
    """Annulus measures pi (r_{i+1/2}^2 - r_{i-1/2}^2) of the dual cells.

    This is the discrete mass the evolution scheme conserves exactly; it is a
    second-order quadrature, used only inside the stepper and its
    conservation diagnostics.
    """
    key = ("fv_weights",)
    if key not in grid._cache:
        r = grid.nodes
        r_ext = np.concatenate(([0.0], r, [2 * r[-1] - r[-2]]))
        r_half = 0.5 * (r_ext[:-1] + r_ext[1:])
        grid._cache[key] = np.pi * (r_half[1:] ** 2 - r_half[:-1] ** 2)
    return grid._cache[key]


def _laplacian_bands(grid, m):
    """Flux-form tridiagonal of -Lap_m + m^2/r^2, symmetric in the FV weights."""
    key = ("lap_bands", m)
    if key in grid._cache:
        return grid._cache[key]
    r = grid.nodes
    w = finite_volume_weights(grid)
    r_ext = np.concatenate(([0.0], r, [2 * r[-1] - r[-2]]))
    r_half = 0.5 * (r_ext[:-1] + r_ext[1:])          # n+1 interface radii
    h = np.diff(r_ext)                               # n+1 interface gaps
    c = 2.0 * np.pi * r_half / h                     # flux coefficients
    # ghost values vanish at both ends (index m >= 1 at the origin,
    # homogeneous Dirichlet at r_max), so only interior couplings remain;
    # w_i H_{i,i+1} = w_{i+1} H_{i+1,i} makes H exactly symmetric in W
    diag = (c[:-1] + c[1:]) / w + (m ** 2) / r ** 2
    lower = -c[1:-1] / w[1:]
    upper = -c[1:-1] / w[:-1]
    grid._cache[key] = (lower, diag, upper)
    return grid._cache[key]


def _hamiltonian_ab(grid, m):
    """ab-layout bands of the W-symmetric kinetic operator -Lap_m + m^2/r^2."""
    key = ("ham_ab", m)
    if key in grid._cache:
        return grid._cache[key]
    n = grid.n_points
    lower, diag, upper = _laplacian_bands(grid, m)
    bw = 1
    ab = np.zeros((3, n))
    ab[0, 1:] = upper
    ab[1, :] = diag
    ab[2, :-1] = lower
    grid._cache[key] = (bw, ab)
    return grid._cache[key]


def _transport_bands(grid):
    """Skew-symmetrized tridiagonal of the scaling field y d_y + 1."""
    key = ("transport_bands",)
    if key in grid._cache:
        return grid._cache[key]
    r = grid.nodes
    w = finite_volume_weights(grid)
    n = grid.n_points
    # second-order centered d_y on the (possibly graded) nodes, ghost zeros
    r_ext = np.concatenate(([0.0], r, [2 * r[-1] - r[-2]]))
    hl = r - r_ext[:-2]
    hr = r_ext[2:] - r
    denom = hl * hr * (hl + hr)
    low = -hr ** 2 / denom          # coefficient of f_{i-1}
    mid = (hr ** 2 - hl ** 2) / denom
    up = hl ** 2 / denom            # coefficient of f_{i+1}
    g_low = r[1:] * low[1:]
    g_up = r[:-1] * up[:-1]
    # skew part in the weighted inner product: (G - W^-1 G^T W)/2
    low_s = 0.5 * (g_low - g_up * w[:-1] / w[1:])
    up_s = 0.5 * (g_up - g_low * w[1:] / w[:-1])
    ab = np.zeros((3, n))
    ab[0, 1:] = up_s
    ab[2, :-1] = low_s
    grid._cache[key] = ab
    return grid._cache[key]


def _potential(u_values, grid, m):
    dens = np.abs(u_values) ** 2
    cum = grid.cumulative()
    r = grid.nodes
    a_theta = -0.5 * cum.apply(dens * r)
    ch = cum.apply((m + a_theta) * dens / r)
    a_zero = -(ch[-1] - ch)
    return ((m + a_theta) / r) ** 2 - (m / r) ** 2 + a_zero - dens


def _apply_ab(ab, bw, vec):
    out = ab[bw] * vec
    for k in range(1, bw + 1):
        out[:-k] += ab[bw - k, k:] * vec[k:]      # superdiagonal k
        out[k:] += ab[bw + k, :-k] * vec[:-k]     # subdiagonal k
    return out


def step(u: EquivariantField, dt, config: SolverConfig,
         transport=(0.0, 0.0), prev_potential=None):
    """One time step; returns (next field, potential used at the midpoint).

    transport = (lam_s/lam, gamma_s) adds the renormalized-frame terms.
    prev_potential feeds the AB2 extrapolation of the imex scheme.
    """
    grid, m = u.grid, u.m
    bw, h_ab = _hamiltonian_ab(grid, m)
    c_lam, c_gam = transport
    t_ab = _transport_bands(grid) if (c_lam != 0.0 or c_gam != 0.0) else None

    def build_ab(v_mid, sign):
        # sign +1: left-hand matrix I + (dt/2)(i H - cL G + i cg)
        z = 0.5j * dt * sign
        ab = z * h_ab.astype(complex)
        ab[bw] += 1.0 + z * v_mid
        if t_ab is not None:
            ab[bw] += z * c_gam
            coef = sign * (-0.5 * dt) * c_lam
            ab[bw - 1] += coef * t_ab[0]
            ab[bw + 1] += coef * t_ab[2]
        return ab

    vals = u.values
    if config.scheme == "crank-nicolson-picard":
        v_mid = _potential(vals, grid, m)
        u_next = vals
        for _ in range(config.picard_iters):
            left = build_ab(v_mid, +1)
            right = build_ab(v_mid, -1)
            rhs = _apply_ab(right, bw, vals)
            u_next = solve_banded((bw, bw), left, rhs)
            v_mid = _potential(0.5 * (vals + u_next), grid, m)
        v_used = v_mid
    else:   # imex-ab2: implicit linear part, extrapolated potential
        v_now = _potential(vals, grid, m)
        v_prev = v_now if prev_potential is None else prev_potential
        v_hat = 1.5 * v_now - 0.5 * v_prev
        left = build_ab(v_hat, +1)
        right = build_ab(v_hat, -1)
        rhs = _apply_ab(right, bw, vals)
        u_next = solve_banded((bw, bw), left, rhs)
        v_used = v_now
    if not np.all(np.isfinite(u_next)):
        raise OverflowError("solution overflowed")
    return EquivariantField(grid, m, u_next), v_used


def _diagnose(u):
    e = energy(u)
    w_fv = finite_volume_weights(u.grid)
    return {
        "charge": charge(u),
        "mass_fv": float(np.sum(w_fv * np.abs(u.values) ** 2)),
        "energy": e.selfdual,
        "energy_direct": e.direct,
        "virial1": integrate(u.grid, u.grid.nodes ** 2 * np.abs(u.values) ** 2),
        "virial2": virial_second(u),
        "hdot1": sobolev_norm(u, 1),
    }


def evolve(u0: EquivariantField, config: SolverConfig, t0=0.0) -> TrajectoryRecord:
    """Fixed-frame integration until a stop criterion fires."""
    if config.t_end is None and config.lambda_min is None \
            and config.hdot1_max is None:
        raise ConfigurationError("no stop criterion configured")
    rec = TrajectoryRecord(grid=u0.grid, m=u0.m, frame="fixed")
    u = u0
    t = t0
    times, diags = [t0], [_diagnose(u0)]
    hdot1_0 = diags[0]["hdot1"]
    rec.snapshots.append((0, u0))
    prev_v = None
    dt = min(config.dt, config.cfl_guard * u0.grid.h_min) \
        if np.isfinite(config.cfl_guard) else config.dt
    reason = "time-end"
    k = 0
    while True:
        if config.t_end is not None and t >= config.t_end - 1e-14:
            break
        dt_k = dt
        if config.adapt_dt:
            lam_ratio = hdot1_0 / diags[-1]["hdot1"]
            dt_k = max(config.dt_min, min(dt, dt * lam_ratio ** 2))
        if config.t_end is not None:
            dt_k = min(dt_k, config.t_end - t)
        try:
            u, prev_v = step(u, dt_k, config, prev_potential=prev_v)
        except (OverflowError, NumericsError):
            reason = "overflow"
            break
        t += dt_k
        k += 1
        d = _diagnose(u)
        times.append(t)
        diags.append(d)
        if config.snapshot_every and k % config.snapshot_every == 0:
            rec.snapshots.append((k, u))
        if config.lambda_min is not None \
                and hdot1_0 / d["hdot1"] <= config.lambda_min:
            reason = "lambda-floor"
            break
        if config.hdot1_max is not None and d["hdot1"] >= config.hdot1_max:
            reason = "hdot1-ceiling"
            break
    rec.snapshots.append((k, u))
    rec.times = np.array(times)
    rec.s_times = rec.times.copy()
    rec.diagnostics = {key: np.array([d[key] for d in diags])
                       for key in diags[0]}
    rec.stop_reason = reason
    return rec


def virial_check(record: TrajectoryRecord):
    """Residuals of the two moment identities along a trajectory.

    d_t int r^2|u|^2 = 4 int Im(conj(u) r du), and the latter's derivative is
    4 E[u]; both are tested by centered differences on the recorded series.
    """
    t = record.times
    if len(t) < 3:
        raise DomainError("need at least 3 recorded steps")
    v1 = record.diagnostics["virial1"]
    v2 = record.diagnostics["virial2"]
    en = record.diagnostics["energy"]
    dv1 = (v1[2:] - v1[:-2]) / (t[2:] - t[:-2])
    dv2 = (v2[2:] - v2[:-2]) / (t[2:] - t[:-2])
    res1 = dv1 - 4.0 * v2[1:-1]
    res2 = dv2 - 4.0 * en[1:-1]
    scale1 = max(np.max(np.abs(4.0 * v2[1:-1])), 1e-30)
    scale2 = max(np.max(np.abs(4.0 * en[1:-1])), 1e-30)
    return {
        "first_abs": float(np.max(np.abs(res1))),
        "first_rel": float(np.max(np.abs(res1)) / scale1),
        "second_abs": float(np.max(np.abs(res2))),
        "second_rel": float(np.max(np.abs(res2)) / scale2),
    }


def evolve_renormalized(w0: EquivariantField, config: SolverConfig,
                        hook, lam0=1.0, gamma0=0.0) -> TrajectoryRecord:
    """Co-moving-frame integration w(s, y) = e^{-i gamma} lam u(t, lam y).

    hook(w, s) must return (lam_s/lam, gamma_s, payload) where payload is an
    arbitrary dict merged into the per-step modulation series (may be empty).
    If the hook raises FrameCollapseError the run falls back to the fixed
    frame (zero transport) and records the event.
    """
    if config.s_end is None and config.lambda_min is None \
            and config.hdot1_max is None:
        raise ConfigurationError("no stop criterion configured")
    rec = TrajectoryRecord(grid=w0.grid, m=w0.m, frame="renorm")
    w = w0
    s = 0.0
    t = 0.0
    lam, gamma = float(lam0), float(gamma0)
    times, s_times, diags = [t], [s], [_diagnose(w0)]
    frames = {"lambda_frame": [lam], "gamma_frame": [gamma]}
    payloads = []
    hook_alive = True
    c_lam = c_gam = 0.0
    rec.snapshots.append((0, w0))
    reason = "time-end"
    ds = config.dt
    k = 0
    hdot1_0 = diags[0]["hdot1"]
    while True:
        if config.s_end is not None and s >= config.s_end - 1e-14:
            break
        if hook_alive:
            try:
                c_lam, c_gam, payload = hook(w, s)
            except FrameCollapseError:
                hook_alive = False
                c_lam = c_gam = 0.0
                payload = {"hook_failed": True}
        else:
            payload = {}
        payloads.append(payload)
        try:
            w, _ = step(w, ds, config, transport=(c_lam, c_gam))
        except (OverflowError, NumericsError):
            reason = "overflow"
            break
        s += ds
        x = c_lam * ds
        growth = np.expm1(2.0 * x) / (2.0 * x) if abs(x) > 1e-12 else 1.0 + x
        t += lam * lam * ds * growth
        lam *= np.exp(x)
        gamma += c_gam * ds
        k += 1
        d = _diagnose(w)
        times.append(t)
        s_times.append(s)
        diags.append(d)
        frames["lambda_frame"].append(lam)
        frames["gamma_frame"].append(gamma)
        if config.snapshot_every and k % config.snapshot_every == 0:
            rec.snapshots.append((k, w))
        if payload.get("stop"):
            reason = payload["stop"]
            break
        if config.lambda_min is not None and lam / lam0 <= config.lambda_min:
            reason = "lambda-floor"
            break
        if config.hdot1_max is not None and d["hdot1"] >= config.hdot1_max:
            reason = "hdot1-ceiling"
            break
    rec.snapshots.append((k, w))
    rec.times = np.array(times)
    rec.s_times = np.array(s_times)
    rec.diagnostics = {key: np.array([d[key] for d in diags])
                       for key in diags[0]}
    rec.diagnostics.update({key: np.array(v) for key, v in frames.items()})
    if payloads and any(payloads):
        keys = set().union(*(p.keys() for p in payloads)) - {"stop"}
        rec.mod_series = {key: np.array([p.get(key, np.nan) for p in payloads])
                          for key in keys}
    rec.stop_reason = reason
    return rec
