"""Modulation analysis: decomposition, parameter tracking, formal ODEs, shooting.

A near-soliton field decomposes as

    u(r) = e^{i gamma} / lam * [P(.; b, eta) + eps](r / lam)

with eps orthogonal to the four-vector set of the orthogonality module.  The
four parameters are recovered by a Newton iteration whose Jacobian is, to
leading order, the constant diagonal of the transversality pairings.

The unstable parameter eta is located by bisection: trajectories exit the
trapped parameter region through |eta| = K b^{3/2} with a definite sign, and
the sign flips across the trapped initial value.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import make_interp_spline

from .errors import (BracketingError, DomainError, OutsideTubeError,
                     RegimeExitError)
from .evolution import SolverConfig, TrajectoryRecord, evolve_renormalized
from .grid import EquivariantField, RadialGrid, integrate, sobolev_norm
from .linops import LinOpContext, OrthoSet, adapted_derivatives, build_context, \
    build_ortho_set
from .profiles import ETA_STAR, modified_profile, build_profile_tables


@dataclass
class TrappedConfig:
    """Trapped-regime thresholds; only the ordering of the constants matters.

    At desk scale the formal exit surface K b^{3/2} lies outside the window
    where the deformed profile exists (the asymptotic ordering K << 1/b* is
    not satisfiable with b0 ~ 0.1), so runs exit through the tighter of the
    formal bound and a safety fraction of the profile window (delta/2)^2 b.
    The formal bound |eta| < K b^{3/2} then holds throughout every run.
    """

    K: float = 10.0
    M: float = 20.0
    b_star: float = 0.2
    profile_margin: float = 0.8
    # linearization-window stretch for the deformed profile; the existence
    # lemma's constant is only sufficient, and the Volterra construction is
    # verified to converge on this wider window in the test suite
    delta: float = 1.4

    def eta_bound(self, b):
        return self.K * b ** 1.5

    def eta_exit(self, b):
        return min(self.K * b ** 1.5,
                   self.profile_margin * (self.delta / 2.0) ** 2 * b)

    def in_regime(self, state, eps_norms=None):
        ok = 0.0 < state.b < self.b_star and abs(state.eta) < self.eta_bound(state.b)
        if not ok or eps_norms is None:
            return ok
        return (eps_norms.get("eps_l2", 0.0) < self.K * self.b_star ** 0.25
                and eps_norms.get("eps1_l2", 0.0) < self.K * state.b
                and eps_norms.get("eps3_l2", 0.0) < self.K * state.b ** 2.5)


@dataclass
class ModulationState:
    lam: float
    gamma: float
    b: float
    eta: float


@dataclass
class DecompositionResult:
    state: ModulationState
    eps: EquivariantField
    ortho_residuals: np.ndarray
    eps_norms: dict
    theta_eta: float
    iterations: int


class Decomposer:
    """Newton decomposition against a fixed orthogonality set.

    Holds the grid, linearization context, Z set and the constant diagonal
    Jacobian; reusable across time steps with warm starts.
    """

    def __init__(self, ctx: LinOpContext, oset: OrthoSet,
                 trapped: TrappedConfig | None = None):
        self.ctx = ctx
        self.oset = oset
        self.trapped = trapped or TrappedConfig()
        t = ctx.tables
        r = ctx.grid.nodes
        yq_sq = integrate(ctx.grid, (r * t.q) ** 2)
        lrho_sq = integrate(ctx.grid, np.abs(ctx.l_q(t.rho)) ** 2)
        m = ctx.m
        self.jacobian_diag = np.array(
            [-yq_sq, -lrho_sq, yq_sq, -(m + 1) * lrho_sq])
        self._v1_cache = None
        self.z_norms = np.array([
            np.sqrt(integrate(ctx.grid, np.abs(z) ** 2)) for z in oset.z])

    # -- internals ----------------------------------------------------------

    def _profile(self, b, eta):
        prof = modified_profile(self.ctx.m, b, eta, self.ctx.grid,
                                b_star=2.0 * self.trapped.b_star,
                                delta=self.trapped.delta,
                                want_derivatives=False,
                                v1_init=self._v1_cache)
        self._v1_cache = prof.eta_profile.v1
        return prof

    def _eps_and_residuals(self, spline_re, spline_im, u_norm, p_vals,
                           lam, gamma):
        grid = self.ctx.grid
        y = grid.nodes
        x = lam * y
        uvals = np.where(x <= grid.r_max,
                         spline_re(x) + 1j * spline_im(x), 0.0)
        eps = np.exp(-1j * gamma) * lam * uvals - p_vals
        res = np.array([
            np.sum(grid.weights * (eps.real * z.real + eps.imag * z.imag))
            for z in self.oset.z])
        return eps, res

    def decompose(self, u: EquivariantField,
                  guess: ModulationState | None = None,
                  tol=1e-9, max_iter=50) -> DecompositionResult:
        """Fit (lam, gamma, b, eta) so that the remainder is Z-orthogonal.

        The cold-start guess uses the H1-norm ratio for the scale; the Newton
        preconditioner is the diagonal transversality matrix, with damping on
        residual growth and a finite-difference Jacobian if the iteration
        stalls.
        """
        grid, m = self.ctx.grid, self.ctx.m
        if u.m != m:
            raise DomainError("field index does not match the decomposer")
        if guess is None:
            q_h1 = sobolev_norm(
                EquivariantField(grid, m, self.ctx.tables.q), 1)
            lam0 = q_h1 / max(sobolev_norm(u, 1), 1e-300)
            # phase estimate from the overlap with the rescaled vortex
            q_scaled = np.interp(grid.nodes / lam0, grid.nodes,
                                 self.ctx.tables.q, right=0.0) / lam0
            overlap = np.sum(grid.weights * q_scaled * u.values)
            gamma0 = float(np.angle(overlap)) if abs(overlap) > 0 else 0.0
            guess = ModulationState(lam=lam0, gamma=gamma0, b=0.05, eta=0.0)
        u_norm = u.l2_norm()
        nodes_ext = np.concatenate(([0.0], grid.nodes))
        vals_ext = np.concatenate(([0.0], u.values))
        spline_re = make_interp_spline(nodes_ext, vals_ext.real, k=5)
        spline_im = make_interp_spline(nodes_ext, vals_ext.imag, k=5)

        p = np.array([math.log(guess.lam), guess.gamma, guess.b, guess.eta])

        delta = self.trapped.delta

        def admissible(pv):
            b, eta = pv[2], pv[3]
            return (0.0 < b < 2.0 * self.trapped.b_star
                    and abs(eta) < (delta / 2.0) ** 2 * b)

        def clamp(pv):
            # keep (b, eta) strictly inside the profile window
            pv = pv.copy()
            pv[2] = min(pv[2], 0.98 * 2.0 * self.trapped.b_star)
            cap = min(0.98 * (delta / 2.0) ** 2 * pv[2], 0.95 * ETA_STAR)
            pv[3] = np.clip(pv[3], -cap, cap)
            return pv

        if not admissible(p):
            p = clamp(p)
            if p[2] <= 0:
                raise RegimeExitError("initial guess has b <= 0")

        def residuals(pv):
            prof = self._profile(pv[2], pv[3])
            eps, res = self._eps_and_residuals(
                spline_re, spline_im, u_norm, prof.p, math.exp(pv[0]), pv[1])
            return eps, res, prof

        eps, res, prof = residuals(p)
        res_scale = np.linalg.norm(res)
        fd_jacobian = None
        stall = 0
        for it in range(max_iter):
            eps_l2 = float(np.sqrt(integrate(grid, np.abs(eps) ** 2)))
            thresh = tol * self.z_norms * max(eps_l2, 1e-6 * u_norm)
            if np.all(np.abs(res) <= thresh):
                return self._package(p, eps, prof, res, it)
            if fd_jacobian is not None:
                dp = np.linalg.solve(fd_jacobian, res)
            else:
                dp = res / self.jacobian_diag
            step = 1.0
            improved = False
            for _ in range(10):
                p_new = p - step * dp
                if p_new[2] <= 0:
                    step *= 0.5
                    continue
                p_new = clamp(p_new)
                eps_new, res_new, prof_new = residuals(p_new)
                if np.linalg.norm(res_new) <= np.linalg.norm(res):
                    improved = True
                    break
                step *= 0.5
            if not improved:
                # stalled: fall back to a finite-difference Jacobian
                fd_jacobian = self._fd_jacobian(p, res, residuals)
                dp = np.linalg.solve(fd_jacobian, res)
                p_new = p - dp
                if p_new[2] <= 0:
                    p_new = p - 0.25 * dp
                if p_new[2] <= 0:
                    raise RegimeExitError(
                        "pseudoconformal parameter left b > 0")
                p_new = clamp(p_new)
                eps_new, res_new, prof_new = residuals(p_new)
            if np.linalg.norm(res_new) > 0.7 * np.linalg.norm(res):
                stall += 1
            else:
                stall = 0
            p, eps, res, prof = p_new, eps_new, res_new, prof_new
            if stall >= 3:
                fd_jacobian = self._fd_jacobian(p, res, residuals)
                stall = 0
        raise OutsideTubeError("decomposition Newton did not converge",
                               last_residual=float(np.linalg.norm(res)))

    def _fd_jacobian(self, p, res0, residuals):
        jac = np.empty((4, 4))
        steps = np.array([1e-6, 1e-6, 1e-6, 1e-8])
        for j in range(4):
            pj = p.copy()
            pj[j] += steps[j]
            if pj[2] <= 0:
                pj[j] -= 2 * steps[j]
            _, rj, _ = residuals(pj)
            jac[:, j] = (rj - res0) / (pj[j] - p[j])
        return jac

    def _package(self, p, eps, prof, res, iterations):
        grid, m = self.ctx.grid, self.ctx.m
        state = ModulationState(lam=math.exp(p[0]),
                                gamma=float(np.mod(p[1], 2.0 * np.pi)),
                                b=float(p[2]), eta=float(p[3]))
        eps_field = EquivariantField(grid, m, eps)
        derivs = adapted_derivatives(self.ctx, eps_field)
        norms = {
            "eps_l2": eps_field.l2_norm(),
            "eps1_l2": derivs[0].l2_norm(),
            "eps3_l2": derivs[2].l2_norm(),
        }
        if m >= 3:
            norms["eps5_l2"] = derivs[4].l2_norm()
        theta_eta = integrate(grid, (prof.chi * prof.eta_profile.q_eta) ** 2) \
            / (4.0 * np.pi) - (m + 1)
        return DecompositionResult(state=state, eps=eps_field,
                                   ortho_residuals=res, eps_norms=norms,
                                   theta_eta=float(theta_eta),
                                   iterations=iterations)


def project_off_orthogonality_set(eps_values, oset: OrthoSet, sweeps=2):
    """Remove the Z-pairings of a perturbation using the near-diagonal basis.

    Subtracts multiples of the tangent directions (scaling, phase,
    pseudoconformal, rotation modes), whose pairings with the Z set are
    diagonal to leading order; two sweeps push the residual pairings to
    round-off of the diagonal approximation.
    """
    ctx = oset.ctx
    grid, t = ctx.grid, ctx.tables
    r = grid.nodes
    basis = [t.lambda_q.astype(complex), 1j * t.q, 1j * r ** 2 * t.q,
             t.rho.astype(complex)]
    vals = np.array(eps_values, dtype=complex)
    for _ in range(sweeps):
        for k, (v, zk) in enumerate(zip(basis, oset.z)):
            num = np.sum(grid.weights * (vals.real * zk.real
                                         + vals.imag * zk.imag))
            den = oset.gram[k, k]
            vals = vals - (num / den) * v
    return vals


# -- parameter tracking -----------------------------------------------------


def track(record: TrajectoryRecord, decomposer: Decomposer | None = None):
    """Modulation series along a trajectory plus formal-ODE residuals.

    Uses the per-step series stored by the renormalized-frame hook when
    present; otherwise decomposes the stored snapshots.  Residuals of
    lam_s/lam + b, gamma_s - eta theta, b_s + b^2 + eta^2, eta_s are centered
    differences in the renormalized time.
    """
    if record.mod_series and "b" in record.mod_series:
        s = record.s_times[:len(record.mod_series["b"])]
        series = {k: np.asarray(v) for k, v in record.mod_series.items()}
    else:
        if decomposer is None:
            raise DomainError("no stored modulation series; pass a decomposer")
        states = []
        guess = None
        s = []
        for idx, fld in record.snapshots:
            dec = decomposer.decompose(fld, guess=guess)
            guess = dec.state
            states.append(dec)
            s.append(record.s_times[min(idx, len(record.s_times) - 1)])
        s = np.array(s)
        series = {
            "lambda": np.array([d.state.lam for d in states]),
            "gamma": np.array([d.state.gamma for d in states]),
            "b": np.array([d.state.b for d in states]),
            "eta": np.array([d.state.eta for d in states]),
            "theta_eta": np.array([d.theta_eta for d in states]),
            "eps_l2": np.array([d.eps_norms["eps_l2"] for d in states]),
        }
    lam, gam, b, eta = (series["lambda"], np.unwrap(series["gamma"]),
                        series["b"], series["eta"])
    theta = series.get("theta_eta", np.full_like(b, np.nan))
    if len(s) < 3:
        raise DomainError("need at least 3 decomposable samples")

    def ds_deriv(f):
        return (f[2:] - f[:-2]) / (s[2:] - s[:-2])

    mid = slice(1, -1)
    res = {
        "scale": ds_deriv(lam) / lam[mid] + b[mid],
        "phase": ds_deriv(gam) - eta[mid] * theta[mid],
        "pseudoconformal": ds_deriv(b) + b[mid] ** 2 + eta[mid] ** 2,
        "instability": ds_deriv(eta),
    }
    return {"s": s, **series}, res


# -- formal parameter ODEs ----------------------------------------------------


def integrate_formal_ode(m, b0, eta0, s_end=None, ds=0.05,
                         theta_mode="constant", theta_table=None, lam0=1.0,
                         b_end=None):
    """Classic RK4 for lam_s/lam = -b, gamma_s = eta theta, b_s = -(b^2+eta^2).

    theta_mode 'constant' uses theta = m + 1; 'table' looks up theta(b, eta)
    through the supplied callable.  Physical time accumulates as dt = lam^2 ds.

    For eta0 != 0 the b-curve crosses zero and runs to -infinity in finite
    renormalized time while the phase saturates, so integration stops at
    b = b_end (default -b0, the time-symmetric window) or at s_end.
    """
    if b0 <= 0:
        raise DomainError("b0 must be positive")
    if theta_mode == "table" and theta_table is None:
        raise DomainError("theta_mode='table' needs a theta_table callable")
    if b_end is None:
        b_end = -b0 if eta0 != 0.0 else 0.0
    if s_end is None:
        if eta0 == 0.0:
            s_end = (1.0 / max(b0 * 0.05, 1e-12) - 1.0 / b0)
        else:
            span = np.arctan(b0 / abs(eta0)) - np.arctan(b_end / abs(eta0))
            s_end = span / abs(eta0)

    def theta(b, eta):
        if theta_mode == "constant":
            return float(m + 1)
        return float(theta_table(b, eta))

    def rhs(y):
        lam, gam, b, eta, t = y
        return np.array([-b * lam, eta * theta(b, eta),
                         -(b * b + eta * eta), 0.0, lam * lam])

    y = np.array([lam0, 0.0, b0, eta0, 0.0])
    out = [y.copy()]
    s_vals = [0.0]
    s = 0.0
    while s < s_end - 1e-14 and y[2] > b_end:
        # shrink the step near the b-floor so the stop lands on it
        h = min(ds, s_end - s)
        rate = y[2] * y[2] + y[3] * y[3]
        if rate > 0 and (y[2] - b_end) / rate < h:
            h = max((y[2] - b_end) / rate, 1e-3 * ds)
        k1 = rhs(y)
        k2 = rhs(y + 0.5 * h * k1)
        k3 = rhs(y + 0.5 * h * k2)
        k4 = rhs(y + h * k3)
        y = y + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        s += h
        out.append(y.copy())
        s_vals.append(s)
    out = np.array(out)
    return {"s": np.array(s_vals), "lambda": out[:, 0], "gamma": out[:, 1],
            "b": out[:, 2], "eta": out[:, 3], "t": out[:, 4]}


# -- shooting -----------------------------------------------------------------


@dataclass
class ShootRun:
    eta0: float
    exit_reason: str
    exit_sign: int
    lambda_final: float
    s_final: float
    record: TrajectoryRecord | None = None


@dataclass
class ShootReport:
    eta_star: float
    bracket: tuple
    bracket_width: float
    runs: list
    trapped_run: ShootRun | None


class _TrackingHook:
    """Per-step decomposition hook driving the renormalized frame.

    Transport follows the formal laws with a weak servo that recenters the
    fitted scale/phase onto the frame; exits are flagged through the payload.

    The remainder-norm thresholds are enforced against the formal bounds plus
    a discretization allowance calibrated on the startup transient (the first
    few renormalized time units), since at desk resolution the instantaneous
    profile mismatch alone exceeds the asymptotic bounds.
    """

    def __init__(self, decomposer: Decomposer, trapped: TrappedConfig,
                 ds, b_floor=1e-4, servo=0.02, calibration_window=5.0,
                 calibration_factor=3.0, lambda_floor=None):
        self.dec = decomposer
        self.trapped = trapped
        self.guess = None
        self.servo_rate = servo / ds
        self.b_floor = b_floor
        self.calibration_window = calibration_window
        self.calibration_factor = calibration_factor
        self.baseline = {"eps_l2": 0.0, "eps1_l2": 0.0, "eps3_l2": 0.0}
        self.lambda_floor = lambda_floor
        self.lambda_frame = 1.0
        self._ds = ds

    def _bootstrap_violated(self, st, norms):
        trap = self.trapped
        c = self.calibration_factor
        limits = {
            "eps_l2": trap.K * trap.b_star ** 0.25,
            "eps1_l2": trap.K * st.b,
            "eps3_l2": trap.K * st.b ** 2.5,
        }
        return any(norms[k] > limits[k] + c * self.baseline[k] for k in limits)

    def __call__(self, w, s):
        try:
            dec = self.dec.decompose(w, guess=self.guess)
        except (OutsideTubeError, RegimeExitError, DomainError):
            return 0.0, 0.0, {"stop": "decomp-failed"}
        self.guess = dec.state
        st = dec.state
        payload = {
            "lambda_fit": st.lam, "gamma_fit": st.gamma,
            "b": st.b, "eta": st.eta, "theta_eta": dec.theta_eta,
            **dec.eps_norms,
            "mod_res_1": dec.ortho_residuals[0],
            "mod_res_2": dec.ortho_residuals[1],
            "mod_res_3": dec.ortho_residuals[2],
            "mod_res_4": dec.ortho_residuals[3],
        }
        lam_total = self.lambda_frame * st.lam
        payload["lambda_total"] = lam_total
        if s <= self.calibration_window:
            for k in self.baseline:
                self.baseline[k] = max(self.baseline[k], dec.eps_norms[k])
        if abs(st.eta) >= self.trapped.eta_exit(st.b):
            payload["stop"] = "eta-exit"
        elif st.b <= self.b_floor:
            payload["stop"] = "b-floor"
        elif self.lambda_floor is not None and lam_total <= self.lambda_floor:
            payload["stop"] = "lambda-floor"
        elif s > self.calibration_window \
                and self._bootstrap_violated(st, dec.eps_norms):
            payload["stop"] = "bootstrap-violated"
        # servo damps the fit/frame mismatch: d(log lam_fit)/ds = -servo * log lam_fit
        c_lam = -st.b + self.servo_rate * math.log(st.lam)
        c_gam = st.eta * dec.theta_eta + self.servo_rate * _wrap_angle(st.gamma)
        self.lambda_frame *= math.exp(c_lam * self._ds)
        return c_lam, c_gam, payload


def _wrap_angle(g):
    return (g + np.pi) % (2.0 * np.pi) - np.pi


def shoot_run(eta0, b0, eps0, decomposer: Decomposer, config: SolverConfig,
              trapped: TrappedConfig) -> ShootRun:
    """Evolve one shooting trajectory until exit or the focusing floor."""
    ctx = decomposer.ctx
    prof = modified_profile(ctx.m, b0, eta0, ctx.grid,
                            b_star=2.0 * trapped.b_star, delta=trapped.delta)
    vals = prof.p.copy()
    if eps0 is not None:
        vals = vals + project_off_orthogonality_set(eps0, decomposer.oset)
    w0 = EquivariantField(ctx.grid, ctx.m, vals)
    decomposer._v1_cache = None
    hook = _TrackingHook(decomposer, trapped, config.dt,
                         calibration_window=10.0,
                         lambda_floor=config.lambda_min)
    rec = evolve_renormalized(w0, config, hook)
    lam_fit = rec.mod_series.get("lambda_fit")
    lam_frame = rec.diagnostics["lambda_frame"]
    lam_tot = lam_frame[:len(lam_fit)] * np.nan_to_num(lam_fit, nan=1.0)
    rec.mod_series["lambda"] = lam_tot
    rec.mod_series["gamma"] = rec.diagnostics["gamma_frame"][:len(lam_fit)] \
        + np.nan_to_num(rec.mod_series.get("gamma_fit"), nan=0.0)
    eta_final = rec.mod_series["eta"][~np.isnan(rec.mod_series["eta"])][-1]
    reason = rec.stop_reason
    if reason == "time-end" and config.s_end is not None:
        reason = "s-end"
    sign = 0
    if reason == "eta-exit":
        sign = 1 if eta_final > 0 else -1
    return ShootRun(eta0=eta0, exit_reason=reason, exit_sign=sign,
                    lambda_final=float(lam_tot[-1]),
                    s_final=float(rec.s_times[-1]), record=rec)


def shoot_eta(b0, eps0, decomposer: Decomposer, config: SolverConfig,
              trapped: TrappedConfig | None = None, max_runs=15,
              endpoint_fraction=0.9, keep_records=False) -> ShootReport:
    """Bisection on the unstable parameter.

    Endpoint runs start at +- endpoint_fraction of the exit threshold at b0
    and must exit with opposite signs of eta; the bracket then halves per
    run.  A run that reaches the focusing floor while staying inside the
    trapped window is classified trapped and ends the hunt.
    """
    trapped = trapped or decomposer.trapped
    if not 0.0 < b0 < trapped.b_star:
        raise DomainError("b0 outside the trapped window")
    half = endpoint_fraction * trapped.eta_exit(b0)
    runs = []

    def classify(eta0):
        run = shoot_run(eta0, b0, eps0, decomposer, config, trapped)
        if not keep_records:
            run.record.snapshots = []
        runs.append(run)
        return run

    lo_run = classify(-half)
    hi_run = classify(half)
    if lo_run.exit_sign == hi_run.exit_sign or 0 in (lo_run.exit_sign,
                                                     hi_run.exit_sign):
        if not (lo_run.exit_sign < 0 < hi_run.exit_sign):
            raise BracketingError(
                f"endpoint runs classified identically "
                f"({lo_run.exit_reason}/{lo_run.exit_sign}, "
                f"{hi_run.exit_reason}/{hi_run.exit_sign})", runs=runs)
    lo, hi = -half, half
    trapped_run = None
    while len(runs) < max_runs:
        mid = 0.5 * (lo + hi)
        run = classify(mid)
        if run.exit_sign == 0:
            trapped_run = run
            break
        if run.exit_sign > 0:
            hi = mid
        else:
            lo = mid
    eta_star = trapped_run.eta0 if trapped_run is not None else 0.5 * (lo + hi)
    return ShootReport(eta_star=float(eta_star), bracket=(float(lo), float(hi)),
                       bracket_width=float(hi - lo), runs=runs,
                       trapped_run=trapped_run)


def make_decomposer(m, grid: RadialGrid, trapped: TrappedConfig | None = None) \
        -> Decomposer:
    """Convenience constructor wiring context, orthogonality set, thresholds."""
    trapped = trapped or TrappedConfig()
    ctx = build_context(m, grid)
    oset = build_ortho_set(ctx, min(trapped.M, 0.45 * grid.r_max))
    return Decomposer(ctx, oset, trapped)
