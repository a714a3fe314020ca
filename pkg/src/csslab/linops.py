"""Linearized operators at the static vortex and their spectral diagnostics.

Operators (acting on radial parts; the index bookkeeping is m -> m+1 -> m+2):

    Dplus = d_r - (m + A)/r          first-order self-dual factor at Q
    L     = Dplus + Q B_Q            linearization of the self-dual factor
    A     = d_r - (m + 1 + A)/r      conjugated first-order factor
    Lcal  = L* L                     full linearized generator

with A = A_theta[Q] and B_f g = (1/r) int_0^r Re(conj(f) g) r' dr'.  All
operators are only R-linear; complex arrays are used directly and the
nonlocal B-part takes real parts where the algebra demands it.

Adjoints come in two flavours:

* ``transpose``: exact transpose of the discretized operator in the
  quadrature inner product (adjointness to machine precision, boundary rows
  inherit one-sided-stencil artifacts);
* ``analytic``: hand adjoint of the differential part (consistent up to the
  boundary) composed with the exact transpose of the nonlocal part.

Compositions such as Lcal use the analytic flavour; matrix assemblies for
coercivity use transposes, which is what the variational problem means.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.linalg import lu_factor, lu_solve

from .errors import ConfigurationError, DomainError
from .gauge import compute_gauge
from .grid import (EquivariantField, RadialGrid, derivative_samples, integrate,
                   sobolev_norm)
from .profiles import ProfileTables, build_profile_tables, cutoff


@dataclass
class LinOpContext:
    """Coefficient tables for the linearized operators at the static vortex."""

    m: int
    grid: RadialGrid
    tables: ProfileTables
    a_theta: np.ndarray          # quadrature gauge potential of Q
    c_m: np.ndarray              # (m + A)/r
    c_m1: np.ndarray             # (m + 1 + A)/r
    q_sq: np.ndarray
    v_tilde: np.ndarray          # repulsive potential of A A*

    # -- applications ------------------------------------------------------

    def d_plus_q(self, f):
        return derivative_samples(self.grid, f, 1) - self.c_m * f

    def b_q(self, f):
        r = self.grid.nodes
        return self.grid.cumulative().apply(self.tables.q * np.real(f) * r) / r

    def l_q(self, f):
        return self.d_plus_q(f) + self.tables.q * self.b_q(f)

    def _adjoint_derivative(self, g):
        d = self.grid.derivative_matrix(1, 4)
        w = self.grid.weights
        return (d.T @ (w * g)) / w

    def _reverse_flat(self, h):
        ch = self.grid.cumulative().apply(h)
        return ch[-1] - ch

    def l_q_star(self, g, variant="analytic"):
        q = self.tables.q
        if variant == "analytic":
            dg = derivative_samples(self.grid, g, 1)
            local = -dg - g / self.grid.nodes - self.c_m * g
            return local + q * self._reverse_flat(q * np.real(g))
        if variant == "transpose":
            r, w = self.grid.nodes, self.grid.weights
            local = self._adjoint_derivative(g) - self.c_m * g
            nl = q * r * self.grid.cumulative().apply_transpose(
                w * (q / r) * np.real(g)) / w
            return local + nl
        raise ConfigurationError(f"unknown adjoint variant {variant!r}")

    def a_q(self, f):
        return derivative_samples(self.grid, f, 1) - self.c_m1 * f

    def a_q_star(self, g, variant="analytic"):
        if variant == "analytic":
            dg = derivative_samples(self.grid, g, 1)
            return -dg - g / self.grid.nodes - self.c_m1 * g
        if variant == "transpose":
            w = self.grid.weights
            return self._adjoint_derivative(g) - self.c_m1 * g
        raise ConfigurationError(f"unknown adjoint variant {variant!r}")

    def lcal_q(self, f):
        """Full linearized generator as the composition L* L."""
        return self.l_q_star(self.l_q(f))


def build_context(m, grid: RadialGrid, gauge="quadrature") -> LinOpContext:
    """Assemble coefficient tables; gauge='closed' uses the closed-form A."""
    from .profiles import a_theta_closed

    tables = build_profile_tables(m, grid)
    r = grid.nodes
    if gauge == "closed":
        a_theta = a_theta_closed(m, r)
    else:
        a_theta = compute_gauge(EquivariantField(grid, m, tables.q)).a_theta
    q_sq = tables.q ** 2
    v_tilde = (m + 2 + a_theta) ** 2 + 0.5 * r ** 2 * q_sq
    return LinOpContext(m=m, grid=grid, tables=tables, a_theta=a_theta,
                        c_m=(m + a_theta) / r, c_m1=(m + 1 + a_theta) / r,
                        q_sq=q_sq, v_tilde=v_tilde)


# -- pointwise identity diagnostics -------------------------------------------


def conjugation_residual(ctx: LinOpContext, f_values):
    """|| (L i L* - i A* A) f ||_L2 / ||f||_{H-dot^2} on an index-(m+1) field."""
    lhs = ctx.l_q(1j * ctx.l_q_star(f_values))
    rhs = 1j * ctx.a_q_star(ctx.a_q(f_values))
    num = np.sqrt(integrate(ctx.grid, np.abs(lhs - rhs) ** 2))
    den = sobolev_norm(EquivariantField(ctx.grid, ctx.m + 1, f_values), 2)
    return float(num / den) if den > 0 else 0.0


def nullspace_check(ctx: LinOpContext, window_fraction=0.25):
    """Residuals of the generalized null-space relations.

    The i r^2 Q relation is evaluated through a smooth window of radius
    window_fraction * r_max (its tail is not square-integrable for small m).
    """
    grid, t = ctx.grid, ctx.tables
    r = grid.nodes
    h1_q = sobolev_norm(EquivariantField(grid, ctx.m, t.q), 1)

    def l2(v):
        return float(np.sqrt(integrate(grid, np.abs(v) ** 2)))

    out = {
        "l_q_lambda_q": l2(ctx.l_q(t.lambda_q)) / h1_q,
        "l_q_i_q": l2(ctx.l_q(1j * t.q)) / h1_q,
        "a_q_r_q": l2(ctx.a_q(r * t.q)) / h1_q,
        "lcal_rho": l2(ctx.lcal_q(t.rho) - t.q) / l2(t.q),
        "lcal_lambda_q": l2(ctx.lcal_q(t.lambda_q))
        / sobolev_norm(EquivariantField(grid, ctx.m, t.lambda_q), 2),
        "lcal_i_q": l2(ctx.lcal_q(1j * t.q))
        / sobolev_norm(EquivariantField(grid, ctx.m, t.q), 2),
    }
    # windowed i Lcal (i r^2 Q) = 4 Lambda Q
    w_rad = window_fraction * grid.r_max
    g = 1j * r ** 2 * t.q * cutoff(r / w_rad)
    resid = 1j * ctx.lcal_q(g) - 4.0 * t.lambda_q
    mask = r <= w_rad
    num = np.sqrt(np.sum(grid.weights[mask] * np.abs(resid[mask]) ** 2))
    den = np.sqrt(np.sum(grid.weights[mask] * np.abs(4.0 * t.lambda_q[mask]) ** 2))
    out["lcal_ir2q_windowed"] = float(num / den)
    return out


def adapted_derivatives(ctx: LinOpContext, eps: EquivariantField):
    """Chain eps1 = L eps, eps2 = A eps1, eps3 = A* eps2 (and eps4, eps5 for m >= 3).

    Index bookkeeping: m -> m+1 -> m+2 -> m+1 -> m+2 -> m+1.
    """
    if eps.m != ctx.m:
        raise DomainError("field index does not match the linearization index")
    g = ctx.grid
    e1 = ctx.l_q(eps.values)
    e2 = ctx.a_q(e1)
    e3 = ctx.a_q_star(e2)
    fields = [EquivariantField(g, ctx.m + 1, e1),
              EquivariantField(g, ctx.m + 2, e2),
              EquivariantField(g, ctx.m + 1, e3)]
    if ctx.m >= 3:
        e4 = ctx.a_q(e3)
        e5 = ctx.a_q_star(e4)
        fields += [EquivariantField(g, ctx.m + 2, e4),
                   EquivariantField(g, ctx.m + 1, e5)]
    return tuple(fields)


@dataclass
class RepulsivityReport:
    v_min: float
    derivative_residual: float   # max |r V' + r^2 Q^2|
    v_origin: float              # limit (m+2)^2
    v_infinity: float            # limit m^2


def repulsivity_check(ctx: LinOpContext) -> RepulsivityReport:
    grid = ctx.grid
    dv = derivative_samples(grid, ctx.v_tilde, 1)
    resid = grid.nodes * np.real(dv) + grid.nodes ** 2 * ctx.q_sq
    return RepulsivityReport(
        v_min=float(np.min(ctx.v_tilde)),
        derivative_residual=float(np.max(np.abs(resid))),
        v_origin=float(ctx.v_tilde[0]),
        v_infinity=float(ctx.v_tilde[-1]),
    )


# -- orthogonality set ----------------------------------------------------------


@dataclass
class OrthoSet:
    """Cutoff deformations of the generalized null space of the adjoint flow."""

    M: float
    z: list                       # four complex arrays
    gram: np.ndarray              # (v_j, Z_k)_r for v in [LamQ, iQ, i y^2 Q, rho]
    ctx: LinOpContext


def build_ortho_set(ctx: LinOpContext, M=20.0) -> OrthoSet:
    if M < 5:
        raise DomainError("cutoff parameter M must be at least 5")
    grid, t = ctx.grid, ctx.tables
    r = grid.nodes
    if 2.0 * M > grid.r_max:
        raise DomainError("grid must cover twice the cutoff radius")
    chi_m = cutoff(r / M)
    rho_chi = t.rho * chi_m
    y2q_chi = r ** 2 * t.q * chi_m

    def rprod(a, b):
        return float(np.sum(grid.weights * (np.real(a) * np.real(b)
                                            + np.imag(a) * np.imag(b))))

    rho_y2q = rprod(t.rho, y2q_chi)
    q_rhochi = rprod(t.q, rho_chi)
    lam_y2q = rprod(t.lambda_q, y2q_chi)

    z1 = y2q_chi - (rho_y2q / q_rhochi) * ctx.lcal_q(rho_chi)
    # the correction coefficient sign is fixed by requiring (i y^2 Q, z2) = 0:
    # pairing through the self-adjoint generator gives
    # (i y^2 Q, Lcal(i y^2 Q chi)) = -4 (LamQ, y^2 Q chi), so the correction
    # must enter with a plus.
    z2 = 1j * rho_chi + (rho_y2q / (4.0 * lam_y2q)) * ctx.lcal_q(1j * y2q_chi)
    z3 = ctx.lcal_q(1j * z1)
    z4 = ctx.lcal_q(1j * z2)
    z = [z1, z2, z3, z4]

    basis = [t.lambda_q.astype(complex), 1j * t.q, 1j * r ** 2 * t.q,
             t.rho.astype(complex)]
    gram = np.array([[rprod(v, zk) for zk in z] for v in basis])
    return OrthoSet(M=float(M), z=z, gram=gram, ctx=ctx)


def transversality_matrix(oset: OrthoSet) -> np.ndarray:
    return oset.gram


# -- dense assemblies and coercivity -------------------------------------------


def _cumulative_dense(grid):
    key = ("cum_dense",)
    if key not in grid._cache:
        n = grid.n_points
        rule = grid.cumulative()
        t = np.zeros((n, n + 1))
        cells = rule._idx.shape[0]
        rows = np.repeat(np.arange(cells), rule._idx.shape[1])
        np.add.at(t, (rows, rule._idx.ravel()), rule._wts.ravel())
        grid._cache[key] = np.cumsum(t, axis=0)[:, 1:]
    return grid._cache[key]


def _stacked(block_rr, block_ri=None, block_ir=None, block_ii=None):
    """Assemble a real 2n x 2n matrix from blocks acting on (Re, Im)."""
    n = block_rr.shape[0]
    out = np.zeros((2 * n, 2 * n))
    out[:n, :n] = block_rr
    out[n:, n:] = block_ii if block_ii is not None else block_rr
    if block_ri is not None:
        out[:n, n:] = block_ri
    if block_ir is not None:
        out[n:, :n] = block_ir
    return out


def operator_matrices(ctx: LinOpContext):
    """Stacked-real matrices of L (dense) and A (sparse) with W-transposes.

    The transposes are exact adjoints for the quadrature inner product.
    """
    key = ("op_matrices",)
    if key in ctx.grid._cache:
        return ctx.grid._cache[key]
    grid = ctx.grid
    n = grid.n_points
    r, w = grid.nodes, grid.weights
    d1 = grid.derivative_matrix(1, 4).tocsr()
    cmat = _cumulative_dense(grid)
    q = ctx.tables.q
    base = (d1 - sparse.diags(ctx.c_m)).toarray()
    nonlocal_block = (q / r)[:, None] * cmat * (q * r)[None, :]
    l_mat = _stacked(base + nonlocal_block, block_ii=base)
    a_block = (d1 - sparse.diags(ctx.c_m1)).tocsr()
    a_mat = sparse.block_diag([a_block, a_block], format="csr")
    w2 = np.concatenate([w, w])
    a_star = sparse.diags(1.0 / w2) @ a_mat.T @ sparse.diags(w2)
    l_star = (w2[None, :] * l_mat.T) / w2[:, None]
    out = {"L": l_mat, "A": a_mat.tocsr(), "L*": l_star,
           "A*": a_star.tocsr(), "w2": w2}
    ctx.grid._cache[key] = out
    return out


def _sparse_weight_power(grid, ell):
    return sparse.diags(grid.nodes ** (-float(ell)))


def _norm_matrix(ctx: LinOpContext, level):
    """Quadratic form of the (sum-of-squares) discrete adapted norm.

    Higher derivatives are powers of the same first-derivative matrix used in
    the operator assembly, so the norm and the operator share one discrete
    symbol (otherwise unresolved grid modes open a spurious gap between them).
    """
    grid, m = ctx.grid, ctx.m
    r, w = grid.nodes, grid.weights
    n = grid.n_points
    wd = sparse.diags(w)
    d1 = grid.derivative_matrix(1, 4).tocsr()
    d = {0: sparse.identity(n, format="csr")}
    for j in range(1, 6):
        d[j] = d[j - 1] @ d1
    dplus = d[1] - sparse.diags(m / r)
    logm = np.sqrt(1.0 + np.minimum(np.log(r), 0.0) ** 2)

    def accumulate(components):
        acc = sparse.csr_matrix((n, n))
        for comp in components:
            acc = acc + comp.T @ wd @ comp
        return acc

    comps = []
    if level == 1:
        comps = [d[1], sparse.diags(m / r)]
    elif level == 3:
        comps += [_sparse_weight_power(grid, ell) @ d[2 - ell] @ dplus
                  for ell in range(3)]
        if m >= 3:
            comps += [_sparse_weight_power(grid, ell) @ d[3 - ell]
                      for ell in range(4)]
        elif m == 2:
            comps.append(d[3])
            wgt = sparse.diags(1.0 / (r * logm))
            comps += [wgt @ _sparse_weight_power(grid, ell) @ d[2 - ell]
                      for ell in range(3)]
        else:
            comps += [_sparse_weight_power(grid, ell) @ d[1 - ell] @ d[2]
                      for ell in range(2)]
            wgt = sparse.diags(1.0 / (r * np.sqrt(1.0 + r ** 2) * logm))
            comps += [wgt @ _sparse_weight_power(grid, ell) @ d[1 - ell]
                      for ell in range(2)]
    elif level == 5:
        if m < 3:
            raise DomainError("level-5 coercivity requires m >= 3")
        comps += [_sparse_weight_power(grid, ell) @ d[4 - ell] @ dplus
                  for ell in range(5)]
        if m >= 5:
            comps += [_sparse_weight_power(grid, ell) @ d[5 - ell]
                      for ell in range(6)]
        elif m == 4:
            comps.append(d[5])
            wgt = sparse.diags(1.0 / (r * logm))
            comps += [wgt @ _sparse_weight_power(grid, ell) @ d[4 - ell]
                      for ell in range(5)]
        else:
            comps += [_sparse_weight_power(grid, ell) @ d[1 - ell] @ d[4]
                      for ell in range(2)]
            wgt = sparse.diags(1.0 / (r * np.sqrt(1.0 + r ** 2) * logm))
            comps += [wgt @ _sparse_weight_power(grid, ell) @ d[3 - ell]
                      for ell in range(4)]
    else:
        raise DomainError("coercivity level must be 1, 3, or 5")
    n_r = accumulate(comps).toarray()
    return _stacked(n_r)


def coercivity_estimate(ctx: LinOpContext, level, oset: OrthoSet | None = None,
                        drop_constraints=False, tol=1e-8, max_iter=500,
                        seed=0, support_fraction=0.5):
    """Smallest constrained generalized singular value of the adapted operator.

    Minimizes ||T v||_{L^2} / ||v||_{adapted-level} over fields orthogonal to
    the Z set (Z1..Z4 at levels 3 and 5, Z1..Z2 at level 1) and supported in
    r <= support_fraction * r_max.  The problem is whitened by the norm metric
    (diagonal equilibration plus Cholesky), after which the smallest singular
    value is found by inverse power iteration on the bordered normal
    equations; whitening keeps the iteration well conditioned because the
    operator and the adapted norm share the same differential order.

    The support restriction matters: on a truncated domain the operator keeps
    exact slowly-decaying kernel branches that the plane excludes through
    decay at infinity; fields supported strictly inside the domain belong to
    the continuous function space, so the restricted minimum is an honest
    coercivity measurement while those branches (which cannot vanish on an
    open set without vanishing identically) are ruled out.
    """
    if level == 5 and ctx.m < 3:
        raise DomainError("level-5 coercivity requires m >= 3")
    from scipy.linalg import cholesky, solve_triangular
    from scipy.linalg.blas import dsyrk

    mats = operator_matrices(ctx)
    if level == 1:
        t_mat = mats["L"]
    elif level == 3:
        t_mat = mats["A*"] @ (mats["A"] @ mats["L"])
    else:
        t_mat = mats["A*"] @ (mats["A"] @ (mats["A*"] @ (mats["A"] @ mats["L"])))
    w2 = mats["w2"]
    n = ctx.grid.n_points
    inside = np.flatnonzero(ctx.grid.nodes <= support_fraction * ctx.grid.r_max)
    free = np.concatenate([inside, n + inside])
    b = (np.sqrt(w2)[:, None] * t_mat)[:, free]
    n_mat = _norm_matrix(ctx, level)[np.ix_(free, free)]

    rows = []
    if not drop_constraints and oset is not None:
        zrows = oset.z[:2] if level == 1 else oset.z
        w = ctx.grid.weights
        for zk in zrows:
            rows.append(np.concatenate([(w * np.real(zk))[inside],
                                        (w * np.imag(zk))[inside]]))
    ncon = len(rows)

    # whiten: v = D^-1 R^-1 y with D diagonal equilibration, N = (RD)^T (RD)
    d_eq = np.sqrt(np.diag(n_mat))
    n_t = n_mat / d_eq[:, None] / d_eq[None, :]
    n_t = 0.5 * (n_t + n_t.T)
    # equilibrated diagonal is 1; the ridge absorbs roundoff-level indefiniteness
    n_t[np.diag_indices_from(n_t)] += 1e-11
    r_chol = cholesky(n_t, lower=False)
    g = solve_triangular(r_chol, (b / d_eq[None, :]).T, trans="T",
                         lower=False).T
    asym = dsyrk(1.0, g, trans=1)
    asym = np.triu(asym) + np.triu(asym, 1).T

    nf = asym.shape[0]
    if ncon:
        c_t = solve_triangular(r_chol, (np.array(rows) / d_eq[None, :]).T,
                               trans="T", lower=False).T
        kkt = np.zeros((nf + ncon, nf + ncon))
        kkt[:nf, :nf] = asym
        kkt[:nf, nf:] = c_t.T
        kkt[nf:, :nf] = c_t
    else:
        kkt = asym
    luetc = lu_factor(kkt)

    rng = np.random.default_rng(seed)
    y = rng.standard_normal(nf)
    y /= np.linalg.norm(y)
    sigma = np.inf
    for _ in range(max_iter):
        rhs = np.concatenate([y, np.zeros(ncon)]) if ncon else y
        sol = lu_solve(luetc, rhs)
        y = sol[:nf]
        norm = np.linalg.norm(y)
        if norm == 0:
            break
        y /= norm
        new_sigma = float(np.linalg.norm(g @ y))
        if abs(new_sigma - sigma) <= tol * max(abs(new_sigma), 1e-300):
            sigma = new_sigma
            break
        sigma = new_sigma
    return float(sigma)
