import numpy as np
import pytest

from csslab.errors import DomainError
from csslab.grid import EquivariantField, integrate, make_grid, sobolev_norm
from csslab.linops import (adapted_derivatives, build_context, build_ortho_set,
                           coercivity_estimate, conjugation_residual,
                           nullspace_check, repulsivity_check,
                           transversality_matrix)

from conftest import smooth_bump


def l2(grid, v):
    return float(np.sqrt(integrate(grid, np.abs(v) ** 2)))


class TestKernels:
    def test_l_q_kernel(self, ctx_m1):
        g, t = ctx_m1.grid, ctx_m1.tables
        h1 = sobolev_norm(EquivariantField(g, 1, t.q), 1)
        assert l2(g, ctx_m1.l_q(t.lambda_q)) <= 1e-6 * h1
        assert l2(g, ctx_m1.l_q(1j * t.q)) <= 1e-6 * h1

    def test_a_q_kernel(self, ctx_m1):
        g, t = ctx_m1.grid, ctx_m1.tables
        h1 = sobolev_norm(EquivariantField(g, 1, t.q), 1)
        assert l2(g, ctx_m1.a_q(g.nodes * t.q)) <= 1e-6 * h1

    def test_rho_relations(self, ctx_m1):
        g, t = ctx_m1.grid, ctx_m1.tables
        target = g.nodes * t.q / 4.0
        assert l2(g, ctx_m1.l_q(t.rho) - target) <= 1e-6 * l2(g, target)
        # adjoint relation L*(rQ) = 2(m+1) Q
        got = ctx_m1.l_q_star((g.nodes * t.q).astype(complex))
        assert l2(g, got - 4.0 * t.q) <= 1e-5 * l2(g, 4.0 * t.q)

    def test_adjoint_exactness_transpose(self, ctx_m1):
        g = ctx_m1.grid
        rng = np.random.default_rng(0)
        for _ in range(5):
            f = smooth_bump(g, 1, rng.uniform(1, 8), rng.uniform(0.5, 2)) \
                * (1 + 1j * rng.standard_normal())
            h = smooth_bump(g, 1, rng.uniform(1, 8), rng.uniform(0.5, 2)) \
                * (1 + 1j * rng.standard_normal())
            scale = l2(g, f) * l2(g, h)

            def rprod(a, b):
                return np.sum(g.weights * (a.real * b.real + a.imag * b.imag))

            lhs = rprod(ctx_m1.l_q(f), h)
            rhs = rprod(f, ctx_m1.l_q_star(h, variant="transpose"))
            assert abs(lhs - rhs) <= 1e-12 * scale
            lhs = rprod(ctx_m1.a_q(f), h)
            rhs = rprod(f, ctx_m1.a_q_star(h, variant="transpose"))
            assert abs(lhs - rhs) <= 1e-12 * scale

    def test_analytic_adjoint_matches_transpose(self, ctx_m1):
        # agreement away from boundary stencils on decaying fields
        g = ctx_m1.grid
        h = smooth_bump(g, 2, 6.0, 1.5)
        diff = ctx_m1.a_q_star(h, "analytic") - ctx_m1.a_q_star(h, "transpose")
        mask = (g.nodes > 20 * g.h_min) & (g.nodes < g.r_max - 20 * g.h_min)
        inner = np.sqrt(np.sum(g.weights[mask] * np.abs(diff[mask]) ** 2))
        assert inner <= 1e-6 * l2(g, h)

    def test_r_linearity_structure(self, ctx_m1):
        # [A, i] = 0 but L does not commute with i
        g = ctx_m1.grid
        f = smooth_bump(g, 1, 3.0, 1.0)
        comm_a = ctx_m1.a_q(1j * f) - 1j * ctx_m1.a_q(f)
        assert l2(g, comm_a) == 0.0
        comm_l = ctx_m1.l_q(1j * f) - 1j * ctx_m1.l_q(f)
        assert l2(g, comm_l) > 1e-3 * l2(g, f)

    def test_factorization_is_composition(self, ctx_m1):
        g = ctx_m1.grid
        f = smooth_bump(g, 1, 2.0, 0.8)
        direct = ctx_m1.lcal_q(f)
        composed = ctx_m1.l_q_star(ctx_m1.l_q(f))
        assert np.array_equal(direct, composed)


class TestConjugation:
    def test_zero(self, ctx_m1):
        assert conjugation_residual(
            ctx_m1, np.zeros(ctx_m1.grid.n_points, dtype=complex)) == 0.0

    def test_localized_test_field(self, ctx_m1):
        g, t = ctx_m1.grid, ctx_m1.tables
        f = (g.nodes * t.q * np.exp(-g.nodes ** 2 / 8.0)).astype(complex)
        assert conjugation_residual(ctx_m1, f) <= 1e-4

    def test_refinement(self):
        vals = []
        for n in (512, 1024):
            g = make_grid(n, 40.0, "uniform")
            ctx = build_context(1, g)
            f = (g.nodes * ctx.tables.q
                 * np.exp(-g.nodes ** 2 / 8.0)).astype(complex)
            vals.append(conjugation_residual(ctx, f))
        assert vals[0] / vals[1] >= 3.5

    def test_random_fields(self, ctx_m1):
        rng = np.random.default_rng(7)
        for _ in range(5):
            f = smooth_bump(ctx_m1.grid, 2, rng.uniform(1, 6),
                            rng.uniform(0.5, 1.5)) \
                * (1 + 0.5j * rng.standard_normal())
            assert conjugation_residual(ctx_m1, f) <= 1e-4


class TestNullspace:
    def test_m1_report(self, ctx_m1):
        rep = nullspace_check(ctx_m1)
        assert rep["lcal_rho"] <= 1e-4
        assert rep["lcal_lambda_q"] <= 1e-4
        assert rep["lcal_i_q"] <= 1e-4
        assert rep["lcal_ir2q_windowed"] <= 1e-3

    def test_m2_windowed_relation(self, ctx_m2):
        rep = nullspace_check(ctx_m2)
        assert rep["lcal_ir2q_windowed"] <= 1e-3

    def test_second_order_decrease(self):
        vals = []
        for n in (512, 1024):
            g = make_grid(n, 40.0, "uniform")
            rep = nullspace_check(build_context(1, g))
            vals.append(rep["lcal_rho"])
        assert vals[0] / vals[1] >= 3.0


class TestAdaptedDerivatives:
    def test_kernel_chains_vanish(self, ctx_m1):
        g, t = ctx_m1.grid, ctx_m1.tables
        eps = EquivariantField(g, 1, t.lambda_q.astype(complex))
        chain = adapted_derivatives(ctx_m1, eps)
        assert chain[0].m == 2 and chain[1].m == 3 and chain[2].m == 2
        h1 = sobolev_norm(EquivariantField(g, 1, t.q), 1)
        assert chain[0].l2_norm() <= 1e-6 * h1

    def test_rho_killed_at_second_stage(self, ctx_m1):
        g, t = ctx_m1.grid, ctx_m1.tables
        eps = EquivariantField(g, 1, t.rho.astype(complex))
        chain = adapted_derivatives(ctx_m1, eps)
        # eps2 = A L rho = A(rQ)/(2(m+1)) = 0
        assert chain[1].l2_norm() <= 1e-5

    def test_m3_full_chain(self, ctx_m3):
        eps = EquivariantField(ctx_m3.grid, 3,
                               smooth_bump(ctx_m3.grid, 3, 3.0, 1.0))
        chain = adapted_derivatives(ctx_m3, eps)
        assert len(chain) == 5
        assert [f.m for f in chain] == [4, 5, 4, 5, 4]

    def test_m1_chain_capped(self, ctx_m1):
        eps = EquivariantField(ctx_m1.grid, 1,
                               smooth_bump(ctx_m1.grid, 1, 3.0, 1.0))
        assert len(adapted_derivatives(ctx_m1, eps)) == 3

    def test_adjoint_consistency_of_norm(self, ctx_m1):
        # ||eps3||^2 = (eps2, A A* eps2) with the transpose adjoint
        g = ctx_m1.grid
        eps = EquivariantField(g, 1, smooth_bump(g, 1, 4.0, 1.2))
        e1 = ctx_m1.l_q(eps.values)
        e2 = ctx_m1.a_q(e1)
        e3t = ctx_m1.a_q_star(e2, variant="transpose")
        lhs = integrate(g, np.abs(e3t) ** 2)
        rhs = np.sum(g.weights * (np.conj(e2)
                                  * ctx_m1.a_q(e3t)).real)
        assert abs(lhs - rhs) <= 1e-8 * max(lhs, 1e-30)


class TestOrthoSet:
    def test_gram_near_diagonal(self, oset_m1):
        gram = transversality_matrix(oset_m1)
        diag = np.abs(np.diag(gram))
        off = np.abs(gram - np.diag(np.diag(gram)))
        assert np.max(off / diag[None, :]) <= 0.10

    def test_diagonal_values(self, oset_m1):
        gram = transversality_matrix(oset_m1)
        yq_sq = 8.0 * np.pi ** 2
        lrho_sq = np.pi ** 2 / 2.0
        assert gram[0, 0] == pytest.approx(-yq_sq, rel=0.05)
        assert gram[1, 1] == pytest.approx(lrho_sq, rel=0.05)
        assert gram[2, 2] == pytest.approx(4.0 * yq_sq, rel=0.05)
        assert gram[3, 3] == pytest.approx(-lrho_sq, rel=0.05)

    def test_structural_zero(self, ctx_m1, oset_m1):
        # (iQ, Z1) vanishes identically: Z1 is real
        g, t = ctx_m1.grid, ctx_m1.tables
        z1 = oset_m1.z[0]
        val = np.sum(g.weights * (np.real(1j * t.q) * z1.real
                                  + np.imag(1j * t.q) * z1.imag))
        assert np.max(np.abs(z1.imag)) == 0.0
        assert abs(val) <= 1e-10

    def test_off_diagonal_small_across_m_cutoffs(self, ctx_m1):
        # the correction coefficients cancel the pairings to quadrature noise
        # already at moderate cutoffs, far below the 10% requirement
        for m_cut in (9.0, 18.0):
            oset = build_ortho_set(ctx_m1, m_cut)
            gram = oset.gram
            diag = np.abs(np.diag(gram))
            off = np.abs(gram - np.diag(np.diag(gram)))
            assert np.max(off / diag[None, :]) <= 1e-3

    def test_domain_guard(self, ctx_m1):
        with pytest.raises(DomainError):
            build_ortho_set(ctx_m1, 30.0)   # 2M beyond r_max


class TestRepulsivity:
    def test_potential_positive(self, ctx_m1):
        rep = repulsivity_check(ctx_m1)
        assert rep.v_min >= 1.0 - 1e-6

    def test_derivative_identity(self, ctx_m1):
        rep = repulsivity_check(ctx_m1)
        assert rep.derivative_residual <= 1e-4

    def test_endpoint_limits(self, ctx_m1):
        rep = repulsivity_check(ctx_m1)
        assert rep.v_origin == pytest.approx(9.0, abs=1e-4)
        assert rep.v_infinity == pytest.approx(1.0, abs=1e-3)

    def test_endpoints_other_m(self, ctx_m2):
        rep = repulsivity_check(ctx_m2)
        assert rep.v_origin == pytest.approx(16.0, abs=1e-3)
        assert rep.v_infinity == pytest.approx(4.0, abs=1e-2)


class TestCoercivity:
    @pytest.fixture(scope="class")
    def small_setup(self):
        g = make_grid(768, 40.0, "uniform")
        ctx = build_context(1, g)
        oset = build_ortho_set(ctx, 18.0)
        return ctx, oset

    def test_positive_levels_1_3(self, small_setup):
        ctx, oset = small_setup
        assert coercivity_estimate(ctx, 1, oset) > 0.0
        assert coercivity_estimate(ctx, 3, oset) > 0.0

    def test_constraint_collapse(self, small_setup):
        ctx, oset = small_setup
        con = coercivity_estimate(ctx, 3, oset)
        unc = coercivity_estimate(ctx, 3, oset, drop_constraints=True)
        assert con >= 10.0 * unc

    def test_level5_guard(self, small_setup):
        ctx, oset = small_setup
        with pytest.raises(DomainError):
            coercivity_estimate(ctx, 5, oset)

    def test_level5_m3(self):
        g = make_grid(768, 40.0, "uniform")
        ctx = build_context(3, g)
        oset = build_ortho_set(ctx, 18.0)
        assert coercivity_estimate(ctx, 5, oset) > 0.0
