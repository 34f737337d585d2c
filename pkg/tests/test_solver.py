import numpy as np
import pytest

from ttkrylov import (
    make_tt_operator,
    tt_add,
    tt_apply,
    tt_identity_operator,
    tt_inner,
    tt_norm,
    tt_op_from_factors,
    tt_op_to_dense,
    tt_random,
    tt_scale,
    tt_to_dense,
    tt_zero,
)
from ttkrylov.operators import (
    Grid1D,
    convection_diffusion_problem,
    inv_laplacian_preconditioner,
    laplacian_eigen_rhs,
    poisson_problem,
    tt_laplacian,
)
from ttkrylov.solver import (
    GmresConfig,
    GivensLsq,
    OperatorChain,
    estimate_l2_norm,
    hessenberg_lsq,
    relaxed_tt_gmres,
    tt_gmres,
    tt_right_gmres,
)

from oracles import dense_mgs_gmres

rng = np.random.default_rng(99)


def small_spd_op(n=8, seed=0):
    r = np.random.default_rng(seed)
    a1 = r.standard_normal((1, n, n, 2))
    a2 = r.standard_normal((2, n, n, 1))
    op = make_tt_operator([a1, a2])
    return tt_add(op, tt_scale(tt_identity_operator((n, n)), 8.0))


class TestHessenbergLsq:
    def test_exact_square(self):
        y, res = hessenberg_lsq(np.array([[2.0], [0.0]]), 4.0)
        np.testing.assert_allclose(y, [2.0])
        assert res < 1e-14

    def test_residual_one(self):
        y, res = hessenberg_lsq(np.array([[1.0], [1.0]]), np.sqrt(2.0))
        np.testing.assert_allclose(y, [1.0])
        np.testing.assert_allclose(res, 1.0)

    def test_random_matches_lstsq(self):
        for seed in range(5):
            r = np.random.default_rng(seed)
            h = np.triu(r.standard_normal((6, 5)), -1)
            beta = 2.0 + r.random()
            y, res = hessenberg_lsq(h, beta)
            e1 = np.zeros(6)
            e1[0] = beta
            y_ref, *_ = np.linalg.lstsq(h, e1, rcond=None)
            np.testing.assert_allclose(y, y_ref, atol=1e-11)
            np.testing.assert_allclose(res, np.linalg.norm(e1 - h @ y_ref),
                                       atol=1e-11)

    def test_rejects_non_hessenberg(self):
        with pytest.raises(ValueError):
            hessenberg_lsq(np.ones((4, 3)), 1.0)

    def test_incremental_residual_monotone(self):
        r = np.random.default_rng(3)
        lsq = GivensLsq(5.0)
        prev = lsq.residual
        for k in range(6):
            col = r.standard_normal(k + 2)
            res = lsq.append_column(col)
            assert res <= prev + 1e-12
            prev = res


class TestTtGmres:
    def test_identity_one_iteration(self):
        b = tt_random((5, 5, 5), (1, 3, 3, 1), seed=7)
        out = tt_gmres(tt_identity_operator((5, 5, 5)), b,
                       GmresConfig(m=5, maxit=5, epsilon=1e-10, delta=1e-14))
        assert out.iterations == 1 and out.converged
        assert tt_norm(tt_add(out.solution, tt_scale(b, -1.0))) < 1e-12

    def test_matches_dense_oracle(self):
        op = small_spd_op()
        b = tt_random((8, 8), (1, 3, 1), seed=11)
        cfg = GmresConfig(m=15, maxit=15, epsilon=1e-12, delta=1e-14)
        out = tt_gmres(op, b, cfg)
        ref_iterates = dense_mgs_gmres(tt_op_to_dense(op),
                                       tt_to_dense(b).ravel(),
                                       out.iterations)
        got = tt_to_dense(out.solution).ravel()
        ref = ref_iterates[-1]
        assert np.linalg.norm(got - ref) <= 1e-9 * np.linalg.norm(ref)

    def test_lsq_equals_true_residual_at_tight_delta(self):
        op = small_spd_op(seed=2)
        b = tt_random((8, 8), (1, 2, 1), seed=5)
        out = tt_gmres(op, b, GmresConfig(m=12, maxit=12, epsilon=1e-12,
                                          delta=1e-14))
        for rec in out.trace:
            if not np.isnan(rec.true_residual) and rec.true_residual > 1e-13:
                assert abs(rec.lsq_residual - rec.true_residual) \
                    <= 1e-9 * max(rec.true_residual, 1e-30)

    def test_lsq_residual_monotone(self):
        op = small_spd_op(seed=4)
        b = tt_random((8, 8), (1, 2, 1), seed=6)
        out = tt_gmres(op, b, GmresConfig(m=10, maxit=10, epsilon=1e-13,
                                          delta=1e-6))
        res = [r.lsq_residual for r in out.trace]
        assert all(res[i + 1] <= res[i] + 1e-12 for i in range(len(res) - 1))

    def test_trace_length_and_convergence_flag(self):
        op = small_spd_op(seed=8)
        b = tt_random((8, 8), (1, 2, 1), seed=9)
        cfg = GmresConfig(m=20, maxit=20, epsilon=1e-8, delta=1e-12)
        out = tt_gmres(op, b, cfg)
        assert len(out.trace) == out.iterations
        if out.converged:
            assert out.trace[-1].eta_Ab < cfg.epsilon

    def test_deterministic_traces(self):
        op = small_spd_op(seed=1)
        b = tt_random((8, 8), (1, 3, 1), seed=2)
        cfg = GmresConfig(m=10, maxit=10, epsilon=1e-9, delta=1e-8, seed=3)
        t1 = tt_gmres(op, b, cfg).trace
        t2 = tt_gmres(op, b, cfg).trace
        for a, c in zip(t1, t2):
            assert a == c

    def test_basis_orthogonality(self):
        op = small_spd_op(seed=12)
        b = tt_random((8, 8), (1, 3, 1), seed=13)
        delta = 1e-6
        cfg = GmresConfig(m=10, maxit=10, epsilon=1e-13, delta=delta,
                          keep_basis=True)
        out = tt_gmres(op, b, cfg)
        basis = out.meta["bases"][0]
        worst = 0.0
        for i in range(len(basis)):
            for j in range(i + 1, len(basis)):
                worst = max(worst, abs(tt_inner(basis[i], basis[j])))
        assert worst <= 100 * delta

    def test_zero_rhs(self):
        op = small_spd_op()
        out = tt_gmres(op, tt_zero((8, 8)),
                       GmresConfig(m=5, maxit=5, epsilon=1e-10, delta=1e-12))
        assert out.converged and out.iterations == 0

    def test_lucky_breakdown_single_eigenvector(self):
        g = Grid1D(9, 0.0, 1.0)
        a = tt_laplacian(3, g, negate=True)
        b = laplacian_eigen_rhs(g, [(2, 2, 2)])
        out = tt_gmres(a, b, GmresConfig(m=10, maxit=10, epsilon=1e-8,
                                         delta=1e-14))
        assert out.converged and out.iterations == 1


class TestRightGmres:
    def test_identity_preconditioner_equivalent(self):
        op = small_spd_op(seed=21)
        b = tt_random((8, 8), (1, 3, 1), seed=22)
        cfg = GmresConfig(m=5, maxit=30, epsilon=1e-9, delta=1e-12)
        plain = tt_right_gmres(op, None, b, None, cfg)
        with_id = tt_right_gmres(op, tt_identity_operator((8, 8)), b, None,
                                 cfg)
        assert plain.converged and with_id.converged
        diff = tt_add(plain.solution, tt_scale(with_id.solution, -1.0))
        assert tt_norm(diff) <= 1e-7 * tt_norm(plain.solution)

    def test_restart_converges_small_poisson(self):
        g = Grid1D(15, 0.0, 1.0)
        prob = poisson_problem(g)
        cfg = GmresConfig(m=10, maxit=200, epsilon=1e-5, delta=1e-5, seed=1)
        out = tt_right_gmres(prob.operator, None, prob.rhs, None, cfg)
        assert out.converged
        assert out.meta["cycles"] > 1
        etas = [r.eta_Ab for r in out.trace if not np.isnan(r.eta_Ab)]
        assert etas[-1] < 1e-5

    def test_stagnation_guard(self):
        # singular projector with rhs outside the range: no progress
        proj = np.eye(6)
        proj[0, 0] = 0.0
        op = tt_op_from_factors([proj, np.eye(6)])
        b = tt_random((6, 6), (1, 2, 1), seed=3)
        cfg = GmresConfig(m=3, maxit=30, epsilon=1e-12, delta=1e-12)
        out = tt_right_gmres(op, None, b, None, cfg)
        assert not out.converged
        assert out.meta["stagnated"]

    def test_preconditioned_convdiff_small(self):
        g = Grid1D(15, -1.0, 1.0)
        prob = convection_diffusion_problem(g)
        m = inv_laplacian_preconditioner(3, g, 4, 1e-2)
        cfg = GmresConfig(m=40, maxit=40, epsilon=1e-5, delta=1e-5, seed=2)
        out = tt_right_gmres(prob.operator, m, prob.rhs, None, cfg)
        assert out.converged
        assert out.iterations <= 15
        # trace exposes the preconditioned backward error
        assert not np.isnan(out.trace[-1].eta_AMb)
        assert np.isnan(out.trace[-1].eta_Ab)


class TestRelaxed:
    def test_first_delta_and_schedule(self):
        op = small_spd_op(seed=31)
        b = tt_random((8, 8), (1, 2, 1), seed=32)
        beta = tt_norm(b)
        cfg = GmresConfig(m=8, maxit=8, epsilon=1e-13, delta=1e-5)
        out = relaxed_tt_gmres(op, b, cfg)
        assert out.trace[0].delta_used == min(1.0, 1e-5 / beta)
        # delta grows as the least-squares residual shrinks
        lsq = [r.lsq_residual for r in out.trace]
        for rec, prev_res in zip(out.trace[1:], lsq[:-1]):
            assert rec.delta_used == min(1.0, 1e-5 / prev_res)

    def test_stopping_on_eta_tilde(self):
        op = small_spd_op(seed=33)
        b = tt_random((8, 8), (1, 2, 1), seed=34)
        cfg = GmresConfig(m=30, maxit=30, epsilon=1e-6, delta=1e-8)
        out = relaxed_tt_gmres(op, b, cfg)
        assert out.converged
        assert out.trace[-1].eta_tilde_b < 1e-6


class TestEstimate:
    def test_identity(self):
        op = tt_identity_operator((6, 6))
        assert abs(estimate_l2_norm(op, samples=5, seed=0) - 1.0) < 1e-12

    def test_scaled_identity(self):
        op = tt_scale(tt_identity_operator((6, 6)), -3.5)
        assert abs(estimate_l2_norm(op, samples=5, seed=0) - 3.5) < 1e-12

    def test_lower_bounds_true_norm(self):
        m = rng.standard_normal((7, 7))
        op = tt_op_from_factors([m, np.eye(7)])
        est = estimate_l2_norm(op, samples=10, seed=1)
        true = np.linalg.norm(np.kron(m, np.eye(7)), 2)
        assert est <= true + 1e-12
        assert est > 0.2 * true

    def test_chain_matches_composed(self):
        a = small_spd_op(seed=41)
        b_op = small_spd_op(seed=42)
        chain = OperatorChain([a, b_op])
        w = tt_random((8, 8), (1, 2, 1), seed=43)
        direct = tt_apply(a, tt_apply(b_op, w))
        via_chain = chain.apply(w)
        assert tt_norm(tt_add(direct, tt_scale(via_chain, -1.0))) < 1e-12


class TestConfigValidation:
    def test_bad_epsilon(self):
        with pytest.raises(ValueError):
            GmresConfig(epsilon=0.0)

    def test_bad_maxit(self):
        with pytest.raises(ValueError):
            GmresConfig(m=10, maxit=5)

    def test_bad_policy(self):
        with pytest.raises(ValueError):
            GmresConfig(rounding_policy="sometimes")
