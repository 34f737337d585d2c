import numpy as np
import pytest

from ttkrylov import (
    DenseBudgetError,
    ModeMismatchError,
    RankChainError,
    TTError,
    make_tt_operator,
    make_tt_vector,
    storage_stats,
    tt_add,
    tt_apply,
    tt_dump,
    tt_from_dense,
    tt_identity_operator,
    tt_inner,
    tt_load,
    tt_norm,
    tt_ones,
    tt_op_compose,
    tt_op_diag_slice,
    tt_op_from_factors,
    tt_op_to_dense,
    tt_random,
    tt_rank_one,
    tt_round,
    tt_scale,
    tt_slice_first_mode,
    tt_to_dense,
    tt_zero,
)

from oracles import dense_from_cores, dense_op_from_cores, kron_sum

rng = np.random.default_rng(2024)


def rand_vec(modes, ranks, seed=None):
    r = np.random.default_rng(seed) if seed is not None else rng
    return make_tt_vector(
        [r.standard_normal((ranks[k], n, ranks[k + 1]))
         for k, n in enumerate(modes)])


def rand_op(row_modes, col_modes, ranks, seed=None):
    r = np.random.default_rng(seed) if seed is not None else rng
    return make_tt_operator(
        [r.standard_normal((ranks[k], n, m, ranks[k + 1]))
         for k, (n, m) in enumerate(zip(row_modes, col_modes))])


class TestConstruction:
    def test_make_vector_shapes(self):
        x = make_tt_vector([rng.standard_normal((1, 4, 3)),
                            rng.standard_normal((3, 4, 1))])
        assert x.d == 2
        assert x.ranks == (1, 3, 1)
        assert x.modes == (4, 4)

    def test_adjacent_rank_mismatch(self):
        with pytest.raises(RankChainError):
            make_tt_vector([rng.standard_normal((1, 4, 3)),
                            rng.standard_normal((2, 4, 1))])

    def test_boundary_rank(self):
        with pytest.raises(RankChainError):
            make_tt_vector([rng.standard_normal((2, 4, 1))])

    def test_single_core(self):
        x = make_tt_vector([rng.standard_normal((1, 5, 1))])
        assert x.d == 1 and x.ranks == (1, 1)

    def test_cores_read_only(self):
        x = rand_vec((3, 3), (1, 2, 1))
        with pytest.raises(ValueError):
            x.cores[0][0, 0, 0] = 1.0


class TestFromToDense:
    def test_rank_one_separable(self):
        u, v, w = (rng.standard_normal(4) for _ in range(3))
        t = np.einsum("i,j,k->ijk", u, v, w)
        x = tt_from_dense(t, 1e-14)
        assert x.ranks == (1, 1, 1, 1)
        np.testing.assert_allclose(tt_to_dense(x), t, atol=1e-12)

    def test_zero_tensor(self):
        x = tt_from_dense(np.zeros((3, 4, 5)), 0.5)
        assert x.ranks == (1, 1, 1, 1)
        assert tt_norm(x) == 0.0

    def test_round_trip(self):
        t = rng.standard_normal((5, 5, 5))
        x = tt_from_dense(t, 1e-12)
        err = np.linalg.norm(tt_to_dense(x) - t) / np.linalg.norm(t)
        assert err < 1e-10

    def test_to_dense_matches_loop_oracle(self):
        x = rand_vec((3, 4, 5), (1, 2, 3, 1))
        np.testing.assert_allclose(tt_to_dense(x),
                                   dense_from_cores(x.cores), atol=1e-12)

    def test_d1_vector(self):
        v = rng.standard_normal(6)
        x = make_tt_vector([v.reshape(1, 6, 1)])
        np.testing.assert_allclose(tt_to_dense(x), v)

    def test_dense_budget(self, monkeypatch):
        monkeypatch.setenv("TTKRYLOV_DENSE_BUDGET", "10")
        with pytest.raises(DenseBudgetError):
            tt_to_dense(rand_vec((4, 4), (1, 2, 1)))


class TestArithmetic:
    def test_add_rank_sums(self):
        x = rand_vec((4, 4, 4), (1, 3, 2, 1))
        y = rand_vec((4, 4, 4), (1, 2, 4, 1))
        assert tt_add(x, y).ranks == (1, 5, 6, 1)

    def test_add_dense(self):
        x = rand_vec((3, 4, 5), (1, 2, 2, 1))
        y = rand_vec((3, 4, 5), (1, 3, 2, 1))
        ref = tt_to_dense(x) + tt_to_dense(y)
        err = np.linalg.norm(tt_to_dense(tt_add(x, y)) - ref)
        assert err <= 1e-13 * np.linalg.norm(ref)

    def test_add_cancellation(self):
        x = rand_vec((4, 4), (1, 3, 1))
        z = tt_add(x, tt_scale(x, -1.0))
        assert z.ranks == (1, 6, 1)
        assert tt_norm(z) < 1e-12 * tt_norm(x)

    def test_add_mode_mismatch(self):
        with pytest.raises(ModeMismatchError):
            tt_add(rand_vec((3, 3), (1, 2, 1)), rand_vec((3, 4), (1, 2, 1)))

    def test_scale(self):
        x = rand_vec((3, 4), (1, 2, 1))
        for c in (1.0, 0.0, 2.0):
            y = tt_scale(x, c)
            assert y.ranks == x.ranks
            np.testing.assert_allclose(tt_to_dense(y), c * tt_to_dense(x),
                                       atol=1e-13)

    def test_inner_matches_dense(self):
        x = rand_vec((3, 4, 5), (1, 2, 3, 1))
        y = rand_vec((3, 4, 5), (1, 3, 2, 1))
        ref = float(np.sum(tt_to_dense(x) * tt_to_dense(y)))
        assert abs(tt_inner(x, y) - ref) <= 1e-12 * max(1.0, abs(ref))

    def test_inner_orthogonal_rank_one(self):
        u = np.array([1.0, 0.0, 0.0])
        up = np.array([0.0, 1.0, 0.0])
        w = rng.standard_normal(3)
        x = tt_rank_one([u, w, w])
        y = tt_rank_one([up, w, w])
        assert abs(tt_inner(x, y)) < 1e-13

    def test_inner_positivity(self):
        x = rand_vec((3, 3, 3), (1, 2, 2, 1))
        assert tt_inner(x, x) > 0
        assert tt_inner(tt_zero((3, 3, 3)), tt_zero((3, 3, 3))) == 0.0


class TestNorm:
    def test_zero(self):
        assert tt_norm(tt_zero((3, 4))) == 0.0

    def test_all_ones(self):
        n = 5
        assert abs(tt_norm(tt_ones((n, n, n))) - n**1.5) < 1e-12

    def test_matches_dense(self):
        x = rand_vec((4, 5, 6), (1, 3, 2, 1))
        ref = np.linalg.norm(tt_to_dense(x))
        assert abs(tt_norm(x) - ref) <= 1e-12 * ref

    def test_cancellation_accuracy(self):
        # norm of a tiny difference of two large, nearly equal tensors
        x = rand_vec((5, 5, 5), (1, 3, 3, 1), seed=1)
        y = tt_add(x, tt_scale(rand_vec((5, 5, 5), (1, 1, 1, 1), seed=2),
                               1e-9))
        z = tt_add(y, tt_scale(x, -1.0))
        ref = np.linalg.norm(tt_to_dense(z))
        assert abs(tt_norm(z) - ref) <= 1e-6 * ref


class TestRound:
    def test_doubled_ranks_recover(self):
        x = rand_vec((4, 4, 4), (1, 3, 2, 1))
        z = tt_round(tt_add(x, x), 1e-14)
        assert all(r <= s for r, s in zip(z.ranks, x.ranks))
        np.testing.assert_allclose(tt_to_dense(z), 2 * tt_to_dense(x),
                                   rtol=1e-12, atol=1e-12)

    def test_zero_delta_lossless(self):
        x = rand_vec((4, 4, 4), (1, 2, 2, 1))
        z = tt_round(x, 0.0)
        assert all(r <= s for r, s in zip(z.ranks, x.ranks))
        np.testing.assert_allclose(tt_to_dense(z), tt_to_dense(x),
                                   rtol=1e-13, atol=1e-13)

    def test_coarse_round_error_bound(self):
        x = rand_vec((5, 5, 5), (1, 8, 8, 1))
        nrm = tt_norm(x)
        for delta in (1e-1, 1e-3, 1e-8, 0.5):
            z = tt_round(x, delta)
            err = np.linalg.norm(tt_to_dense(z) - tt_to_dense(x))
            assert err <= delta * nrm * (1 + 1e-12)
            assert all(r <= s for r, s in zip(z.ranks, x.ranks))

    def test_zero_tensor(self):
        z = tt_round(tt_zero((3, 3, 3)), 1e-3)
        assert z.ranks == (1, 1, 1, 1)

    def test_operator_round(self):
        a = rand_op((3, 3, 3), (3, 3, 3), (1, 3, 3, 1))
        b = tt_round(tt_add(a, a), 1e-13)
        assert all(r <= s for r, s in zip(b.ranks, a.ranks))
        np.testing.assert_allclose(tt_op_to_dense(b), 2 * tt_op_to_dense(a),
                                   rtol=1e-11, atol=1e-11)


class TestOperator:
    def test_apply_rank_product(self):
        a = rand_op((4, 4, 4), (4, 4, 4), (1, 2, 2, 1))
        x = rand_vec((4, 4, 4), (1, 3, 4, 1))
        assert tt_apply(a, x).ranks == (1, 6, 8, 1)

    def test_identity_apply(self):
        x = rand_vec((3, 4, 5), (1, 2, 2, 1))
        y = tt_apply(tt_identity_operator((3, 4, 5)), x)
        np.testing.assert_allclose(tt_to_dense(y), tt_to_dense(x),
                                   atol=1e-13)

    def test_apply_matches_dense(self):
        a = rand_op((3, 4, 5), (5, 4, 3), (1, 2, 3, 1))
        x = rand_vec((5, 4, 3), (1, 2, 2, 1))
        ref = tt_op_to_dense(a) @ tt_to_dense(x).ravel()
        got = tt_to_dense(tt_apply(a, x)).ravel()
        assert np.linalg.norm(got - ref) <= 1e-12 * np.linalg.norm(ref)

    def test_apply_mode_mismatch(self):
        a = rand_op((3, 3), (4, 4), (1, 2, 1))
        with pytest.raises(ModeMismatchError):
            tt_apply(a, rand_vec((3, 3), (1, 2, 1)))

    def test_compose_rank_product(self):
        a = rand_op((4, 4), (4, 4), (1, 2, 1))
        b = rand_op((4, 4), (4, 4), (1, 3, 1))
        assert tt_op_compose(a, b).ranks == (1, 6, 1)

    def test_compose_identity(self):
        a = rand_op((3, 4), (4, 3), (1, 2, 1))
        c = tt_op_compose(a, tt_identity_operator((4, 3)))
        np.testing.assert_allclose(tt_op_to_dense(c), tt_op_to_dense(a),
                                   atol=1e-12)

    def test_compose_matches_dense_square(self):
        # d=1 operator squared equals the dense matrix square
        m = rng.standard_normal((5, 5))
        a = tt_op_from_factors([m])
        c = tt_op_compose(a, a)
        np.testing.assert_allclose(tt_op_to_dense(c), m @ m, atol=1e-12)

    def test_op_dense_matches_loop_oracle(self):
        a = rand_op((3, 2, 3), (2, 3, 2), (1, 2, 2, 1))
        np.testing.assert_allclose(tt_op_to_dense(a),
                                   dense_op_from_cores(a.cores), atol=1e-12)


class TestRandom:
    def test_deterministic(self):
        x = tt_random((4, 4, 4), (1, 3, 3, 1), seed=42)
        y = tt_random((4, 4, 4), (1, 3, 3, 1), seed=42)
        for cx, cy in zip(x.cores, y.cores):
            np.testing.assert_array_equal(cx, cy)

    def test_unit_norm(self):
        x = tt_random((4, 5, 6), (1, 2, 3, 1), seed=0)
        assert abs(tt_norm(x) - 1.0) < 1e-12

    def test_distinct_seeds(self):
        x = tt_random((4, 4), (1, 2, 1), seed=0)
        y = tt_random((4, 4), (1, 2, 1), seed=1)
        assert tt_norm(tt_add(x, tt_scale(y, -1.0))) > 1e-3

    def test_invalid_rank_chain(self):
        with pytest.raises(RankChainError):
            tt_random((4, 4), (1, 2), seed=0)
        with pytest.raises(RankChainError):
            tt_random((4, 4), (2, 2, 1), seed=0)


class TestSlicing:
    def test_matrix_row(self):
        x = rand_vec((4, 5), (1, 3, 1))
        mat = tt_to_dense(x)
        for ell in range(1, 5):
            row = tt_to_dense(tt_slice_first_mode(x, ell))
            np.testing.assert_allclose(row, mat[ell - 1], atol=1e-13)

    def test_norm_decomposition(self):
        x = rand_vec((5, 4, 4), (1, 3, 2, 1))
        total = sum(tt_norm(tt_slice_first_mode(x, ell))**2
                    for ell in range(1, 6))
        assert abs(total - tt_norm(x)**2) <= 1e-11 * tt_norm(x)**2

    def test_out_of_range(self):
        x = rand_vec((4, 4), (1, 2, 1))
        with pytest.raises(IndexError):
            tt_slice_first_mode(x, 0)
        with pytest.raises(IndexError):
            tt_slice_first_mode(x, 5)

    def test_op_diag_slice_identity_kron(self):
        from ttkrylov.operators import kron_leading_identity
        c = rand_op((4, 4), (4, 4), (1, 2, 1))
        a = kron_leading_identity(3, c)
        for ell in (1, 2, 3):
            s = tt_op_diag_slice(a, ell)
            np.testing.assert_allclose(tt_op_to_dense(s), tt_op_to_dense(c),
                                       atol=1e-13)

    def test_op_diag_slice_rejects_dense_first_core(self):
        a = rand_op((3, 3, 4), (3, 3, 4), (1, 2, 2, 1))
        with pytest.raises(TTError):
            tt_op_diag_slice(a, 1)


class TestStorage:
    def test_rank_one_counts(self):
        x = rand_vec((4, 4, 4), (1, 1, 1, 1))
        st = storage_stats(x)
        assert st.tt_entries == 12
        assert st.dense_entries == 64
        assert st.compression_ratio == 12 / 64

    def test_hand_sum(self):
        x = rand_vec((5, 6, 7), (1, 3, 2, 1))
        st = storage_stats(x)
        assert st.tt_entries == 1 * 5 * 3 + 3 * 6 * 2 + 2 * 7 * 1
        assert st.max_rank == 3

    def test_operator_dense_count(self):
        a = rand_op((3, 4), (5, 2), (1, 2, 1))
        st = storage_stats(a)
        assert st.dense_entries == (3 * 5) * (4 * 2)


class TestDump:
    def test_round_trip(self, tmp_path):
        x = rand_vec((3, 4, 2), (1, 2, 3, 1))
        path = tmp_path / "x.tt"
        tt_dump(x, path)
        y = tt_load(path)
        assert y.ranks == x.ranks
        for cx, cy in zip(x.cores, y.cores):
            np.testing.assert_array_equal(cx, cy)

    def test_golden_file(self, tmp_path):
        # format regression: d, modes, ranks, then row-major cores
        x = make_tt_vector([np.arange(6.0).reshape(1, 3, 2),
                            np.arange(8.0).reshape(2, 4, 1)])
        path = tmp_path / "g.tt"
        tt_dump(x, path)
        lines = path.read_text().splitlines()
        assert lines[0] == "2"
        assert lines[1] == "3 4"
        assert lines[2] == "1 2 1"
        assert lines[3].split() == [f"{v:.17g}" for v in np.arange(6.0)]
