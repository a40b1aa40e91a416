"""Tests for the shared linear-algebra kernels."""

import numpy as np
import numpy.testing as nt
import pytest
import scipy.sparse

from thbox.numerics import (
    NonSPDError,
    SolveError,
    assemble_csr,
    cholesky_solve,
    sparse_solve,
    svd_rank,
)


class TestCholeskySolve:
    def test_known_2x2(self):
        a = np.array([[4.0, 2.0], [2.0, 3.0]])
        b = np.array([2.0, 1.0])
        # inverse is [[3,-2],[-2,4]]/8, so x = (0.5, 0.0)
        x = cholesky_solve(a, b)
        nt.assert_allclose(x, [0.5, 0.0], atol=1e-14)

    def test_multiple_rhs(self):
        rng = np.random.default_rng(3)
        g = rng.random((5, 5))
        a = g @ g.T + 5 * np.eye(5)
        b = rng.random((5, 3))
        x = cholesky_solve(a, b)
        assert x.shape == (5, 3)
        nt.assert_allclose(a @ x, b, atol=1e-12)

    def test_indefinite_raises(self):
        a = np.array([[1.0, 2.0], [2.0, 1.0]])  # eigenvalues 3 and -1
        with pytest.raises(NonSPDError):
            cholesky_solve(a, np.ones(2))

    def test_near_singular_raises(self):
        a = np.array([[1.0, 1.0], [1.0, 1.0 + 1e-16]])
        with pytest.raises(NonSPDError):
            cholesky_solve(a, np.ones(2))

    def test_empty(self):
        x = cholesky_solve(np.zeros((0, 0)), np.zeros(0))
        assert x.shape == (0,)

    def test_non_square_raises(self):
        with pytest.raises(ValueError):
            cholesky_solve(np.ones((2, 3)), np.ones(2))


class TestSvdRank:
    def test_constructed_rank(self):
        rng = np.random.default_rng(7)
        u, _ = np.linalg.qr(rng.random((6, 6)))
        v, _ = np.linalg.qr(rng.random((4, 4)))
        s = np.zeros((6, 4))
        s[0, 0], s[1, 1], s[2, 2] = 1.0, 1e-3, 1e-12
        a = u @ s @ v
        info = svd_rank(a, rel_tol=1e-10)
        assert info.rank == 2
        assert info.nullity == 2  # relative to min(m, n)
        nt.assert_allclose(info.sigma_max, 1.0, rtol=1e-12)
        assert info.singular_values_gap > 1e6

    def test_full_rank(self):
        a = np.eye(5) * 3.0
        info = svd_rank(a)
        assert info.rank == 5
        assert info.nullity == 0
        assert info.singular_values_gap == np.inf

    def test_zero_and_empty(self):
        assert svd_rank(np.zeros((3, 2))).rank == 0
        assert svd_rank(np.zeros((3, 2))).nullity == 2
        assert svd_rank(np.zeros((0, 4))).rank == 0
        assert svd_rank(np.zeros((0, 4))).nullity == 4


class TestAssembleCsr:
    def test_matches_coo_and_sums_duplicates(self):
        rows = [0, 1, 0, 2, 0]
        cols = [1, 1, 1, 0, 2]
        vals = [1.0, 2.0, 3.0, 4.0, 5.0]
        a = assemble_csr(rows, cols, vals, (3, 3))
        dense = np.array([[0, 4, 5], [0, 2, 0], [4, 0, 0]], dtype=float)
        nt.assert_array_equal(a.toarray(), dense)

    def test_permutation_bit_identical(self):
        rng = np.random.default_rng(11)
        n = 400
        rows = rng.integers(0, 20, n)
        cols = rng.integers(0, 20, n)
        vals = rng.standard_normal(n)
        ref = assemble_csr(rows, cols, vals, (20, 20))
        for seed in range(4):
            perm = np.random.default_rng(seed).permutation(n)
            other = assemble_csr(rows[perm], cols[perm], vals[perm], (20, 20))
            nt.assert_array_equal(ref.data, other.data)
            nt.assert_array_equal(ref.indices, other.indices)
            nt.assert_array_equal(ref.indptr, other.indptr)


class TestSparseSolve:
    @staticmethod
    def _laplacian(n):
        main = 2.0 * np.ones(n)
        off = -1.0 * np.ones(n - 1)
        return scipy.sparse.diags([off, main, off], [-1, 0, 1]).tocsr()

    def test_dense_path(self):
        a = self._laplacian(50)
        b = np.arange(50, dtype=float)
        x = sparse_solve(a, b)
        nt.assert_allclose(a @ x, b, atol=1e-9)

    def test_sparse_path(self):
        a = self._laplacian(2500)
        b = np.ones(2500)
        x = sparse_solve(a, b)
        nt.assert_allclose(a @ x, b, atol=1e-7)

    def test_singular_raises(self):
        a = scipy.sparse.csr_matrix(np.zeros((3, 3)))
        with pytest.raises(SolveError):
            sparse_solve(a, np.ones(3))

    def test_requires_sparse(self):
        with pytest.raises(TypeError):
            sparse_solve(np.eye(3), np.ones(3))
