"""Linear algebra wrappers and SNP1 format.

Oracles are deliberately independent implementations: an eigendecomposition
SVD for singular values, a dense Cholesky for sparse solves, a cofactor
expansion for small dense solves.
"""
import struct

import numpy as np
import pytest
import scipy.linalg as sla
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from damrom import numerics


# --- oracles -----------------------------------------------------------------

def svd_sigma_oracle(M):
    """Singular values via the eigendecomposition of M^T M (independent path)."""
    w = np.linalg.eigvalsh(M.T @ M)
    w = np.clip(w, 0.0, None)
    return np.sqrt(w)[::-1]


def cofactor_solve_oracle(A, b):
    """Cramer's rule via cofactor determinants; fine for n <= 8."""

    def det(M):
        n = M.shape[0]
        if n == 1:
            return M[0, 0]
        total = 0.0
        for j in range(n):
            minor = np.delete(np.delete(M, 0, axis=0), j, axis=1)
            total += ((-1.0) ** j) * M[0, j] * det(minor)
        return total

    dA = det(A)
    x = np.empty(A.shape[0])
    for i in range(A.shape[0]):
        Ai = A.copy()
        Ai[:, i] = b
        x[i] = det(Ai) / dA
    return x


def random_spd_sparse(rng, n, density=0.08):
    B = sp.random(n, n, density=density, random_state=np.random.RandomState(rng.integers(2**31)))
    A = (B @ B.T).toarray() + n * np.eye(n)
    return sp.csr_matrix(A), A


# --- thin SVD ------------------------------------------------------------------

class TestThinSvd:
    def test_reconstruction_and_orthonormality(self):
        rng = np.random.default_rng(42)
        for shape in [(40, 12), (200, 7), (9, 9), (6, 30)]:
            M = rng.standard_normal(shape)
            U, s, Vt = numerics.thin_svd(M)
            r = min(shape)
            assert U.shape == (shape[0], r) and Vt.shape == (r, shape[1])
            np.testing.assert_allclose(U @ np.diag(s) @ Vt, M, atol=1e-10 * s[0])
            np.testing.assert_allclose(U.T @ U, np.eye(r), atol=1e-12)
            np.testing.assert_allclose(Vt @ Vt.T, np.eye(r), atol=1e-12)

    def test_sigma_against_eigen_oracle(self):
        rng = np.random.default_rng(7)
        M = rng.standard_normal((60, 15))
        _, s, _ = numerics.thin_svd(M)
        np.testing.assert_allclose(s, svd_sigma_oracle(M), rtol=1e-8)

    @settings(max_examples=25, deadline=None)
    @given(
        rows=st.integers(2, 30),
        cols=st.integers(2, 12),
        seed=st.integers(0, 2**31 - 1),
    )
    def test_sigma_sorted_nonincreasing(self, rows, cols, seed):
        M = np.random.default_rng(seed).standard_normal((rows, cols))
        _, s, _ = numerics.thin_svd(M)
        assert np.all(np.diff(s) <= 1e-12 * max(s[0], 1.0))

    def test_deterministic_repeat(self):
        M = np.random.default_rng(3).standard_normal((25, 10))
        U1, s1, V1 = numerics.thin_svd(M)
        U2, s2, V2 = numerics.thin_svd(M.copy())
        assert np.array_equal(U1, U2) and np.array_equal(s1, s2) and np.array_equal(V1, V2)

    def test_rejects_non_finite(self):
        M = np.ones((4, 3))
        M[2, 1] = np.nan
        with pytest.raises(ValueError, match="non-finite"):
            numerics.thin_svd(M)


# --- dense and sparse solves ----------------------------------------------------

class TestSolves:
    def test_dense_against_cofactor_oracle(self):
        rng = np.random.default_rng(11)
        for n in range(2, 9):
            A = rng.standard_normal((n, n)) + n * np.eye(n)
            b = rng.standard_normal(n)
            x = numerics.dense_solve(A, b)
            np.testing.assert_allclose(x, cofactor_solve_oracle(A, b), rtol=1e-9, atol=1e-12)

    @pytest.mark.filterwarnings("ignore::scipy.linalg.LinAlgWarning")
    def test_dense_singular_carries_pivot_index(self):
        A = np.array([[1.0, 2.0], [2.0, 4.0]])
        with pytest.raises(numerics.SingularSystemError) as exc:
            numerics.dense_solve(A, np.ones(2))
        assert exc.value.pivot_index == 1
        assert "singular system" in str(exc.value)

    def test_sparse_against_cholesky_oracle(self):
        rng = np.random.default_rng(5)
        for _ in range(50):
            A, Ad = random_spd_sparse(rng, 40)
            b = rng.standard_normal(40)
            x = numerics.sparse_solve(A, b)
            c = sla.cho_factor(Ad)
            np.testing.assert_allclose(x, sla.cho_solve(c, b), rtol=1e-9, atol=1e-11)

    def test_many_random_sparse_residuals(self):
        # residual bound over a large batch of SPD systems
        rng = np.random.default_rng(17)
        for _ in range(1000):
            n = int(rng.integers(5, 30))
            A, _ = random_spd_sparse(rng, n, density=0.15)
            b = rng.standard_normal(n)
            x = numerics.sparse_solve(A, b)
            assert np.linalg.norm(A @ x - b) <= 1e-9 * (1.0 + np.linalg.norm(b))

    def test_factor_once_solve_twice(self):
        rng = np.random.default_rng(23)
        A, Ad = random_spd_sparse(rng, 30)
        f = numerics.factorize(A)
        b1, b2 = rng.standard_normal(30), rng.standard_normal(30)
        np.testing.assert_allclose(Ad @ f.solve(b1), b1, atol=1e-9)
        np.testing.assert_allclose(Ad @ f.solve(b2), b2, atol=1e-9)

    def test_sparse_singular_carries_pivot_index(self):
        A = sp.csr_matrix(np.array([[1.0, 2.0], [2.0, 4.0]]))
        with pytest.raises(numerics.SingularSystemError) as exc:
            numerics.sparse_solve(A, np.ones(2))
        assert exc.value.pivot_index == 1

    def test_rejects_non_finite_rhs(self):
        A = sp.eye(3, format="csr")
        with pytest.raises(ValueError, match="non-finite"):
            numerics.factorize(A).solve(np.array([1.0, np.inf, 0.0]))


# --- SNP1 file format ------------------------------------------------------------

class TestSnp1:
    def test_roundtrip_exact(self, tmp_path):
        rng = np.random.default_rng(1)
        M = rng.standard_normal((17, 5))
        p = tmp_path / "m.snp"
        numerics.write_snp1(p, M)
        assert np.array_equal(numerics.read_snp1(p), M)

    def test_golden_bytes_column_major(self, tmp_path):
        # hand-assembled file for M = [[1,2,3],[4,5,6]]
        M = np.array([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]])
        p = tmp_path / "m.snp"
        numerics.write_snp1(p, M)
        raw = p.read_bytes()
        expect = struct.pack("<4sII", b"SNP1", 2, 3)
        for v in [1.0, 4.0, 2.0, 5.0, 3.0, 6.0]:  # column major
            expect += struct.pack("<d", v)
        assert raw == expect

    def test_vector_promoted_to_column(self, tmp_path):
        p = tmp_path / "v.snp"
        numerics.write_snp1(p, np.arange(4.0))
        out = numerics.read_snp1(p)
        assert out.shape == (4, 1)

    def test_bad_magic_and_truncation(self, tmp_path):
        p = tmp_path / "bad.snp"
        p.write_bytes(b"NOPE" + b"\x00" * 20)
        with pytest.raises(ValueError, match="not an SNP1 file"):
            numerics.read_snp1(p)
        good = tmp_path / "good.snp"
        numerics.write_snp1(good, np.ones((3, 3)))
        trunc = tmp_path / "trunc.snp"
        trunc.write_bytes(good.read_bytes()[:-8])
        with pytest.raises(ValueError, match="size mismatch"):
            numerics.read_snp1(trunc)

    def test_write_rejects_non_finite(self, tmp_path):
        with pytest.raises(ValueError, match="non-finite"):
            numerics.write_snp1(tmp_path / "x.snp", np.array([[1.0, np.nan]]))


class TestContentHash:
    def test_stable_and_sensitive(self):
        a = np.arange(6.0).reshape(2, 3)
        h1 = numerics.content_hash(a, "tag")
        h2 = numerics.content_hash(a.copy(), "tag")
        assert h1 == h2
        assert h1 != numerics.content_hash(a + 1e-12, "tag")
        assert h1 != numerics.content_hash(a.reshape(3, 2), "tag")
