import numpy as np
import pytest

from kamforge.block_matrix import (BlockMatrix, U_SITE, apply, from_complex,
                                   m_norm, mb_norm, multiply, nf_project,
                                   op_norm, pi_project, to_complex)
from kamforge.errors import InvalidInputError
from kamforge.lattice_blocks import LatticeModel, WeightParams, decompose

J = np.array([[0.0, -1.0], [1.0, 0.0]])


@pytest.fixture
def model():
    return LatticeModel(2, ((1, 0),), ((0, 1),), 3.0)


def random_bm(model, rng, n, real=False):
    sites = model.normal_sites
    ent = {}
    for _ in range(n):
        a = sites[rng.integers(len(sites))]
        b = sites[rng.integers(len(sites))]
        blk = rng.normal(size=(2, 2))
        if not real:
            blk = blk + 1j * rng.normal(size=(2, 2))
        ent[(a, b)] = blk
    return BlockMatrix(model, ent)


class TestNorms:
    def test_zero(self, model):
        assert m_norm(BlockMatrix(model), WeightParams()) == 0.0

    def test_identity(self, model):
        p = WeightParams(0.5, 1.0, 0.0, 4.0)
        assert m_norm(BlockMatrix.identity(model), p) == pytest.approx(4.0)

    def test_single_block(self, model):
        s = model.normal_sites
        A = BlockMatrix(model, {(s[0], s[3]): [[0, 1], [0, 0]]})
        assert m_norm(A, WeightParams()) == pytest.approx(1.0)

    def test_transpose_conj_invariance(self, model, rng):
        p = WeightParams(0.2, 1.0, 0.5, 2.0)
        for _ in range(10):
            A = random_bm(model, rng, 15)
            n = m_norm(A, p)
            assert m_norm(A.transpose(), p) == pytest.approx(n, rel=1e-14)
            assert m_norm(A.conj(), p) == pytest.approx(n, rel=1e-14)

    def test_mb_dominance(self, model, rng):
        p = WeightParams(0.2, 2.0, 0.0, 1.0)
        for _ in range(10):
            A = random_bm(model, rng, 15)
            assert op_norm(A, 0.2, 2.0) <= m_norm(A, p.with_(kappa_decay=0.0)) * (1 + 1e-12)
            r = mb_norm(A, p, 2.0)
            assert r.mb_norm >= r.op_norm


class TestMultiply:
    def test_unit(self, model, rng):
        A = random_bm(model, rng, 10)
        assert multiply(A, BlockMatrix.identity(model)).allclose(A)

    def test_dense_oracle(self, model, rng):
        A, B = random_bm(model, rng, 20), random_bm(model, rng, 20)
        C = multiply(A, B)
        assert np.abs(C.to_dense() - A.to_dense() @ B.to_dense()).max() <= 1e-12

    def test_associative(self, model, rng):
        A, B, C = (random_bm(model, rng, 12) for _ in range(3))
        L = multiply(multiply(A, B), C).to_dense()
        R = multiply(A, multiply(B, C)).to_dense()
        assert np.abs(L - R).max() <= 1e-12 * max(1, np.abs(L).max())

    def test_norm_bound(self, model, rng):
        p = WeightParams(0.3, 2.0, 1.0, 16.0)
        for _ in range(200):
            A, B = random_bm(model, rng, 8), random_bm(model, rng, 8)
            lhs = m_norm(multiply(A, B), p)
            assert lhs <= m_norm(A, p.with_(kappa_decay=0.0)) * m_norm(B, p) * (1 + 1e-12)

    def test_model_mismatch(self, model):
        other = LatticeModel(2, (), (), 2.0)
        with pytest.raises(InvalidInputError):
            multiply(BlockMatrix(model), BlockMatrix(other))


class TestApply:
    def test_identity(self, model, rng):
        z = rng.normal(size=(model.n_normal, 2))
        assert np.allclose(apply(BlockMatrix.identity(model), z), z)

    def test_single_block(self, model):
        s = model.normal_sites
        blk = np.array([[1.0, 2.0], [3.0, 4.0]])
        out = apply(BlockMatrix(model, {(s[1], s[2]): blk}), {s[2]: [1.0, -1.0]})
        assert list(out) == [s[1]]
        assert np.allclose(out[s[1]], blk @ [1.0, -1.0])

    def test_weight_range(self, model):
        with pytest.raises(InvalidInputError):
            apply(BlockMatrix(model), {}, gamma_tilde=(0.5, 0.0), gamma=(0.2, 1.0))


class TestNormalForm:
    def test_pi_projection(self):
        m = np.array([[1.0, 2.0], [3.0, 4.0]])
        assert np.allclose(pi_project(m), 2.5 * np.eye(2) + 0.5 * J)
        assert np.allclose(pi_project(J), J)
        assert np.allclose(pi_project(np.eye(2)), np.eye(2))

    def test_projection_invariants_and_idempotence(self, model, rng):
        d = decompose(model, 2.0)
        for _ in range(10):
            nf = nf_project(random_bm(model, rng, 30), d)
            assert nf.is_valid()
            again = nf_project(nf.base, d)
            assert again.base.allclose(nf.base, atol=0)

    def test_projection_contracts_blocks(self, model, rng):
        d = decompose(model, 2.0)
        A = random_bm(model, rng, 30, real=True)
        B = random_bm(model, rng, 30, real=True)
        PA, PB = nf_project(A, d).base, nf_project(B, d).base
        diff = np.linalg.norm(PA.to_dense() - PB.to_dense())
        assert diff <= np.linalg.norm(A.to_dense() - B.to_dense()) + 1e-12


class TestComplexCoordinates:
    def test_nf_block(self, model):
        s = model.lambda_inf[0]
        c, sj = 0.7, -0.3
        B = to_complex(BlockMatrix(model, {(s, s): c * np.eye(2) + sj * J}))
        blk = B.entries[(s, s)]
        assert abs(blk[0, 0]) < 1e-15 and abs(blk[1, 1]) < 1e-15
        assert blk[0, 1] == pytest.approx(c - 1j * sj, abs=1e-15)

    def test_round_trip(self, model, rng):
        worst = 0.0
        for _ in range(50):
            A = random_bm(model, rng, 10)
            R = from_complex(to_complex(A))
            worst = max(worst, np.abs(R.to_dense() - A.to_dense()).max())
        assert worst <= 1e-13

    def test_F_untouched(self, model):
        f = model.setF[0]
        blk = np.array([[1.0, 2.0], [2.0, 5.0]])
        B = to_complex(BlockMatrix(model, {(f, f): blk}))
        assert np.allclose(B.entries[(f, f)], blk)

    def test_U_maps_variables(self):
        p, q = 0.3, -1.2
        xi, eta = (p + 1j * q) / np.sqrt(2), (p - 1j * q) / np.sqrt(2)
        assert np.allclose(U_SITE @ [xi, eta], [p, q])
