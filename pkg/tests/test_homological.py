import math

import numpy as np
import pytest

from jets import random_jet
from kamforge.errors import SmallDivisorExclusion
from kamforge.homological import (mode_residuals, nonlinear_residual,
                                  normal_form_jet, solve_linear, solve_matrix,
                                  solve_nonlinear, solve_scalar, solve_vector)
from kamforge.kam_engine import sample_real_points
from kamforge.lattice_blocks import INF_DELTA, LatticeModel, decompose
from kamforge.phase_functions import PhaseFunction, bracket, get_layout
from kamforge.small_divisors import NormalFormData

MODEL = LatticeModel(1, ((1,),), (), 2.0)
OMEGA = 0.77
N_THETA = 8


def lam(s):
    return math.sqrt(s[0] ** 4 + 1.0)


def nf_data(omega=OMEGA):
    A = np.diag(np.repeat([lam(s) for s in MODEL.normal_sites], 2))
    return NormalFormData(MODEL, np.array([omega]), A)


@pytest.fixture
def setup():
    return nf_data(), decompose(MODEL, INF_DELTA)


def coeff_array(shape_tail, modes):
    lay = get_layout(1, N_THETA)
    arr = np.zeros((lay.M,) + shape_tail, complex)
    for k, v in modes.items():
        arr[lay.index_of((k,))] = v
    return arr


class TestScalar:
    def test_cosine(self):
        fr = coeff_array((1,), {1: 0.5, -1: 0.5})
        f0 = np.zeros(fr.shape[0], complex)
        S0, Sr, m0, mr, R0, Rr = solve_scalar(f0, fr, [1.0], 1e-3, 4, 1)
        want = coeff_array((1,), {1: -0.5j, -1: 0.5j})   # sin(theta)
        assert np.allclose(Sr, want, atol=1e-15)
        assert mr[0] == 0 and np.abs(Rr).max() == 0

    def test_constant(self):
        f0 = coeff_array((), {0: 2.5})
        S0, _, m0, _, R0, _ = solve_scalar(f0, np.zeros((f0.shape[0], 1)),
                                           [1.0], 1e-3, 4, 1)
        assert m0 == 2.5 and np.abs(S0).max() == 0 and np.abs(R0).max() == 0

    def test_pure_truncation(self):
        f0 = coeff_array((), {5: 1.0, -5: 1.0})
        S0, _, _, _, R0, _ = solve_scalar(f0, np.zeros((f0.shape[0], 1)),
                                          [1.0], 1e-3, 4, 1)
        assert np.abs(S0).max() == 0 and np.allclose(R0, f0)

    def test_exclusion(self):
        f0 = coeff_array((), {1: 1.0, -1: 1.0})
        with pytest.raises(SmallDivisorExclusion) as exc:
            solve_scalar(f0, np.zeros((f0.shape[0], 1)), [1e-5], 1e-3, 4, 1)
        assert tuple(exc.value.k) == (1,)


class TestVector:
    def test_zero(self, setup):
        nf, d = setup
        Sw, Rw = solve_vector(np.zeros((get_layout(1, N_THETA).M, 8), complex),
                              nf, 1e-3, 4, d)
        assert np.abs(Sw).max() == 0 and np.abs(Rw).max() == 0

    def test_singleton_divisor(self, setup):
        nf, d = setup
        s = (0,)
        i = MODEL.site_index[s]
        fw = coeff_array((8,), {})
        lay = get_layout(1, N_THETA)
        fw[lay.index_of((2,)), 2 * i] = 1.0
        fw[lay.index_of((-2,)), 2 * i] = 1.0
        Sw, Rw = solve_vector(fw, nf, 1e-3, 4, d)
        U, _ = nf._transforms()
        Fz = U.T @ fw[lay.index_of((2,))]
        Sz = U.T @ Sw[lay.index_of((2,))]
        c = 2 * OMEGA
        got = sorted(np.abs(Sz[2 * i:2 * i + 2]) / np.abs(Fz[2 * i:2 * i + 2]))
        want = sorted([1 / abs(c + lam(s)), 1 / abs(c - lam(s))])
        assert np.allclose(got, want, rtol=1e-13)

    def test_zero_mode_bounded(self, setup):
        nf, d = setup
        rng = np.random.default_rng(3)
        fw = coeff_array((8,), {0: rng.normal(size=8)})
        Sw, _ = solve_vector(fw, nf, 1e-3, 4, d)
        cmin = min(lam(s) for s in MODEL.normal_sites)
        z = get_layout(1, N_THETA).zero_index
        assert np.linalg.norm(Sw[z]) <= np.linalg.norm(fw[z]) / cmin * (1 + 1e-12)


class TestMatrix:
    def test_resonant_zero_mode_goes_to_B(self, setup):
        nf, d = setup
        i = MODEL.site_index[(2,)]
        j = MODEL.site_index[(-2,)]
        M = np.zeros((8, 8))
        for a in (i, j):
            M[2 * a, 2 * a] = M[2 * a + 1, 2 * a + 1] = 0.3
        M[2 * i, 2 * j] = M[2 * j, 2 * i] = 0.1
        M[2 * i + 1, 2 * j + 1] = M[2 * j + 1, 2 * i + 1] = 0.1
        fww = coeff_array((8, 8), {0: M})
        S, B, R = solve_matrix(fww, nf, 1e-3, 4, INF_DELTA, d)
        assert np.abs(S).max() <= 1e-15
        assert np.allclose(B, M, atol=1e-15)
        assert np.abs(R).max() <= 1e-15

    def test_commuting_pair(self, setup):
        nf, d = setup
        a, b = MODEL.site_index[(0,)], MODEL.site_index[(2,)]
        lay = get_layout(1, N_THETA)
        fww = coeff_array((8, 8), {})
        for k in (1, -1):
            m = lay.index_of((k,))
            fww[m, 2 * a, 2 * b] = fww[m, 2 * b, 2 * a] = 1.0
        S, _, _ = solve_matrix(fww, nf, 1e-3, 4, INF_DELTA, d)
        U, _ = nf._transforms()
        m = lay.index_of((1,))
        Fz, Sz = U.T @ fww[m] @ U, U.T @ S[m] @ U
        blk = np.ix_([2 * a, 2 * a + 1], [2 * b, 2 * b + 1])
        ratios = sorted(set(np.round((np.abs(Sz[blk]) / np.abs(Fz[blk])).ravel(), 12)))
        la, lb = lam((0,)), lam((2,))
        # each entry sees <k,omega> plus or minus the two frequencies;
        # symmetrisation averages (a,b) with (b,a), which have the same divisor
        want = sorted(set(np.round([1 / abs(OMEGA + s1 * la + s2 * lb)
                                    for s1 in (1, -1) for s2 in (1, -1)], 12)))
        assert set(ratios) <= set(want) and len(ratios) >= 2

    def test_beyond_band_goes_to_R(self):
        model = LatticeModel(1, (), (), 6.0)
        A = np.diag(np.repeat([lam(s) for s in model.normal_sites], 2))
        nf = NormalFormData(model, np.zeros(0), A)
        d = decompose(model, INF_DELTA)
        lay = get_layout(0, 0)
        i, j = model.site_index[(1,)], model.site_index[(6,)]
        F = np.zeros((lay.M, 2 * model.n_normal, 2 * model.n_normal), complex)
        F[0, 2 * i, 2 * j] = F[0, 2 * j, 2 * i] = 1.0
        S, B, R = solve_matrix(F, nf, 1e-3, 0, 2.0, d)
        assert np.abs(S).max() == 0 and np.allclose(R, F)


class TestLinearAndNonlinear:
    def test_mode_residual_and_structure(self, setup):
        nf, d = setup
        rng = np.random.default_rng(11)
        f = random_jet(MODEL, N_THETA, rng, support=3)
        sol = solve_linear(f, nf, 1e-3, 2 * N_THETA, INF_DELTA, d)
        assert mode_residuals(nf, f, sol) <= 1e-12
        assert sol.S.reality_defect() <= 1e-15 and sol.R.reality_defect() <= 1e-15
        assert sol.B_matrix(d).is_valid(tol=1e-15)
        # every retained divisor is reported
        assert all(not r.excluded for r in sol.diagnostics)

    def test_truncation_sends_high_modes_to_R(self, setup):
        nf, d = setup
        rng = np.random.default_rng(12)
        f = random_jet(MODEL, N_THETA, rng, support=6)
        sol = solve_linear(f, nf, 1e-3, 3, INF_DELTA, d)
        lay = get_layout(1, N_THETA)
        hi = lay.l1 > 3
        for t, v in sol.S.comps.items():
            assert np.abs(v[hi]).max() == 0
        assert mode_residuals(nf, f, sol) <= 1e-12

    def test_pure_jet_has_one_stage(self, setup):
        nf, d = setup
        f = random_jet(MODEL, N_THETA, np.random.default_rng(1), support=2,
                       cls=PhaseFunction)
        sol = solve_nonlinear(nf, f, 1e-3, 2 * N_THETA, INF_DELTA, d)
        assert len(sol.stages) == 1

    def test_nonlinear_residual(self, setup):
        nf, d = setup
        rng = np.random.default_rng(5)
        f = random_jet(MODEL, N_THETA, rng, support=2, scale=1e-3,
                       types=((0, 0), (1, 0), (0, 1), (0, 2), (1, 1), (0, 3)),
                       cls=PhaseFunction)
        sol = solve_nonlinear(nf, f, 1e-3, 2 * N_THETA, INF_DELTA, d)
        assert len(sol.stages) == 3
        pts = sample_real_points(MODEL, 0.5, 64, seed=0)
        assert nonlinear_residual(nf, f, sol, *pts) <= 1e-8

    def test_bracket_with_normal_form_is_diagonal(self, setup):
        nf, _ = setup
        h = normal_form_jet(nf, N_THETA)
        f = random_jet(MODEL, N_THETA, np.random.default_rng(2), support=1,
                       types=((0, 0),))
        # {f(theta), h} = -omega f_theta for angle-only f
        b = bracket(f, h)
        lay = get_layout(1, N_THETA)
        want = -OMEGA * 1j * lay.kvecs[:, 0] * f.f0
        assert np.allclose(b.get((0, 0)), want, atol=1e-14)
