import math

import numpy as np
import pytest

from jets import one_angle_model, oscillator, random_jet, random_points, site_var
from kamforge.errors import CapabilityError, SmallnessViolation
from kamforge.lattice_blocks import LatticeModel, WeightParams
from kamforge.phase_functions import (DomainSpec, JetFunction, Momentum,
                                      PhaseFunction, PhasePoint, bracket,
                                      flow_jacobian, flow_point, jet_extract,
                                      momentum_project, omega_form, poisson,
                                      symplecticity_defect, t_norm,
                                      transform_hamiltonian, y_norm)


@pytest.fixture
def model():
    return one_angle_model()


class TestYNorm:
    def test_examples(self):
        p = WeightParams(1.0, 1.0)
        assert y_norm(np.zeros((2, 2)), p, [(0, 0), (1, 0)]) == 0.0
        assert y_norm([[1.0, 0.0]], p, [(0, 0)]) == 1.0
        assert y_norm([[1.0, 0.0]], p, [(2, 0)]) == pytest.approx(2 * math.e ** 2)

    def test_monotone_in_gamma(self, rng):
        sites = [(i, j) for i in range(-3, 4) for j in range(-3, 4)]
        z = rng.normal(size=(len(sites), 2))
        lo = y_norm(z, WeightParams(0.1, 0.5), sites)
        hi = y_norm(z, WeightParams(0.4, 1.5), sites)
        assert lo <= hi


class TestOmega:
    def test_examples(self, rng):
        z = rng.normal(size=(3, 2))
        assert omega_form(z, z) == 0
        assert omega_form([[1, 0]], [[0, 1]]) == 1
        assert omega_form([[1, 0], [0, 0]], [[0, 0], [0, 1]]) == 0

    def test_antisymmetric(self, rng):
        z, zp = rng.normal(size=(4, 2)), rng.normal(size=(4, 2))
        assert omega_form(z, zp) == pytest.approx(-omega_form(zp, z))


class TestBracket:
    def test_canonical_pair(self, model):
        p, q = site_var(model, 4, (0,), 0), site_var(model, 4, (0,), 1)
        b = bracket(p, q)
        assert set(b.comps) == {(0, 0)}
        c = b.get((0, 0))
        assert c[b.layout.zero_index] == 1
        c[b.layout.zero_index] = 0
        assert np.abs(c).max() == 0

    def test_oscillator_against_symbolic(self, model):
        # {(p^2+q^2)/2, p} = p*0 - q*1 = -q
        f, p = oscillator(model, 4, (2,)), site_var(model, 4, (2,), 0)
        q = site_var(model, 4, (2,), 1)
        diff = bracket(f, p) + q
        assert diff.max_abs() == 0

    def test_self_bracket_vanishes(self, model, rng):
        f = random_jet(model, 6, rng)
        assert bracket(f, f).max_abs() <= 1e-13 * f.max_abs() ** 2

    def test_jacobi(self, model, rng):
        worst = 0.0
        for _ in range(100):
            F, G, H = (random_jet(model, 6, rng) for _ in range(3))
            J = (bracket(F, bracket(G, H)) + bracket(G, bracket(H, F))
                 + bracket(H, bracket(F, G)))
            scale = bracket(F, bracket(G, H)).max_abs()
            worst = max(worst, J.jet().max_abs() / scale)
        assert worst <= 1e-9

    def test_poisson_split(self, model, rng):
        f = random_jet(model, 6, rng, types=((0, 1), (0, 2)))
        g = random_jet(model, 6, rng, types=((0, 2),), cls=PhaseFunction)
        g.set((0, 3), np.zeros(g.shape_of((0, 3))))
        jet, rest = poisson(f, g)
        full = bracket(f, g)
        r, th, w = random_points(model, 10, rng)
        assert np.allclose(jet(r, th, w) + rest(r, th, w), full(r, th, w))

    def test_bilinear(self, model, rng):
        f, g, h = (random_jet(model, 6, rng) for _ in range(3))
        lhs = bracket(f.scale(2.0) + g, h)
        rhs = bracket(f, h).scale(2.0) + bracket(g, h)
        assert (lhs - rhs).max_abs() <= 1e-12 * lhs.max_abs()


class TestJetExtract:
    def test_cubic_dropped(self, model, rng):
        i = model.site_index[(0,)]

        def f(r, th, w):
            return r[0] * np.cos(th[0]) + w[2 * i] ** 3

        jet = jet_extract(f, model, 4)
        ref = JetFunction(model, 4)
        fr = np.zeros(ref.shape_of((1, 0)), complex)
        fr[ref.layout.index_of((1,)), 0] = 0.5
        fr[ref.layout.index_of((-1,)), 0] = 0.5
        ref.set((1, 0), fr)
        assert (jet - ref).max_abs() <= 1e-12

    def test_idempotent_on_jets(self, model, rng):
        f = random_jet(model, 4, rng)
        assert (jet_extract(f) - f).max_abs() == 0

    def test_quadratic_form(self, model, rng):
        A = rng.normal(size=(8, 8))
        A = A + A.T

        def f(r, th, w):
            return 0.5 * w @ A @ w

        jet = jet_extract(f, model, 2)
        r, th, w = random_points(model, 5, rng)
        want = 0.5 * np.einsum("pi,ij,pj->p", w, A, w)
        assert np.allclose(jet(r, th, w), want, atol=1e-12)

    def test_bad_input(self, model):
        with pytest.raises(CapabilityError):
            jet_extract(3.0, model, 2)
        with pytest.raises(CapabilityError):
            jet_extract(lambda r, t, w: 1 / 0, model, 1)


class TestFlows:
    def test_zero_generator(self, model, rng):
        x = PhasePoint(np.array([0.1]), np.array([0.2]), rng.normal(size=8))
        y = flow_point(JetFunction(model, 4), 1.0, x)
        assert y.distance(x) == 0

    def test_oscillator_rotation(self, model):
        S = oscillator(model, 4, (2,))
        i = model.site_index[(2,)]
        w = np.zeros(8)
        w[2 * i], w[2 * i + 1] = 0.3, -0.2
        x = PhasePoint(np.zeros(1), np.zeros(1), w)
        t = 0.7
        y = flow_point(S, t, x)
        p, q = 0.3, -0.2
        want = (p * math.cos(t) - q * math.sin(t), p * math.sin(t) + q * math.cos(t))
        assert np.allclose(y.w[2 * i:2 * i + 2], want, atol=1e-10)

    def test_symplectic(self, model, rng):
        S = random_jet(model, 4, rng, scale=1e-3)
        x = PhasePoint(*[v[0] for v in random_points(model, 1, rng)])
        jac = flow_jacobian(S, 1.0, x)
        assert symplecticity_defect(jac, model.n_angles) <= 1e-8

    def test_group_law_and_reality(self, model, rng):
        S = random_jet(model, 4, rng, scale=0.05)
        x = PhasePoint(*[v[0] for v in random_points(model, 1, rng)])
        a = flow_point(S, 0.6, flow_point(S, 0.3, x))
        b = flow_point(S, 0.9, x)
        assert a.distance(b) <= 1e-9
        assert np.abs(b.as_vector().imag).max() == 0


class TestLieTransform:
    def test_zero_generator(self, model, rng):
        H = random_jet(model, 4, rng)
        res = transform_hamiltonian(H, JetFunction(model, 4))
        assert (res.value - H).max_abs() == 0

    def test_matches_exact_flow(self, model, rng):
        # quadratic H, linear S: the flow is affine and the series terminates
        H = random_jet(model, 4, rng, types=((0, 2),), support=0)
        S = random_jet(model, 4, rng, types=((0, 1),), support=0, scale=0.1)
        res = transform_hamiltonian(H, S, n_lie=4, check=False)
        r, th, w = random_points(model, 8, rng)
        for n in range(8):
            x = PhasePoint(r[n], th[n], w[n])
            y = flow_point(S, 1.0, x)
            lhs = H(y.r[None], y.theta[None], y.w[None])[0]
            rhs = res.value(r[n:n + 1], th[n:n + 1], w[n:n + 1])[0]
            assert lhs == pytest.approx(rhs, abs=1e-10)

    def test_remainder_bound_consistent(self, model, rng):
        H = random_jet(model, 6, rng)
        S = random_jet(model, 6, rng, scale=0.02)
        a = transform_hamiltonian(H, S, n_lie=4)
        b = transform_hamiltonian(H, S, n_lie=6)
        assert (b.value - a.value).coef_norm() <= a.remainder_bound * 1.0001 + 1e-15

    def test_large_generator_rejected(self, model, rng):
        H = random_jet(model, 6, rng)
        S = random_jet(model, 6, rng, scale=50.0)
        with pytest.raises(SmallnessViolation):
            transform_hamiltonian(H, S, n_lie=6)


class TestNorms:
    def test_t_norm_total(self, model, rng):
        f = random_jet(model, 4, rng)
        rep = t_norm(f, DomainSpec(0.3, 0.3, WeightParams(0.1, 1.0)), n_x=32)
        assert rep.total == max(rep.sup_f, rep.sup_grad, rep.sup_hess) > 0

    def test_domain_validation(self):
        from kamforge.errors import InvalidInputError
        with pytest.raises(InvalidInputError):
            DomainSpec(1.5, 0.5, WeightParams())


class TestMomentum:
    def test_projection_keeps_invariant_terms(self, rng):
        model = LatticeModel(1, ((1,),), (), 2.0)
        mom = Momentum(np.asarray(model.normal_sites), np.asarray(model.setA))
        f = random_jet(model, 4, rng)
        P = momentum_project(f, mom)
        assert (momentum_project(P, mom) - P).max_abs() <= 1e-13
        # the oscillator at one site has zero charge and survives
        osc = oscillator(model, 4, (2,))
        assert (momentum_project(osc, mom) - osc).max_abs() <= 1e-15
