import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kamforge.errors import InvalidInputError
from kamforge.lattice_blocks import (INF_DELTA, LatticeModel, WeightParams,
                                     block_diameter, block_diameters,
                                     calibrate_weight_constant, decompose,
                                     fit_diameter_constant, is_refinement,
                                     lattice_points, norm2, pseudo_dist,
                                     pseudo_dist_matrix, separation_violations,
                                     weight, weight_lemma_ratios)

site2 = st.tuples(st.integers(-20, 20), st.integers(-20, 20))


def _brute_sphere(n2, radius):
    r = int(math.isqrt(n2)) + 1
    return {(x, y) for x in range(-r, r + 1) for y in range(-r, r + 1)
            if x * x + y * y == n2 and x * x + y * y <= radius ** 2}


class TestPseudoDist:
    def test_identity_and_antipode(self):
        assert pseudo_dist((3, -7), (3, -7)) == 0.0
        assert pseudo_dist((3, -7), (-3, 7)) == 0.0

    def test_direct_value(self):
        assert pseudo_dist((3, 4), (4, 3)) == pytest.approx(math.sqrt(2), abs=1e-15)

    def test_distance_to_origin_is_norm(self):
        assert pseudo_dist((5, 12), (0, 0)) == 13.0

    def test_dimension_mismatch(self):
        with pytest.raises(InvalidInputError):
            pseudo_dist((1, 2), (1, 2, 3))

    @given(site2, site2, site2)
    def test_symmetry_and_triangle(self, a, b, c):
        assert pseudo_dist(a, b) == pseudo_dist(b, a)
        assert pseudo_dist(a, b) <= pseudo_dist(a, c) + pseudo_dist(c, b) + 1e-12

    def test_matrix_matches_scalar(self, rng):
        xs = rng.integers(-9, 10, size=(30, 3))
        ys = rng.integers(-9, 10, size=(20, 3))
        M = pseudo_dist_matrix(xs, ys)
        ref = np.array([[pseudo_dist(x, y) for y in ys] for x in xs])
        assert np.array_equal(M, ref)


class TestWeight:
    def test_unit(self):
        assert weight((0, 0), (0, 0), WeightParams()) == 1.0

    def test_polynomial_factor(self):
        assert weight((3, 0), (0, 0), WeightParams(0.0, 1.0)) == pytest.approx(3.0)

    def test_exponential_factor(self):
        p = WeightParams(math.log(2), 0.0, 1.0, 1.0)
        assert weight((1, 0), (2, 0), p) == pytest.approx(2.0, rel=1e-15)

    def test_invalid_params(self):
        with pytest.raises(InvalidInputError):
            WeightParams(-0.1)
        with pytest.raises(InvalidInputError):
            WeightParams(C_w=0.5)

    def test_calibrated_constant_passes_lemmas(self, rng):
        model = LatticeModel(2, (), (), 10.0)
        cw = calibrate_weight_constant(0.3, 2.0, 1.0, model, n_samples=4000)
        assert cw >= 2.0 ** 4 and math.log2(cw) == int(math.log2(cw))
        p = WeightParams(0.3, 2.0, 1.0, cw)
        pts = np.asarray(model.all_sites())
        a, b, c = (pts[rng.integers(0, len(pts), 5000)] for _ in range(3))
        for gt in [(0.3, 2.0), (-0.3, -2.0), (0.1, 0.5)]:
            r1, r2 = weight_lemma_ratios(p, a, b, c, gt)
            assert r1.max() <= 1 + 1e-12 and r2.max() <= 1 + 1e-12


class TestLatticeModel:
    def test_partition_of_truncated_lattice(self):
        m = LatticeModel(2, ((1, 0),), ((0, 2),), 4.0)
        allp = set(lattice_points(2, 4.0))
        assert set(m.setA) | set(m.setF) | set(m.lambda_inf) == allp
        assert len(m.lambda_inf) == len(allp) - 2

    def test_rejects_overlap_and_bad_dimension(self):
        with pytest.raises(InvalidInputError):
            LatticeModel(2, ((1, 0),), ((1, 0),), 4.0)
        with pytest.raises(InvalidInputError):
            LatticeModel(2, ((1,),), (), 4.0)
        with pytest.raises(InvalidInputError):
            LatticeModel(1, ((9,),), (), 4.0)


class TestDecompose:
    def test_infinite_delta_gives_spheres(self):
        m = LatticeModel(2, (), (), 8.0)
        d = decompose(m, INF_DELTA)
        blk = d.blocks[d.block_of[(3, 4)]]
        assert set(blk) == _brute_sphere(25, 8.0)
        assert len(blk) == 12

    def test_delta_one_sphere_five(self):
        m = LatticeModel(2, (), (), 8.0)
        d = decompose(m, 1.0)
        got = {frozenset(b) for b in d.blocks if norm2(b[0]) == 25}
        want = {frozenset(s) for s in [
            {(3, 4), (-3, -4)}, {(4, 3), (-4, -3)}, {(4, -3), (-4, 3)},
            {(3, -4), (-3, 4)}, {(5, 0), (-5, 0)}, {(0, 5), (0, -5)}]}
        assert got == want

    def test_origin_singleton(self):
        d = decompose(LatticeModel(2, (), (), 3.0), 2.0)
        assert d.blocks[d.block_of[(0, 0)]] == ((0, 0),) or \
            list(d.blocks[d.block_of[(0, 0)]]) == [(0, 0)]

    def test_F_is_one_block(self):
        m = LatticeModel(2, (), ((1, 1), (0, 3)), 4.0)
        d = decompose(m, 2.0)
        assert d.has_F_block and d.is_F(0)
        assert set(d.blocks[0]) == {(1, 1), (0, 3)}

    @pytest.mark.parametrize("delta", [1.0, 2.0, 3.0])
    def test_partition_separation_equal_norms(self, delta):
        m = LatticeModel(2, ((1, 0),), ((2, 1),), 12.0)
        d = decompose(m, delta)
        seen = [s for b in d.blocks for s in b]
        assert len(seen) == len(set(seen))
        assert set(seen) == set(m.lambda_inf) | set(m.setF)
        for i, b in enumerate(d.blocks):
            if not d.is_F(i):
                assert len({norm2(s) for s in b}) == 1
        assert separation_violations(d) == 0

    def test_closure_is_transitive_closure(self):
        # oracle: brute-force graph search on one sphere
        m = LatticeModel(2, (), (), 13.0)
        delta = 3.0
        d = decompose(m, delta)
        sphere = sorted(_brute_sphere(65, 13.0))
        seen, comps = set(), []
        for s in sphere:
            if s in seen:
                continue
            comp, stack = {s}, [s]
            while stack:
                x = stack.pop()
                for y in sphere:
                    if y not in comp and pseudo_dist(x, y) <= delta:
                        comp.add(y)
                        stack.append(y)
            seen |= comp
            comps.append(frozenset(comp))
        got = {frozenset(b) for b in d.blocks if norm2(b[0]) == 65}
        assert got == set(comps)

    def test_monotone_refinement(self):
        m = LatticeModel(2, (), (), 15.0)
        ds = [decompose(m, x) for x in (1.0, 2.0, 4.0)] + [decompose(m, INF_DELTA)]
        for fine, coarse in zip(ds, ds[1:]):
            assert is_refinement(fine, coarse)


class TestDiameter:
    def test_singletons(self):
        m = LatticeModel(1, (), (), 0.5)
        assert block_diameter(decompose(m, 1.0)) == 0.0

    def test_sphere_five(self):
        m = LatticeModel(2, (), (), 5.0)
        d = decompose(m, INF_DELTA)
        diam = block_diameters(d)[d.block_of[(5, 0)]]
        assert diam == pytest.approx(math.sqrt(50), abs=1e-12)

    def test_fit_constant(self):
        assert fit_diameter_constant([1, 2], [3.0, 8.0], 3.0) == 3.0
