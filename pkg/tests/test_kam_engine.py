import math

import numpy as np
import pytest

from kamforge.beam_model import BeamConfig, build_beam
from kamforge.errors import ScheduleInfeasible
from kamforge.kam_engine import (KamConfig, basic_step, finite_induction,
                                 jet_norm, make_schedule, retained_modes,
                                 run_kam)
from kamforge.lattice_blocks import INF_DELTA, WeightParams, decompose
from kamforge.phase_functions import DomainSpec

RESONANT_RHO = (math.sqrt(82) - math.sqrt(17)) ** 2 - 1


def small_beam(eps=1e-6, rho=(0.5,)):
    return build_beam(BeamConfig(R_lat=3, n_theta=8, eps=eps, rho=rho))


# ------------------------------------------------------------ schedule

def test_schedule_ladders():
    s = make_schedule(0.5, 0.5, INF_DELTA, 1e-6, K=2, max_steps=3)
    assert s.sigma_j[0] == pytest.approx(0.5)
    assert s.mu_j[0] == pytest.approx(0.5)
    assert s.K_j == [2, 4, 8]
    assert all(a > b for a, b in zip(s.sigma_j, s.sigma_j[1:]))
    assert all(a > b for a, b in zip(s.mu_j, s.mu_j[1:]))
    assert all(a > b for a, b in zip(s.eps_j, s.eps_j[1:]))
    assert all(a <= b for a, b in zip(s.xi_j, s.xi_j[1:]))
    assert len(list(s.rows())) == 3


def test_schedule_kappa_closed_form():
    s = make_schedule(0.5, 0.5, INF_DELTA, 1e-6, K=2, max_steps=2)
    C, e3 = s.constants["C"], s.constants["exp3"]
    for j in range(2):
        base = 1.0 + s.delta_j[j] + s.xi_j[j]
        logY = e3 * (math.log(base) - math.log(s.kappa_j[j]))
        lhs = math.log(s.kappa_j[j])
        rhs = math.log(C) + s.log_X_j[j] + logY + math.log(s.eps_j[j])
        assert lhs == pytest.approx(rhs, rel=1e-12)


@pytest.mark.parametrize("args", [
    dict(sigma=0.0, mu=0.5, Delta=INF_DELTA, eps=1e-6),
    dict(sigma=0.5, mu=1.5, Delta=INF_DELTA, eps=1e-6),
    dict(sigma=0.5, mu=0.5, Delta=0.5, eps=1e-6),
    dict(sigma=0.5, mu=0.5, Delta=INF_DELTA, eps=1.5),
    dict(sigma=0.5, mu=0.5, Delta=INF_DELTA, eps=0.3),
])
def test_schedule_infeasible(args):
    with pytest.raises(ScheduleInfeasible):
        make_schedule(**args)


def test_retained_modes_caps():
    assert retained_modes(INF_DELTA, 1, 8) == 8
    assert retained_modes(3.7, 1, 8) == 3
    assert retained_modes(100.0, 2, 8) == 16


# ------------------------------------------------------------ basic step

def _step_inputs(eps=1e-6):
    s = small_beam(eps)
    w = WeightParams(1.0, 3.0, 1.0, 1.0)
    decomp = decompose(s.model, INF_DELTA)
    N = retained_modes(INF_DELTA, s.model.n_angles, s.f.N)
    return s, w, decomp, N


def test_basic_step_contracts():
    s, w, decomp, N = _step_inputs()
    res = basic_step(s.h, s.f, s.rho, 1e-3, N, INF_DELTA, decomp,
                     DomainSpec(0.5, 0.5, w), DomainSpec(0.4, 0.4, w),
                     s.momentum)
    rep = res.report
    assert rep.eps_out < rep.eps_in ** 1.5
    assert rep.residual <= 1e-7
    assert rep.worst_divisor > 0


def test_basic_step_zero_perturbation_is_identity():
    s = small_beam(eps=0.0)
    w = WeightParams(1.0, 3.0, 1.0, 1.0)
    decomp = decompose(s.model, INF_DELTA)
    res = basic_step(s.h, s.f, s.rho, 1e-3, 4, INF_DELTA, decomp,
                     DomainSpec(0.5, 0.5, w), DomainSpec(0.4, 0.4, w))
    assert res.solution is None
    assert res.S.max_abs() == 0.0
    assert res.h is s.h


def test_finite_induction_single_step_matches_basic_step():
    s, w, decomp, N = _step_inputs()
    one = basic_step(s.h, s.f, s.rho, 1e-3, N, INF_DELTA, decomp,
                     DomainSpec(0.5, 0.5, w), DomainSpec(0.4, 0.4, w),
                     s.momentum)
    ind = finite_induction(s.h, s.f, s.rho, 1e-3, INF_DELTA, 1, 0.5, 0.4,
                           0.5, 0.4, w, s.momentum)
    assert ind.status == "ok"
    assert len(ind.generators) == 1
    assert ind.reports[0].eps_out == pytest.approx(one.report.eps_out,
                                                   rel=1e-12)
    diff = (ind.f + one.f.scale(-1.0)).max_abs()
    assert diff <= 1e-15 * max(one.f.max_abs(), 1e-300)


def test_halving_eps_at_least_halves_output():
    outs = []
    for eps in (1e-6, 5e-7):
        s = small_beam(eps)
        r = run_kam(s.h, s.f, s.rho, KamConfig(eps_tol=0, max_steps=1, K=1),
                    s.momentum)
        outs.append(r.eps_final)
    assert outs[1] <= 0.5 * outs[0]


# ------------------------------------------------------------ driver

def test_zero_perturbation_converges_immediately():
    s = small_beam(eps=0.0)
    r = run_kam(s.h, s.f, s.rho, KamConfig(), s.momentum)
    assert str(r.verdict) == "converged(j=0)"
    assert r.generators == []
    assert r.eps_final == 0.0


def test_default_run_converges():
    s = small_beam()
    r = run_kam(s.h, s.f, s.rho, KamConfig(), s.momentum)
    assert r.verdict.kind == "converged"
    assert r.eps_final <= 1e-12
    assert max(r.residuals) <= 1e-10
    assert r.checks["delta_ok"]


def test_resonant_parameter_is_excluded():
    s = small_beam(rho=(RESONANT_RHO,))
    r = run_kam(s.h, s.f, s.rho, KamConfig(), s.momentum)
    v = r.verdict
    assert v.kind == "excluded" and v.j == 1
    assert v.k == (1,)
    assert set(v.blocks) == {2, 3}
    assert abs(v.divisor) < 1e-12


def test_step_budget_gives_stalled():
    s = small_beam()
    r = run_kam(s.h, s.f, s.rho, KamConfig(eps_tol=0.0, max_steps=1),
                s.momentum)
    assert str(r.verdict) == "stalled(j=1)"
    assert r.eps_trail[-1] < r.eps_trail[0]


def test_log_is_deterministic():
    logs = []
    for _ in range(2):
        s = small_beam()
        logs.append(run_kam(s.h, s.f, s.rho, KamConfig(), s.momentum).log_tsv())
    assert logs[0] == logs[1]
    lines = logs[0].splitlines()
    assert lines[0].split("\t")[0] == "j"
    assert lines[-1].endswith("converged(j=1)")


def test_jet_norm_zero_for_zero_function():
    s = small_beam(eps=0.0)
    w = WeightParams(1.0, 3.0, 1.0, 1.0)
    assert jet_norm(s.f, DomainSpec(0.5, 0.5, w)) == 0.0
    assert np.isfinite(jet_norm(small_beam().f, DomainSpec(0.5, 0.5, w)))
