import math

import numpy as np
import pytest

from kamforge.beam_model import (BeamConfig, beam_frequencies, beam_sites,
                                 build_beam, linear_spectrum,
                                 reconstruct_solution)
from kamforge.errors import (InvalidInputError, ModelConstructionError)
from kamforge.kam_engine import KamConfig, run_kam


def small_cfg(**kw):
    base = dict(R_lat=3, n_theta=8, eps=1e-6, rho=(0.5,))
    base.update(kw)
    return BeamConfig(**base)


def quartic_energy(cfg, lam, model, r, theta, w, n=256):
    """``eps int u^4 dx`` for ``d* = 1`` by direct quadrature."""
    x = 2 * np.pi * np.arange(n) / n
    norm = math.sqrt(2 * np.pi)
    u = np.zeros(n)
    for i, a in enumerate(model.setA):
        amp = math.sqrt(2 * (cfg.amplitudes[i] + r[i]) / lam[a])
        u += amp * np.cos(a[0] * x + theta[i]) / norm
    for i, s in enumerate(model.normal_sites):
        sc = 1.0 / (math.sqrt(lam[s]) * norm)
        u += sc * (w[2 * i] * np.cos(s[0] * x) - w[2 * i + 1] * np.sin(s[0] * x))
    return cfg.eps * (u ** 4).sum() * 2 * np.pi / n


# ------------------------------------------------------------ sites

def test_frequencies_on_default_beam():
    rep = beam_frequencies(BeamConfig())
    assert rep.lam[(2,)] == pytest.approx(math.sqrt(17), abs=1e-14)
    assert rep.lam[(3,)] == pytest.approx(math.sqrt(82), abs=1e-14)
    assert rep.sphere_defect == 0.0


def test_default_constants_satisfy_spectral_asymptotics():
    rep = beam_frequencies(BeamConfig())
    assert rep.a1.ok
    assert all(v > 0 for v in rep.a1.worst.values())


def test_unit_constants_fail_spectral_asymptotics():
    rep = beam_frequencies(BeamConfig(c=1.0, c_prime=1.0))
    assert not rep.a1.ok
    assert rep.a1.worst["separation"] < 0


def test_negative_potential_site_is_hyperbolic():
    cfg = small_cfg(Vhat={(2,): -20.0})
    F, L = beam_sites(cfg)
    assert set(F) == {(2,), (-2,)}
    s = build_beam(cfg)
    spec = linear_spectrum(s.h, s.rho)
    assert spec["unstable"] == 2 and spec["stable"] == 2
    assert np.allclose(np.sort(np.abs(spec["F"].real)), 2.0)
    assert spec["inf_real_part"] == 0.0


def test_rejects_zero_mode():
    with pytest.raises(ModelConstructionError):
        beam_sites(small_cfg(Vhat={(2,): -16.0}))


def test_rejects_bad_amplitudes():
    with pytest.raises(InvalidInputError):
        BeamConfig(amplitudes=(1.0, 2.0))
    with pytest.raises(InvalidInputError):
        BeamConfig(amplitudes=(0.0,))


# ------------------------------------------------------------ perturbation

def test_zero_eps_gives_zero_perturbation():
    s = build_beam(small_cfg(eps=0.0))
    assert s.f.max_abs() == 0.0


def test_perturbation_on_torus_matches_closed_form():
    cfg = small_cfg()
    s = build_beam(cfg)
    lam = s.lam[(1,)]
    nw = 2 * s.model.n_normal
    th = np.linspace(0, 2 * np.pi, 7)[:, None]
    vals = s.f(np.zeros((7, 1)), th, np.zeros((7, nw)))
    exact = 3 * cfg.eps / (4 * math.pi * lam ** 2)
    assert np.allclose(vals, exact, rtol=1e-12, atol=0)


def test_perturbation_matches_quadrature_off_torus():
    cfg = small_cfg()
    s = build_beam(cfg)
    rng = np.random.default_rng(3)
    nw = 2 * s.model.n_normal
    worst = 0.0
    for _ in range(10):
        r = 1e-4 * rng.uniform(-1, 1, 1)
        th = rng.uniform(0, 2 * np.pi, 1)
        w = 1e-3 * rng.normal(size=nw)
        got = s.f(r[None], th[None], w[None])[0]
        want = quartic_energy(cfg, s.lam, s.model, r, th, w)
        worst = max(worst, abs(got - want) / abs(want))
    assert worst <= 1e-6


# ------------------------------------------------------------ solutions

def test_reconstruction_refuses_unconverged_run():
    s = build_beam(small_cfg())
    r = run_kam(s.h, s.f, s.rho, KamConfig(eps_tol=0.0, max_steps=1),
                s.momentum)
    with pytest.raises(InvalidInputError):
        reconstruct_solution(s, r)


def test_linear_wave_solves_the_pde():
    s = build_beam(small_cfg(eps=0.0))
    rec = reconstruct_solution(s, None, n_grid=16)
    assert rec.residual <= 1e-12
    assert rec.hs_distance == 0.0 and rec.omega_shift == 0.0
    lam = s.lam[(1,)]
    t, x = rec.t[:, None], rec.x[:, 0][None, :]
    exact = math.sqrt(2 / lam) * np.cos(x + lam * t) / math.sqrt(2 * np.pi)
    assert np.allclose(rec.u, exact, atol=1e-12)


def test_converged_run_gives_small_residual_and_shift():
    s = build_beam(small_cfg())
    r = run_kam(s.h, s.f, s.rho, KamConfig(), s.momentum)
    rec = reconstruct_solution(s, r, n_grid=16)
    assert r.verdict.kind == "converged"
    assert rec.residual <= 1e-12
    assert 0 < rec.omega_shift <= 10 * s.cfg.eps
    assert 0 < rec.beta(s.cfg.eps) < 1.0
