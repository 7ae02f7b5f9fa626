"""Builders for small random phase functions used across tests."""

import numpy as np

from kamforge.lattice_blocks import LatticeModel
from kamforge.phase_functions import JetFunction, PhaseFunction


def one_angle_model(R=2.0):
    """One angle at site 1; normal sites are the rest of ``|a| <= R``."""
    return LatticeModel(1, ((1,),), (), R)


def random_jet(model, N, rng, support=1, scale=1.0, types=None, cls=JetFunction):
    """Real jet whose Fourier modes are confined to ``|k| <= support``."""
    f = cls(model, N)
    lay = f.layout
    keep = lay.l1 <= support
    for t in types or ((0, 0), (1, 0), (0, 1), (0, 2)):
        shape = f.shape_of(t)
        arr = rng.normal(size=shape) + 1j * rng.normal(size=shape)
        arr[~keep] = 0.0
        f.set(t, scale * arr)
    return f.enforce_reality()


def random_points(model, n, rng, mu=0.3, complex_theta=0.0):
    nA, nw = model.n_angles, 2 * model.n_normal
    r = mu * rng.uniform(-1, 1, size=(n, nA))
    th = rng.uniform(0, 2 * np.pi, size=(n, nA)) \
        + 1j * complex_theta * rng.uniform(-1, 1, size=(n, nA))
    w = mu * rng.uniform(-1, 1, size=(n, nw)) / np.sqrt(max(nw, 1))
    return r, th, w


def site_var(model, N, site, which, cls=JetFunction):
    """The coordinate function ``p_site`` (which=0) or ``q_site`` (which=1)."""
    f = cls(model, N)
    fw = np.zeros(f.shape_of((0, 1)), complex)
    i = model.site_index[tuple(site)]
    fw[f.layout.zero_index, 2 * i + which] = 1.0
    f.set((0, 1), fw)
    return f


def oscillator(model, N, site, cls=JetFunction):
    """``(p^2 + q^2)/2`` at one site."""
    f = cls(model, N)
    fww = np.zeros(f.shape_of((0, 2)), complex)
    i = model.site_index[tuple(site)]
    fww[f.layout.zero_index, 2 * i, 2 * i] = 1.0
    fww[f.layout.zero_index, 2 * i + 1, 2 * i + 1] = 1.0
    f.set((0, 2), fww)
    return f


__all__ = ["one_angle_model", "random_jet", "random_points", "site_var",
           "oscillator", "PhaseFunction"]
