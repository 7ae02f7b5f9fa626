"""Beam equation ``u_tt + Delta^2 u + V*u + eps g(u) = 0`` on a torus.

The linear part is diagonal in Fourier modes with ``mu_a = |a|^4 + V(a)``
and ``lambda_a = sqrt|mu_a|``. Sites with ``mu_a < 0`` form the hyperbolic
set F. Tangential sites carry action-angle coordinates
``psi_a = sqrt(I_a + r_a) e^{i theta_a}``; every other site carries the
real pair ``(p, q)`` with ``psi = (p + i q)/sqrt 2``. The perturbation
``eps * int u^4 dx`` is expanded exactly in these coordinates by
quadrature on an alias-free grid.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.fft import next_fast_len

from .errors import InvalidInputError, ModelConstructionError
from .kam_engine import NormalFormHamiltonian, RunResult
from .lattice_blocks import LatticeModel, lattice_points
from .phase_functions import (Momentum, PhaseFunction, PhasePoint, flow_point,
                              get_layout, momentum_project)
from .small_divisors import A1Report, check_A1


@dataclass
class BeamConfig:
    """Beam model parameters.

    ``rho`` holds ``V(a)`` for the tangential sites; other sites use
    ``Vhat`` when listed there and the mass ``m`` otherwise.
    """

    d_star: int = 1
    m: float = 1.0
    setA: tuple = ((1,),)
    amplitudes: tuple = (1.0,)
    eps: float = 1e-6
    R_lat: float = 8.0
    rho: tuple | None = None
    Vhat: dict = field(default_factory=dict)
    n_theta: int = 16
    c: float = 3.0
    c_prime: float = 0.4

    def __post_init__(self):
        self.setA = tuple(tuple(int(v) for v in a) for a in self.setA)
        self.amplitudes = tuple(float(v) for v in self.amplitudes)
        if len(self.amplitudes) != len(self.setA):
            raise InvalidInputError("one amplitude per tangential site")
        if any(v <= 0 for v in self.amplitudes):
            raise InvalidInputError("amplitudes must be positive")
        if self.m <= 0 and not self.Vhat:
            raise InvalidInputError("mass m must be positive")
        if self.rho is None:
            self.rho = tuple(float(self.Vhat.get(a, self.m)) for a in self.setA)
        self.rho = tuple(float(v) for v in self.rho)

    def V(self, a, rho=None) -> float:
        """Potential coefficient; even in ``a`` so that ``V`` is real."""
        a = tuple(int(v) for v in a)
        neg = tuple(-v for v in a)
        rho = self.rho if rho is None else rho
        if rho is not None:
            for s in (a, neg):
                if s in self.setA:
                    return float(rho[self.setA.index(s)])
        if a in self.Vhat:
            return float(self.Vhat[a])
        return float(self.Vhat.get(neg, self.m))

    def mu(self, a, rho=None) -> float:
        return float(sum(v * v for v in a)) ** 2 + self.V(a, rho)


@dataclass
class BeamSystem:
    """A built beam model at one parameter point."""

    cfg: BeamConfig
    model: LatticeModel
    h: NormalFormHamiltonian
    f: PhaseFunction
    momentum: Momentum
    rho: tuple
    lam: dict

    @property
    def omega(self) -> np.ndarray:
        return self.h.omega(self.rho)


# ------------------------------------------------------------ construction

def beam_sites(cfg: BeamConfig) -> tuple[list, list]:
    """Tangential-complement sites split into F and the rest."""
    pts = lattice_points(cfg.d_star, cfg.R_lat)
    A = set(cfg.setA)
    L = [p for p in pts if p not in A]
    for a in cfg.setA:
        if len(a) != cfg.d_star:
            raise ModelConstructionError(f"site {a} has wrong dimension")
        if cfg.mu(a, cfg.rho) <= 0:
            raise ModelConstructionError(
                f"tangential site {a}: mu_a = {cfg.mu(a, cfg.rho):.6g} <= 0")
    for s in L:
        if cfg.mu(s) == 0:
            raise ModelConstructionError(f"site {s}: mu_a = 0")
    F = [s for s in L if cfg.mu(s) < 0]
    return F, L


def _frequency_fns(cfg: BeamConfig, model: LatticeModel):
    A = cfg.setA
    inf_sites = model.lambda_inf
    lam_F = np.array([math.sqrt(abs(cfg.mu(s))) for s in model.setF])

    def omega_fn(rho):
        return np.array([math.sqrt(abs(cfg.mu(a, rho))) for a in A])

    def lam_fn(rho):
        return np.array([math.sqrt(abs(cfg.mu(s, rho))) for s in inf_sites])

    def HF_fn(rho):
        # lambda (q^2 - p^2)/2 per hyperbolic site
        out = np.zeros((2 * len(lam_F), 2 * len(lam_F)))
        for i, lv in enumerate(lam_F):
            out[2 * i, 2 * i] = -lv
            out[2 * i + 1, 2 * i + 1] = lv
        return out

    return omega_fn, lam_fn, HF_fn


def x_grid(d_star: int, n: int) -> np.ndarray:
    """Uniform grid on the torus, shape ``(n**d, d)``."""
    t = 2 * np.pi * np.arange(n) / n
    g = np.meshgrid(*[t] * d_star, indexing="ij")
    return np.stack([x.ravel() for x in g], axis=1)


def quadrature_size(model: LatticeModel) -> int:
    """Points per dimension integrating degree-4 products exactly."""
    sites = np.array(model.all_sites()).reshape(-1, model.d_star)
    rmax = int(np.abs(sites).max()) if sites.size else 0
    return next_fast_len(4 * rmax + 2)


def normal_basis(model: LatticeModel, lam: dict, x: np.ndarray) -> np.ndarray:
    """``u`` contribution of each ``(p, q)`` coordinate, shape ``(X, nw)``."""
    d = model.d_star
    norm = (2 * np.pi) ** (d / 2)
    out = np.zeros((x.shape[0], 2 * model.n_normal))
    for i, s in enumerate(model.normal_sites):
        ph = x @ np.asarray(s, float)
        scale = 1.0 / (math.sqrt(lam[s]) * norm)
        out[:, 2 * i] = np.cos(ph) * scale
        out[:, 2 * i + 1] = -np.sin(ph) * scale
    return out


def tangential_modes(model: LatticeModel, lam: dict, x: np.ndarray,
                     theta: np.ndarray) -> np.ndarray:
    """``T_a(theta, x) = sqrt2 cos(a.x + theta_a)/(sqrt(lambda_a)(2pi)^(d/2))``.

    Shape ``(P, nA, X)``.
    """
    d = model.d_star
    norm = (2 * np.pi) ** (d / 2)
    out = np.zeros((theta.shape[0], model.n_angles, x.shape[0]))
    for i, a in enumerate(model.setA):
        ph = x @ np.asarray(a, float)
        out[:, i, :] = (math.sqrt(2.0) / (math.sqrt(lam[a]) * norm)
                        * np.cos(ph[None, :] + theta[:, i:i + 1]))
    return out


def perturbation_jet(cfg: BeamConfig, model: LatticeModel, lam: dict,
                     n_theta: int) -> PhaseFunction:
    """Exact graded expansion of ``eps int u^4 dx`` around the torus."""
    f = PhaseFunction(model, n_theta)
    if cfg.eps == 0:
        return f
    lay = get_layout(model.n_angles, n_theta)
    nA, nw = model.n_angles, 2 * model.n_normal
    n = quadrature_size(model)
    x = x_grid(model.d_star, n)
    wq = (2 * np.pi / n) ** model.d_star
    th = lay.theta_grid()
    T = tangential_modes(model, lam, x, th)                 # (P, nA, X)
    I = np.asarray(cfg.amplitudes)
    s0 = np.sqrt(I)
    s1 = 0.5 / np.sqrt(I)
    s2 = -0.25 / I ** 1.5
    U = np.einsum("a,pax->px", s0, T)
    E = normal_basis(model, lam, x)                        # (X, nw)
    eps = cfg.eps

    def pw(m):
        return U ** m if m >= 0 else np.zeros_like(U)

    def contract(G, j):
        """``sum_x wq G(..., x) e_i1(x) ... e_ij(x)`` then Fourier in theta."""
        lead = G.shape[1:-1]
        Gx = G * wq
        if j == 0:
            val = Gx.sum(-1)
        else:
            Ej = E
            for _ in range(j - 1):
                Ej = np.einsum("x...,xk->x...k", Ej, E)
            val = np.tensordot(Gx, Ej, axes=([-1], [0]))
        c, _ = lay.from_grid(val.reshape((G.shape[0],) + lead + (nw,) * j))
        return c

    for j in range(0, 4):
        m = 4 - j
        fac = eps * math.factorial(4) / math.factorial(m)
        # i = 0
        f.set((0, j), fac * contract(pw(m), j))
        # i = 1
        G1 = m * pw(m - 1)[:, None, :] * (s1[None, :, None] * T)
        f.set((1, j), fac * contract(G1, j))
        if 2 * 2 + j <= 5:
            G2 = (m * (m - 1) * pw(m - 2)[:, None, None, :]
                  * (s1[None, :, None, None] * T[:, :, None, :])
                  * (s1[None, None, :, None] * T[:, None, :, :]))
            diag = m * pw(m - 1)[:, None, :] * (s2[None, :, None] * T)
            idx = np.arange(nA)
            G2[:, idx, idx, :] += diag
            f.set((2, j), fac * contract(G2, j))
    E2 = np.einsum("xi,xj->xij", E, E).reshape(E.shape[0], -1)
    quart = (E2.T * wq) @ E2
    f.frozen = (eps * math.factorial(4) * quart).reshape((nw,) * 4).astype(complex)
    f.enforce_reality()
    return f


def build_beam(cfg: BeamConfig) -> BeamSystem:
    """Normal form, perturbation and translation charges at ``cfg.rho``."""
    F, _ = beam_sites(cfg)
    model = LatticeModel(cfg.d_star, cfg.setA, tuple(F), cfg.R_lat)
    omega_fn, lam_fn, HF_fn = _frequency_fns(cfg, model)
    lam = {s: math.sqrt(abs(cfg.mu(s, cfg.rho))) for s in model.all_sites()}
    const = float(np.dot(omega_fn(cfg.rho), cfg.amplitudes))
    h = NormalFormHamiltonian(model, omega_fn, lam_fn, HF_fn, const=const,
                              kappa_decay=1.0,
                              constants={"c": cfg.c, "c_prime": cfg.c_prime})
    mom = Momentum(np.array(model.normal_sites, dtype=np.int64).reshape(
        model.n_normal, cfg.d_star),
        np.array(model.setA, dtype=np.int64).reshape(model.n_angles, cfg.d_star))
    f = perturbation_jet(cfg, model, lam, cfg.n_theta)
    if cfg.eps != 0:
        f = momentum_project(f, mom)
    return BeamSystem(cfg, model, h, f, mom, cfg.rho, lam)


# ------------------------------------------------------------ frequencies

@dataclass
class FrequencyReport:
    lam: dict
    a1: A1Report
    sphere_defect: float


def beam_frequencies(cfg: BeamConfig) -> FrequencyReport:
    """``lambda_a`` on the truncated lattice with the A1 margins."""
    F, L = beam_sites(cfg)
    sites = lattice_points(cfg.d_star, cfg.R_lat)
    lam = {s: math.sqrt(abs(cfg.mu(s, cfg.rho))) for s in sites}
    inf = {s: lam[s] for s in L if s not in set(F)}
    HF = None
    if F:
        HF = np.zeros((2 * len(F), 2 * len(F)))
        for i, s in enumerate(F):
            HF[2 * i, 2 * i], HF[2 * i + 1, 2 * i + 1] = -lam[s], lam[s]
    rep = check_A1(inf, cfg.c, cfg.c_prime, 2.0, 2.0, HF)
    by_norm: dict = {}
    for s, v in inf.items():
        by_norm.setdefault(sum(t * t for t in s), []).append(v)
    defect = max((max(v) - min(v) for v in by_norm.values()), default=0.0)
    return FrequencyReport(lam, rep, float(defect))


def linear_spectrum(h: NormalFormHamiltonian, rho) -> dict:
    """Spectrum of ``J A`` split into the F block and the Lambda_inf block."""
    nf = h.evaluate(rho)
    nF = h.model.n_F
    Jb = np.array([[0.0, 1.0], [-1.0, 0.0]])
    A = nf.A
    nw = A.shape[0]
    J = np.kron(np.eye(nw // 2), Jb)
    M = J @ A
    sF = np.linalg.eigvals(M[:2 * nF, :2 * nF]) if nF else np.zeros(0)
    sI = np.linalg.eigvals(M[2 * nF:, 2 * nF:])
    return {"F": sF, "inf": sI,
            "inf_real_part": float(np.abs(sI.real).max()) if sI.size else 0.0,
            "unstable": int((sF.real > 1e-12).sum()),
            "stable": int((sF.real < -1e-12).sum())}


# ------------------------------------------------------------ solutions

@dataclass
class Reconstruction:
    t: np.ndarray
    x: np.ndarray
    u: np.ndarray
    residual: float
    residual_grid: np.ndarray
    omega_prime: np.ndarray
    coeffs: np.ndarray
    coeffs0: np.ndarray
    hs_distance: float
    omega_shift: float

    def beta(self, eps: float) -> float:
        return self.hs_distance / eps if eps else 0.0


def _pull_back(points: list, generators: list) -> list:
    out = []
    for x in points:
        for S in reversed(generators):
            x = flow_point(S, 1.0, x, tol=1e-13)
        out.append(x)
    return out


def site_coefficients(sys: BeamSystem, pts: list) -> np.ndarray:
    """Fourier coefficients ``c_a`` of ``u`` for each phase point.

    ``u(x) = sum_a c_a e^{i a.x}/(2 pi)^(d/2)`` over all truncated sites.
    """
    model, cfg = sys.model, sys.cfg
    sites = list(model.all_sites())
    pos = {s: i for i, s in enumerate(sites)}
    psi = np.zeros((len(pts), len(sites)), complex)
    for n, x in enumerate(pts):
        r = np.real(x.r)
        th = np.real(x.theta)
        w = np.real(x.w)
        for i, a in enumerate(model.setA):
            psi[n, pos[a]] = math.sqrt(cfg.amplitudes[i] + r[i]) \
                * np.exp(1j * th[i])
        for i, s in enumerate(model.normal_sites):
            psi[n, pos[s]] = (w[2 * i] + 1j * w[2 * i + 1]) / math.sqrt(2)
    c = np.zeros_like(psi)
    for s, i in pos.items():
        neg = tuple(-v for v in s)
        c[:, i] = psi[:, i] / math.sqrt(2 * sys.lam[s])
        if neg in pos:
            c[:, i] += np.conj(psi[:, pos[neg]]) / math.sqrt(2 * sys.lam[neg])
    return c


def _hs_weights(sites, s: float) -> np.ndarray:
    n = np.array([math.sqrt(sum(v * v for v in a)) for a in sites])
    return np.maximum(n, 1.0) ** (2 * s)


def reconstruct_solution(sys: BeamSystem, run: RunResult | None,
                         theta0=None, t_grid=None, x_grid_pts=None,
                         n_grid: int = 32, hs: float | None = None
                         ) -> Reconstruction:
    """Sample ``u(t, x)`` on the torus found by a converged run.

    The torus ``r = 0, w = 0`` of the final coordinates is pulled back
    through the stored generators on a uniform angle grid. Time derivatives
    are taken spectrally in the angles, and the residual
    ``u_tt + Delta^2 u + V*u + eps g(u)`` is evaluated on the Galerkin
    truncation, mode by mode, with ``mu_a - (k.omega')^2`` factored as
    ``(lambda_a - |k.omega'|)(lambda_a + |k.omega'|)``.
    """
    model, cfg = sys.model, sys.cfg
    nA = model.n_angles
    if run is not None and run.verdict.kind != "converged":
        raise InvalidInputError(f"run did not converge: {run.verdict}")
    gens = run.generators if run is not None else []
    h = run.h if run is not None else sys.h
    omega_p = h.omega(sys.rho)
    theta0 = np.zeros(nA) if theta0 is None else np.asarray(theta0, float)
    hs = cfg.d_star if hs is None else hs
    # angle grid
    g1 = 2 * np.pi * np.arange(n_grid) / n_grid
    mesh = np.meshgrid(*[g1] * nA, indexing="ij")
    vt = np.stack([m.ravel() for m in mesh], axis=1)
    nw = 2 * model.n_normal
    final = [PhasePoint(np.zeros(nA), theta0 + v, np.zeros(nw)) for v in vt]
    orig = _pull_back(final, gens)
    C = site_coefficients(sys, orig)                     # (G, nsites)
    C0 = site_coefficients(sys, final)
    sites = list(model.all_sites())
    shape = (n_grid,) * nA
    Ck = np.fft.fftn(C.reshape(shape + (len(sites),)), axes=tuple(range(nA)),
                     norm="forward").reshape(-1, len(sites))
    kk = np.stack([m.ravel() for m in np.meshgrid(
        *[np.fft.fftfreq(n_grid, 1.0 / n_grid)] * nA, indexing="ij")], axis=1)
    freq = kk @ omega_p                                  # (G,)
    mu = np.array([cfg.mu(s, sys.rho) for s in sites])
    lam = np.array([sys.lam[s] for s in sites])
    af = np.abs(freq)[:, None]
    lin = np.where(mu[None, :] > 0, (lam - af) * (lam + af),
                   mu[None, :] - af ** 2)
    # nonlinearity on the grid: u(theta, x), then project to the sites
    n = max(quadrature_size(model), 3 * int(np.abs(np.array(sites)).max()) + 2)
    xg = x_grid(model.d_star, n)
    norm = (2 * np.pi) ** (model.d_star / 2)
    Phi = np.exp(1j * xg @ np.array(sites, float).reshape(len(sites), -1).T) / norm
    u_grid = (C @ Phi.T).real                            # (G, X)
    g = 4.0 * u_grid ** 3
    wq = (2 * np.pi / n) ** model.d_star
    g_hat = (g * wq) @ np.conj(Phi)                      # (G, nsites)
    g_k = np.fft.fftn(g_hat.reshape(shape + (len(sites),)),
                      axes=tuple(range(nA)), norm="forward").reshape(-1, len(sites))
    R_k = lin * Ck + cfg.eps * g_k
    # evaluation grids
    if t_grid is None:
        t_grid = np.linspace(0.0, 2 * np.pi / max(np.abs(omega_p).min(), 1e-12),
                             64, endpoint=False)
    if x_grid_pts is None:
        x_grid_pts = x_grid(model.d_star, 64) if model.d_star == 1 else \
            x_grid(model.d_star, 8)
    t_grid = np.asarray(t_grid, float)
    E_t = np.exp(1j * np.outer(t_grid, freq))             # (T, G)
    Phi_x = np.exp(1j * np.asarray(x_grid_pts) @ np.array(
        sites, float).reshape(len(sites), -1).T) / norm   # (X, nsites)
    u = (E_t @ Ck @ Phi_x.T).real
    res = E_t @ R_k @ Phi_x.T
    wts = _hs_weights(sites, hs)
    dist = np.sqrt(((np.abs(C - C0) ** 2) * wts).sum(1)).max()
    shift = float(np.abs(omega_p - sys.h.omega(sys.rho)).max())
    return Reconstruction(t_grid, np.asarray(x_grid_pts), u,
                          float(np.abs(res).max()), np.abs(res), omega_p, C,
                          C0, float(dist), shift)
