"""Homological equations on the truncated lattice.

For a normal form ``h = <omega, r> + 1/2 <w, A w>`` and a jet ``f`` the
solver finds a jet ``S``, a normal-form increment ``h_+`` and a remainder
``R`` with ``{S, h} + f = h_+ + R``. Components are solved mode by mode and
block by block in the complex coordinates of :mod:`small_divisors`:

* scalar part: ``-i <k,omega> S_k + F_k = 0``;
* vector part: ``(i <k,omega> + D) S_k = F_k``;
* matrix part: ``i <k,omega> S_k + D S_k - S_k D' = F_k``.

Modes with ``|k|_1 > N`` and block pairs farther apart than ``delta_prime``
go to ``R``; the resonant diagonal pieces at ``k = 0`` go to ``h_+``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .block_matrix import BlockMatrix, nf_project
from .errors import SmallDivisorExclusion
from .lattice_blocks import BlockDecomposition, is_infinite
from .phase_functions import (JetFunction, Momentum, PhaseFunction, bracket,
                              get_layout)
from .small_divisors import (NormalFormData, block_z_indices,
                             sylvester_matrix)

log = logging.getLogger(__name__)


@dataclass
class DiagnosticRow:
    k: tuple
    blocks: tuple
    divisor: float
    excluded: bool
    kind: str


@dataclass
class HomologicalSolution:
    """Output of a homological solve.

    ``const`` and ``omega_plus`` are the scalar and action parts of
    ``h_+``; ``B`` is its quadratic part as a dense real matrix in normal
    form for the solve's decomposition.
    """

    S: JetFunction
    const: float
    omega_plus: np.ndarray
    B: np.ndarray
    R: JetFunction
    diagnostics: list = field(default_factory=list)
    tallies: dict = field(default_factory=dict)
    stages: list = field(default_factory=list)

    @property
    def worst_divisor(self) -> float:
        return min((d.divisor for d in self.diagnostics), default=math.inf)

    def h_plus_jet(self, n_theta: int) -> JetFunction:
        model = self.S.model
        lay = get_layout(model.n_angles, n_theta)
        out = JetFunction(model, n_theta)
        f0 = np.zeros(lay.M, complex)
        f0[lay.zero_index] = self.const
        fr = np.zeros((lay.M, model.n_angles), complex)
        fr[lay.zero_index] = self.omega_plus
        fww = np.zeros((lay.M,) + self.B.shape, complex)
        fww[lay.zero_index] = self.B
        out.comps = {(0, 0): f0, (1, 0): fr, (0, 2): fww}
        return out

    def B_matrix(self, decomp: BlockDecomposition):
        return nf_project(BlockMatrix.from_dense(self.S.model, self.B), decomp)


def normal_form_jet(nf: NormalFormData, n_theta: int, const: float = 0.0
                    ) -> JetFunction:
    """The quadratic normal form as a jet with only the zero mode."""
    lay = get_layout(nf.model.n_angles, n_theta)
    out = JetFunction(nf.model, n_theta)
    f0 = np.zeros(lay.M, complex)
    f0[lay.zero_index] = const
    fr = np.zeros((lay.M, nf.model.n_angles), complex)
    fr[lay.zero_index] = nf.omega
    fww = np.zeros((lay.M,) + nf.A.shape, complex)
    fww[lay.zero_index] = nf.A
    out.comps = {(0, 0): f0, (1, 0): fr, (0, 2): fww}
    return out


# ------------------------------------------------------------ helpers

def _layout_for(M: int, n_angles: int):
    """Recover the Fourier layout from the number of modes."""
    side = round(M ** (1.0 / n_angles)) if n_angles else 1
    return get_layout(n_angles, (side - 1) // 2)


def _half_modes(lay):
    """Flat indices of the zero mode and one representative of each +-k."""
    return range(lay.zero_index, lay.M)


def _mirror(arr: np.ndarray, lay) -> np.ndarray:
    """Fill modes below the zero index by conjugate symmetry."""
    z = lay.zero_index
    arr[:z] = np.conj(arr[::-1][:z])
    arr[z] = arr[z].real
    return arr


def _charges(momentum: Momentum | None, nw: int, nF: int):
    """Charges of complex coordinates, with F coordinates as wildcards."""
    if momentum is None:
        return None, None
    zc = momentum.z_charges()
    wild = np.zeros(nw, dtype=bool)
    wild[:2 * nF] = True
    return zc, wild


def _angle_charge(momentum: Momentum | None, k):
    if momentum is None:
        return None
    ang = np.asarray(momentum.angle, dtype=np.int64).reshape(len(k), -1)
    return np.asarray(k, dtype=np.int64) @ ang


def _smin_solve(mat: np.ndarray, rhs: np.ndarray, kappa: float):
    """Solve ``mat x = rhs``; returns ``(x, sigma_min)``."""
    s = np.linalg.svd(mat, compute_uv=False)
    smin = float(s.min()) if s.size else math.inf
    if s.size == 0:
        return rhs.copy(), smin
    if smin > 0 and s.max() / smin < 0.1 / max(kappa, 1e-300):
        x = sla.lu_solve(sla.lu_factor(mat), rhs)
    else:
        x = np.linalg.lstsq(mat, rhs, rcond=None)[0]
    return x, smin


# ------------------------------------------------------------ scalar

def solve_scalar(f0: np.ndarray, fr: np.ndarray, omega, kappa: float, N: int,
                 n_angles: int, momentum: Momentum | None = None,
                 diagnostics: list | None = None):
    """Solve the scalar and action parts mode by mode.

    Returns ``(S0, Sr, mean0, mean_r, R0, Rr)``; ``S_k = -i F_k/<k,omega>``
    on retained modes, the means go to ``h_+`` and ``|k|_1 > N`` to ``R``.
    """
    lay = _layout_for(f0.shape[0], n_angles)
    M = lay.M
    omega = np.asarray(omega, float)
    z = lay.zero_index
    S0 = np.zeros_like(f0)
    Sr = np.zeros_like(fr)
    R0 = np.zeros_like(f0)
    Rr = np.zeros_like(fr)
    mean0 = complex(f0[z]).real
    mean_r = fr[z].real.copy()
    for m in range(z + 1, M):
        k = lay.kvecs[m]
        if not (np.any(f0[m]) or np.any(fr[m])):
            continue
        if lay.l1[m] > N:
            R0[m], Rr[m] = f0[m], fr[m]
            continue
        if momentum is not None and np.any(_angle_charge(momentum, k)):
            # forbidden by translation symmetry: nothing to solve
            R0[m], Rr[m] = f0[m], fr[m]
            continue
        div = float(k @ omega)
        if diagnostics is not None:
            diagnostics.append(DiagnosticRow(tuple(k), (), abs(div),
                                             abs(div) < kappa, "scalar"))
        if abs(div) < kappa:
            raise SmallDivisorExclusion(k, (), abs(div), "scalar")
        S0[m] = -1j * f0[m] / div
        Sr[m] = -1j * fr[m] / div
    for arr in (S0, Sr, R0, Rr):
        _mirror(arr, lay)
    return S0, Sr, mean0, mean_r, R0, Rr


# ------------------------------------------------------------ vector

def solve_vector(fw: np.ndarray, nf: NormalFormData, kappa: float, N: int,
                 decomp: BlockDecomposition, momentum: Momentum | None = None,
                 diagnostics: list | None = None):
    """Solve ``(i <k,omega> + D) S = F`` per mode and block.

    Returns ``(S_w, R_w)`` as Fourier arrays of one-forms.
    """
    model = nf.model
    lay = _layout_for(fw.shape[0], model.n_angles)
    U, Ui = nf._transforms()
    D = nf.D
    nw = fw.shape[1]
    zc, wild = _charges(momentum, nw, model.n_F)
    Sw = np.zeros_like(fw)
    Rw = np.zeros_like(fw)
    blocks = [block_z_indices(decomp, b) for b in range(decomp.n_blocks)]
    for m in _half_modes(lay):
        if not np.any(fw[m]):
            continue
        if lay.l1[m] > N:
            Rw[m] = fw[m]
            continue
        k = lay.kvecs[m]
        c = float(k @ nf.omega)
        Fz = U.T @ fw[m]
        Sz = np.zeros(nw, complex)
        Rz = np.zeros(nw, complex)
        ac = _angle_charge(momentum, k)
        for b, ix in enumerate(blocks):
            if not np.any(Fz[ix]):
                continue
            if zc is not None:
                ok = wild[ix] | np.all(zc[ix] + ac == 0, axis=1)
                Rz[ix[~ok]] = Fz[ix[~ok]]
                ix = ix[ok]
                if ix.size == 0:
                    continue
            mat = 1j * c * np.eye(ix.size) + D[np.ix_(ix, ix)]
            x, smin = _smin_solve(mat, Fz[ix], kappa)
            if diagnostics is not None:
                diagnostics.append(DiagnosticRow(tuple(k), (b,), smin,
                                                 smin < kappa, "block"))
            if smin < kappa:
                raise SmallDivisorExclusion(k, (b,), smin, "block")
            Sz[ix] = x
        Sw[m] = Ui.T @ Sz
        Rw[m] = Ui.T @ Rz
    _mirror(Sw, lay)
    _mirror(Rw, lay)
    return Sw, Rw


# ------------------------------------------------------------ matrix

def solve_matrix(fww: np.ndarray, nf: NormalFormData, kappa: float, N: int,
                 delta_prime, decomp: BlockDecomposition,
                 momentum: Momentum | None = None,
                 diagnostics: list | None = None):
    """Solve ``i <k,omega> S + D S - S D' = F`` per mode and block pair.

    Returns ``(S_ww, B, R_ww)``; ``B`` is a dense real matrix in normal form
    for ``decomp``.
    """
    model = nf.model
    lay = _layout_for(fww.shape[0], model.n_angles)
    U, Ui = nf._transforms()
    D, Dp = nf.D, nf.Dp
    nw = fww.shape[1]
    zc, wild = _charges(momentum, nw, model.n_F)
    nb = decomp.n_blocks
    blocks = [block_z_indices(decomp, b) for b in range(nb)]
    # xi coordinates are even, eta odd (Lambda_inf sites only)
    is_xi = np.zeros(nw, dtype=bool)
    is_xi[0::2] = True
    is_F = np.zeros(nw, dtype=bool)
    is_F[:2 * model.n_F] = True
    sphere = [None if decomp.is_F(b) else decomp.block_norm2(b)
              for b in range(nb)]
    Sww = np.zeros_like(fww)
    Rww = np.zeros_like(fww)
    Bz = np.zeros((nw, nw), complex)
    far = 0
    for m in _half_modes(lay):
        if not np.any(fww[m]):
            continue
        if lay.l1[m] > N:
            Rww[m] = fww[m]
            continue
        k = lay.kvecs[m]
        zero = not np.any(k)
        c = float(k @ nf.omega)
        Fz = U.T @ fww[m] @ U
        Sz = np.zeros((nw, nw), complex)
        Rz = np.zeros((nw, nw), complex)
        ac = _angle_charge(momentum, k)
        for a in range(nb):
            ia = blocks[a]
            for b in range(nb):
                ib = blocks[b]
                Fab = Fz[np.ix_(ia, ib)]
                if not np.any(Fab):
                    continue
                if not is_infinite(delta_prime) and \
                        decomp.rep_dist(a, b) > delta_prime:
                    Rz[np.ix_(ia, ib)] = Fab
                    far += 1
                    continue
                solve = np.ones(Fab.shape, dtype=bool)
                to_B = np.zeros(Fab.shape, dtype=bool)
                if zero:
                    if decomp.is_F(a) and decomp.is_F(b):
                        to_B[:] = True
                    elif sphere[a] is not None and sphere[a] == sphere[b]:
                        mixed = is_xi[ia][:, None] != is_xi[ib][None, :]
                        to_B = mixed if a == b else np.zeros_like(mixed)
                        solve = ~mixed
                    solve &= ~to_B
                if zc is not None:
                    tot = zc[ia][:, None, :] + zc[ib][None, :, :] + ac
                    ok = (wild[ia][:, None] | wild[ib][None, :]
                          | np.all(tot == 0, axis=-1))
                    to_B &= ok
                    solve &= ok
                rest = ~(solve | to_B)
                Bz[np.ix_(ia, ib)] += np.where(to_B, Fab, 0.0)
                Rz[np.ix_(ia, ib)] = np.where(rest, Fab, 0.0)
                if not solve.any():
                    continue
                full = sylvester_matrix(1j * c, D[np.ix_(ia, ia)],
                                        Dp[np.ix_(ib, ib)])
                sel = solve.ravel()
                mat = full[np.ix_(sel, sel)]
                x, smin = _smin_solve(mat, Fab.ravel()[sel], kappa)
                if diagnostics is not None:
                    diagnostics.append(DiagnosticRow(tuple(k), (a, b), smin,
                                                     smin < kappa, "pair"))
                if smin < kappa:
                    raise SmallDivisorExclusion(k, (a, b), smin, "pair")
                X = np.zeros(Fab.size, complex)
                X[sel] = x
                Sz[np.ix_(ia, ib)] = X.reshape(Fab.shape)
        Sww[m] = Ui.T @ Sz @ Ui
        Rww[m] = Ui.T @ Rz @ Ui
    _mirror(Sww, lay)
    _mirror(Rww, lay)
    Sww = 0.5 * (Sww + Sww.transpose(0, 2, 1))
    Braw = (Ui.T @ Bz @ Ui).real
    Bnf = nf_project(BlockMatrix.from_dense(model, Braw), decomp)
    B = Bnf.base.to_dense().real
    # anything the projection removes is kept in the remainder
    Rww[lay.zero_index] += Braw - B
    if far:
        log.debug("matrix solve: %d block pairs beyond delta'", far)
    return Sww, B, Rww


# ------------------------------------------------------------ drivers

def solve_linear(fT: PhaseFunction, nf: NormalFormData, kappa: float, N: int,
                 delta_prime, decomp: BlockDecomposition,
                 momentum: Momentum | None = None) -> HomologicalSolution:
    """Solve ``{S, h} + f^T = h_+ + R`` for the jet of ``fT``."""
    model = nf.model
    n_theta = fT.N
    lay = get_layout(model.n_angles, n_theta)
    diag: list = []
    jet = fT.jet()
    S0, Sr, c0, wr, R0, Rr = solve_scalar(jet.f0, jet.fr, nf.omega, kappa, N,
                                          model.n_angles, momentum, diag)
    Sw, Rw = solve_vector(jet.fw, nf, kappa, N, decomp, momentum, diag)
    Sww, B, Rww = solve_matrix(jet.fww, nf, kappa, N, delta_prime, decomp,
                               momentum, diag)
    S = JetFunction.from_parts(model, n_theta, S0, Sr, Sw, Sww)
    R = JetFunction.from_parts(model, n_theta, R0, Rr, Rw, Rww)
    tallies = {"modes": int(lay.M), "retained": int((lay.l1 <= N).sum()),
               "solves": len(diag)}
    return HomologicalSolution(S, c0, np.asarray(wr, float), B, R, diag,
                               tallies)


def _combine(parts: list, model, n_theta) -> HomologicalSolution:
    S = parts[0].S
    R = parts[0].R
    for p in parts[1:]:
        S = S + p.S
        R = R + p.R
    diag = [d for p in parts for d in p.diagnostics]
    tallies = {"solves": len(diag), "stages": len(parts)}
    return HomologicalSolution(
        S, sum(p.const for p in parts),
        sum(p.omega_plus for p in parts), sum(p.B for p in parts), R, diag,
        tallies, stages=parts)


def solve_nonlinear(nf: NormalFormData, f: PhaseFunction, kappa: float, N: int,
                    delta_prime, decomp: BlockDecomposition,
                    momentum: Momentum | None = None) -> HomologicalSolution:
    """Three-stage solve of ``{S,h} + {S, f - f^T}^T + f^T = h_+ + R``.

    ``S0`` solves the linear equation for ``f^T``; ``S1`` solves it for
    ``{S0, f - f^T}^T`` and ``S2`` for ``{S1, f - f^T}^T``. Since ``S1`` has
    no angle-only part and ``S2`` is purely quadratic-weight, the bracket
    ``{S2, f - f^T}`` has no jet and the combined equation is exact.
    """
    hi = f.nonjet()
    sol0 = solve_linear(f.jet(), nf, kappa, N, delta_prime, decomp, momentum)
    parts = [sol0]
    fk = []
    S_prev = sol0.S
    for _ in range(2):
        if not hi.comps and hi.frozen is None:
            break
        fj = bracket(S_prev, hi).jet()
        fk.append(fj)
        sol = solve_linear(fj, nf, kappa, N, delta_prime, decomp, momentum)
        parts.append(sol)
        S_prev = sol.S
    out = _combine(parts, nf.model, f.N)
    out.tallies["forced_jets"] = fk
    return out


def nonlinear_residual(nf: NormalFormData, f: PhaseFunction,
                       sol: HomologicalSolution, r, theta, w) -> float:
    """Relative residual of the nonlinear equation at sample points."""
    n_theta = f.N
    h = normal_form_jet(nf, n_theta)
    lhs = bracket(sol.S, h).jet() + bracket(sol.S, f.nonjet()).jet() + f.jet()
    res = lhs - sol.h_plus_jet(n_theta) - sol.R
    num = np.abs(res(r, theta, w)).max()
    den = max(np.abs(f.jet()(r, theta, w)).max(), 1e-300)
    return float(num / den)


def mode_residuals(nf: NormalFormData, fT: PhaseFunction,
                   sol: HomologicalSolution) -> float:
    """Largest per-mode relative residual of the linear equation."""
    n_theta = fT.N
    h = normal_form_jet(nf, n_theta)
    res = bracket(sol.S, h).jet() + fT.jet() - sol.h_plus_jet(n_theta) - sol.R
    scale = max(fT.jet().max_abs(), 1e-300)
    return res.max_abs() / scale
