"""Phase space, Taylor-Fourier functions, Poisson brackets and flows.

Functions of ``x = (r, theta, w)`` are stored as graded Taylor-Fourier
series. A component of type ``(i, j)`` is a Fourier series whose
coefficients are symmetric derivative tensors ``C`` with ``i`` action
indices and ``j`` transverse indices; it represents
``C[r^i, w^j] / (i! j!)``. Actions carry weight 2 and transverse variables
weight 1, and only components of weight at most 5 are kept. A constant
(angle-independent) quartic in ``w`` may be attached as a frozen term.

Sign conventions: ``{f, g} = f_r g_theta - f_theta g_r + f_p g_q - f_q g_p``
so that ``{p, q} = {r, theta} = 1``, and along the flow of ``S`` every
function evolves by ``d/dt g = {S, g}``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from itertools import permutations

import numpy as np
from scipy.fft import next_fast_len
from scipy.integrate import solve_ivp

from .block_matrix import block_opnorms
from .errors import (CapabilityError, FlowEscapeError, InvalidInputError,
                     SmallnessViolation)
from .lattice_blocks import LatticeModel, WeightParams, pseudo_dist_matrix

ALLOWED_TYPES = ((0, 0), (1, 0), (2, 0), (0, 1), (1, 1), (2, 1), (0, 2),
                 (1, 2), (0, 3), (1, 3))
JET_TYPES = ((0, 0), (1, 0), (0, 1), (0, 2))
FROZEN_TYPE = (0, 4)


# ------------------------------------------------------------ phase vectors

def y_norm(zeta, p: WeightParams, sites) -> float:
    """Weighted norm ``sqrt(sum |zeta_a|^2 e^{2 g1 |a|} <a>^{2 g2})``.

    ``zeta`` is an ``(n, 2)`` array of ``(p, q)`` pairs aligned with
    ``sites``.
    """
    zeta = np.asarray(zeta).reshape(len(sites), -1)
    arr = np.asarray(sites, dtype=float).reshape(len(sites), -1)
    nrm = np.sqrt((arr * arr).sum(-1))
    w = np.exp(p.gamma1 * nrm) * np.maximum(nrm, 1.0) ** p.gamma2
    return float(np.sqrt(np.sum(np.abs(zeta) ** 2 * (w ** 2)[:, None])))


def omega_form(zeta, zeta_prime) -> complex:
    """Symplectic pairing ``sum_a p_a q'_a - q_a p'_a``."""
    z = np.asarray(zeta).reshape(-1, 2)
    zp = np.asarray(zeta_prime).reshape(-1, 2)
    return complex(np.sum(z[:, 0] * zp[:, 1] - z[:, 1] * zp[:, 0]))


def apply_jb_right(x: np.ndarray) -> np.ndarray:
    """Right-multiply the last axis by the per-site form ``[[0,1],[-1,0]]``."""
    y = np.empty_like(x)
    y[..., 0::2] = -x[..., 1::2]
    y[..., 1::2] = x[..., 0::2]
    return y


def apply_j_vector(x: np.ndarray) -> np.ndarray:
    """Apply the vector-side structure ``[[0,-1],[1,0]]`` per site."""
    y = np.empty_like(x)
    y[..., 0::2] = -x[..., 1::2]
    y[..., 1::2] = x[..., 0::2]
    return y


@dataclass
class PhasePoint:
    """Point ``(r, theta, w)``; ``w`` stacks ``(p, q)`` of each normal site."""

    r: np.ndarray
    theta: np.ndarray
    w: np.ndarray

    def as_vector(self) -> np.ndarray:
        return np.concatenate([np.atleast_1d(self.r), np.atleast_1d(self.theta),
                               np.atleast_1d(self.w)]).astype(complex)

    @classmethod
    def from_vector(cls, v, n_angles: int) -> "PhasePoint":
        v = np.asarray(v)
        return cls(v[:n_angles].copy(), v[n_angles:2 * n_angles].copy(),
                   v[2 * n_angles:].copy())

    def distance(self, other: "PhasePoint") -> float:
        """Sup distance with angles compared modulo 2 pi."""
        dth = np.asarray(self.theta - other.theta)
        dth = dth - 2 * np.pi * np.round(dth.real / (2 * np.pi))
        parts = [np.abs(self.r - other.r), np.abs(dth),
                 np.abs(self.w - other.w)]
        return float(max((p.max() if p.size else 0.0) for p in parts))


@dataclass(frozen=True)
class DomainSpec:
    """Complex domain: ``|Im theta| < sigma``, ``|r| < mu``, ``|w| < mu``."""

    sigma: float
    mu: float
    gamma: WeightParams

    def __post_init__(self):
        if not (0 < self.sigma <= 1 and 0 < self.mu <= 1):
            raise InvalidInputError("domain needs 0 < sigma, mu <= 1")


# ------------------------------------------------------------ Fourier grid

class FourierLayout:
    """Fourier modes ``|k|_inf <= N`` in C order and an FFT product grid."""

    def __init__(self, n_angles: int, N: int):
        self.nA = n_angles
        self.N = N
        side = 2 * N + 1
        self.shape = (side,) * n_angles
        self.M = side ** n_angles
        if n_angles:
            grids = np.meshgrid(*[np.arange(-N, N + 1)] * n_angles,
                                indexing="ij")
            self.kvecs = np.stack([g.ravel() for g in grids], axis=1)
        else:
            self.kvecs = np.zeros((1, 0), dtype=np.int64)
        self.kvecs = self.kvecs.astype(np.int64)
        self.l1 = np.abs(self.kvecs).sum(1)
        self.zero_index = (self.M - 1) // 2
        self.L = next_fast_len(4 * N + 1) if n_angles else 1
        self.P = self.L ** n_angles
        self._idx = np.arange(-N, N + 1) % self.L if n_angles else None
        # a dense synthesis matrix beats a strided FFT for one angle
        self._E = (np.exp(1j * self.theta_grid() @ self.kvecs.T.astype(float))
                   if n_angles == 1 else None)

    def index_of(self, k) -> int:
        k = np.asarray(k, dtype=np.int64)
        if np.any(np.abs(k) > self.N):
            raise InvalidInputError(f"mode {tuple(k)} outside |k| <= {self.N}")
        return int(np.ravel_multi_index(tuple(k + self.N), self.shape)) \
            if self.nA else 0

    def to_grid(self, c: np.ndarray) -> np.ndarray:
        """Values ``sum_k c_k e^{i k theta}`` on the product grid."""
        if self.nA == 0:
            return c.astype(complex)
        tail = c.shape[1:]
        if self._E is not None:
            return (self._E @ c.reshape(self.M, -1)).reshape((self.P,) + tail)
        full = np.zeros((self.L,) * self.nA + tail, dtype=complex)
        full[np.ix_(*[self._idx] * self.nA)] = c.reshape(self.shape + tail)
        vals = np.fft.ifftn(full, axes=tuple(range(self.nA)), norm="forward")
        return vals.reshape((self.P,) + tail)

    def from_grid(self, v: np.ndarray):
        """Coefficients ``|k| <= N`` of grid values plus the discarded tail."""
        if self.nA == 0:
            return v.astype(complex), 0.0
        tail = v.shape[1:]
        full = np.fft.fftn(v.reshape((self.L,) * self.nA + tail),
                           axes=tuple(range(self.nA)), norm="forward")
        sel = np.ix_(*[self._idx] * self.nA)
        c = full[sel].reshape((self.M,) + tail)
        full[sel] = 0.0
        return c, float(np.abs(full).max()) if full.size else 0.0

    def theta_grid(self) -> np.ndarray:
        """Angles of the product grid, shape ``(P, nA)``."""
        if self.nA == 0:
            return np.zeros((1, 0))
        t = 2 * np.pi * np.arange(self.L) / self.L
        g = np.meshgrid(*[t] * self.nA, indexing="ij")
        return np.stack([x.ravel() for x in g], axis=1)

    def exp_matrix(self, theta: np.ndarray) -> np.ndarray:
        """``e^{i k . theta}`` for points ``(P, nA)``, shape ``(P, M)``."""
        theta = np.asarray(theta, dtype=complex)
        if self.nA == 0:
            P = theta.shape[0] if theta.ndim == 2 else 1
            return np.ones((P, 1), dtype=complex)
        theta = theta.reshape(-1, self.nA)
        return np.exp(1j * theta @ self.kvecs.T)


@lru_cache(maxsize=None)
def get_layout(n_angles: int, N: int) -> FourierLayout:
    return FourierLayout(n_angles, N)


def _symmetrize(t: np.ndarray, i: int, j: int) -> np.ndarray:
    """Average over permutations within the action and transverse axes."""
    lead = t.ndim - i - j
    if i < 2 and j < 2:
        return t
    rp = list(permutations(range(lead, lead + i)))
    wp = list(permutations(range(lead + i, lead + i + j)))
    acc = np.zeros_like(t)
    for a in rp:
        for b in wp:
            acc += t.transpose(tuple(range(lead)) + a + b)
    return acc / (len(rp) * len(wp))


def _reality(c: np.ndarray) -> np.ndarray:
    """Impose ``c_{-k} = conj(c_k)``; ``-k`` is the reversed flat index."""
    return 0.5 * (c + np.conj(c[::-1]))


class PhaseFunction:
    """Graded Taylor-Fourier function on the phase space.

    Parameters
    ----------
    model : LatticeModel
    n_theta : int
        Fourier cutoff per angle.
    comps : dict, optional
        ``(i, j) -> array`` of shape ``(M,) + (nA,)*i + (nw,)*j``.
    frozen : ndarray, optional
        Angle-independent quartic derivative tensor of shape ``(nw,)*4``.
    """

    def __init__(self, model: LatticeModel, n_theta: int,
                 comps: dict | None = None, frozen=None):
        self.model = model
        self.N = int(n_theta)
        self.layout = get_layout(model.n_angles, self.N)
        self.comps: dict = {}
        self.frozen = None if frozen is None else np.asarray(frozen, complex)
        self.tail = 0.0
        for t, arr in (comps or {}).items():
            self.set(t, arr)

    # ------------------------------------------------------------ basics
    @property
    def nA(self) -> int:
        return self.model.n_angles

    @property
    def nw(self) -> int:
        return 2 * self.model.n_normal

    def shape_of(self, t) -> tuple:
        i, j = t
        return (self.layout.M,) + (self.nA,) * i + (self.nw,) * j

    def allowed(self, t) -> bool:
        return t in ALLOWED_TYPES

    def set(self, t, arr):
        if not self.allowed(t):
            raise InvalidInputError(f"component type {t} not representable")
        arr = np.asarray(arr, dtype=complex)
        if arr.shape != self.shape_of(t):
            raise InvalidInputError(
                f"component {t} has shape {arr.shape}, "
                f"expected {self.shape_of(t)}")
        self.comps[t] = _symmetrize(arr, *t)

    def get(self, t) -> np.ndarray:
        if t in self.comps:
            return self.comps[t]
        return np.zeros(self.shape_of(t), dtype=complex)

    def _empty(self) -> "PhaseFunction":
        return PhaseFunction(self.model, self.N)

    def copy(self) -> "PhaseFunction":
        out = self._empty()
        out.comps = {t: v.copy() for t, v in self.comps.items()}
        out.frozen = None if self.frozen is None else self.frozen.copy()
        return out

    def _compatible(self, other: "PhaseFunction"):
        if other.model is not self.model or other.N != self.N:
            raise InvalidInputError("phase functions live on different spaces")

    def __add__(self, other: "PhaseFunction") -> "PhaseFunction":
        self._compatible(other)
        out = PhaseFunction(self.model, self.N)
        for t in set(self.comps) | set(other.comps):
            if t in self.comps and t in other.comps:
                out.comps[t] = self.comps[t] + other.comps[t]
            else:
                out.comps[t] = (self.comps.get(t, other.comps.get(t))).copy()
        if self.frozen is not None or other.frozen is not None:
            z = np.zeros((self.nw,) * 4, complex)
            out.frozen = ((self.frozen if self.frozen is not None else z)
                          + (other.frozen if other.frozen is not None else z))
        return out

    def __neg__(self) -> "PhaseFunction":
        return self.scale(-1.0)

    def __sub__(self, other: "PhaseFunction") -> "PhaseFunction":
        return self + other.scale(-1.0)

    def scale(self, c) -> "PhaseFunction":
        out = self._empty()
        out.comps = {t: c * v for t, v in self.comps.items()}
        out.frozen = None if self.frozen is None else c * self.frozen
        return out

    def jet(self) -> "JetFunction":
        out = JetFunction(self.model, self.N)
        for t in JET_TYPES:
            if t in self.comps:
                out.comps[t] = self.comps[t].copy()
        return out

    def nonjet(self) -> "PhaseFunction":
        out = PhaseFunction(self.model, self.N)
        out.comps = {t: v.copy() for t, v in self.comps.items()
                     if t not in JET_TYPES}
        out.frozen = None if self.frozen is None else self.frozen.copy()
        return out

    def as_phase_function(self) -> "PhaseFunction":
        out = PhaseFunction(self.model, self.N)
        out.comps = {t: v.copy() for t, v in self.comps.items()}
        out.frozen = None if self.frozen is None else self.frozen.copy()
        return out

    def enforce_reality(self) -> "PhaseFunction":
        for t in self.comps:
            self.comps[t] = _reality(self.comps[t])
        if self.frozen is not None:
            self.frozen = self.frozen.real.astype(complex)
        return self

    def reality_defect(self) -> float:
        d = 0.0
        for v in self.comps.values():
            d = max(d, float(np.abs(v - np.conj(v[::-1])).max()))
        return d

    def max_abs(self) -> float:
        vals = [float(np.abs(v).max()) for v in self.comps.values() if v.size]
        if self.frozen is not None:
            vals.append(float(np.abs(self.frozen).max()))
        return max(vals, default=0.0)

    def coef_norm(self, sigma: float = 0.0, mu: float = 1.0) -> float:
        """Majorant ``sum_k e^{|k| sigma} |C_k|_1 mu^{2i+j}/(i! j!)``."""
        wk = np.exp(sigma * self.layout.l1)
        tot = 0.0
        for (i, j), v in self.comps.items():
            per = np.abs(v).reshape(v.shape[0], -1).sum(1)
            tot += float(per @ wk) * mu ** (2 * i + j) / (
                math.factorial(i) * math.factorial(j))
        if self.frozen is not None:
            tot += float(np.abs(self.frozen).sum()) * mu ** 4 / 24.0
        return tot

    def truncate_modes(self, N: int) -> "PhaseFunction":
        """Zero every Fourier mode with ``|k|_1 > N``."""
        out = self.copy()
        mask = self.layout.l1 > N
        for v in out.comps.values():
            v[mask] = 0.0
        return out

    # ------------------------------------------------------------ evaluation
    def _points(self, r, theta, w):
        P = max(np.atleast_2d(np.asarray(x)).shape[0] for x in (r, theta, w))
        r = np.broadcast_to(np.asarray(r, complex).reshape(-1, self.nA)
                            if self.nA else np.zeros((1, 0)), (P, self.nA))
        theta = np.broadcast_to(np.asarray(theta, complex).reshape(-1, self.nA)
                                if self.nA else np.zeros((1, 0)), (P, self.nA))
        w = np.broadcast_to(np.asarray(w, complex).reshape(-1, self.nw),
                            (P, self.nw))
        return r, theta, w

    @staticmethod
    def _contract(V, r, w, i, j, keep_r=0, keep_w=0):
        # V: (P, nA^i, nw^j); contract trailing w axes then leading r axes
        for _ in range(j - keep_w):
            V = np.einsum("p...x,px->p...", V, w)
        for _ in range(i - keep_r):
            V = np.einsum("px...,px->p...", V, r)
        return V

    def _mode_values(self, t, E):
        C = self.comps[t]
        flat = E @ C.reshape(C.shape[0], -1)
        return flat.reshape((E.shape[0],) + C.shape[1:])

    def __call__(self, r, theta, w) -> np.ndarray:
        """Values at points; arguments are ``(P, nA)``, ``(P, nA)``, ``(P, nw)``."""
        r, theta, w = self._points(r, theta, w)
        E = self.layout.exp_matrix(theta)
        out = np.zeros(r.shape[0], dtype=complex)
        for (i, j) in self.comps:
            V = self._mode_values((i, j), E)
            out += self._contract(V, r, w, i, j) / (
                math.factorial(i) * math.factorial(j))
        if self.frozen is not None:
            V = np.broadcast_to(self.frozen, (r.shape[0],) + self.frozen.shape)
            out += self._contract(V, r, w, 0, 4) / 24.0
        return out

    def gradient(self, r, theta, w):
        """Partial derivatives ``(f_r, f_theta, f_w)`` at points."""
        r, theta, w = self._points(r, theta, w)
        P = r.shape[0]
        E = self.layout.exp_matrix(theta)
        dE = E[:, :, None] * (1j * self.layout.kvecs)[None, :, :]
        gr = np.zeros((P, self.nA), complex)
        gt = np.zeros((P, self.nA), complex)
        gw = np.zeros((P, self.nw), complex)
        for (i, j), C in self.comps.items():
            fi, fj = math.factorial(i), math.factorial(j)
            V = self._mode_values((i, j), E)
            if i >= 1:
                gr += self._contract(V, r, w, i, j, keep_r=1) / (
                    math.factorial(i - 1) * fj)
            if j >= 1:
                gw += self._contract(V, r, w, i, j, keep_w=1) / (
                    fi * math.factorial(j - 1))
            if self.nA:
                flat = C.reshape(C.shape[0], -1)
                for s in range(self.nA):
                    Vs = (dE[:, :, s] @ flat).reshape((P,) + C.shape[1:])
                    gt[:, s] += self._contract(Vs, r, w, i, j) / (fi * fj)
        if self.frozen is not None:
            V = np.broadcast_to(self.frozen, (P,) + self.frozen.shape)
            gw += self._contract(V, r, w, 0, 4, keep_w=1) / 6.0
        return gr, gt, gw

    def hessian_w(self, r, theta, w) -> np.ndarray:
        """Second transverse derivative at points, shape ``(P, nw, nw)``."""
        r, theta, w = self._points(r, theta, w)
        E = self.layout.exp_matrix(theta)
        out = np.zeros((r.shape[0], self.nw, self.nw), complex)
        for (i, j) in self.comps:
            if j >= 2:
                V = self._mode_values((i, j), E)
                out += self._contract(V, r, w, i, j, keep_w=2) / (
                    math.factorial(i) * math.factorial(j - 2))
        if self.frozen is not None:
            V = np.broadcast_to(self.frozen, (r.shape[0],) + self.frozen.shape)
            out += self._contract(V, r, w, 0, 4, keep_w=2) / 2.0
        return out

    def __repr__(self) -> str:
        types = sorted(self.comps)
        return (f"{type(self).__name__}(types={types}, N={self.N}, "
                f"frozen={self.frozen is not None})")


class JetFunction(PhaseFunction):
    """Two-jet ``f0 + fr . r + fw . w + 1/2 <fww w, w>`` in Fourier form."""

    def allowed(self, t) -> bool:
        return t in JET_TYPES

    def _empty(self) -> "JetFunction":
        return JetFunction(self.model, self.N)

    def copy(self) -> "JetFunction":
        out = JetFunction(self.model, self.N)
        out.comps = {t: v.copy() for t, v in self.comps.items()}
        return out

    def __add__(self, other):
        res = PhaseFunction.__add__(self, other)
        if isinstance(other, JetFunction):
            out = JetFunction(self.model, self.N)
            out.comps = res.comps
            return out
        return res

    def scale(self, c) -> "JetFunction":
        out = JetFunction(self.model, self.N)
        out.comps = {t: c * v for t, v in self.comps.items()}
        return out

    @classmethod
    def from_parts(cls, model, n_theta, f0=None, fr=None, fw=None, fww=None):
        out = cls(model, n_theta)
        for t, v in (((0, 0), f0), ((1, 0), fr), ((0, 1), fw),
                     ((0, 2), fww)):
            if v is not None:
                out.set(t, v)
        return out

    @property
    def f0(self):
        return self.get((0, 0))

    @property
    def fr(self):
        return self.get((1, 0))

    @property
    def fw(self):
        return self.get((0, 1))

    @property
    def fww(self):
        return self.get((0, 2))


def zero_jet(model: LatticeModel, n_theta: int) -> JetFunction:
    return JetFunction(model, n_theta)


# ------------------------------------------------------------ brackets

def _cached(f: PhaseFunction, key, t, compute):
    """Grid data cached on ``f`` while ``f.comps[t]`` is the same array."""
    cache = f.__dict__.setdefault("_grid_cache", {})
    src = f.comps[t]
    hit = cache.get(key)
    if hit is not None and hit[0] is src:
        return hit[1]
    val = compute(src)
    cache[key] = (src, val)
    return val


def _grid_values(f: PhaseFunction, t):
    """Grid values ``(P, ...)`` of a component, or the frozen tensor."""
    if t == FROZEN_TYPE:
        return f.frozen[None]
    return _cached(f, ("v", t), t, f.layout.to_grid)


def _grid_dtheta(f: PhaseFunction, t):
    """Grid values of the angle derivatives, shape ``(P, nA, ...)``."""
    k = f.layout.kvecs.astype(float)

    def compute(C):
        D = 1j * k.reshape((k.shape[0], k.shape[1]) + (1,) * (C.ndim - 1)) \
            * C[:, None]
        return f.layout.to_grid(D)
    return _cached(f, ("d", t), t, compute)


def _types_of(f: PhaseFunction):
    ts = list(f.comps)
    if f.frozen is not None:
        ts.append(FROZEN_TYPE)
    return ts


def bracket(F: PhaseFunction, G: PhaseFunction, out_types=None) -> PhaseFunction:
    """Poisson bracket ``{F, G}`` restricted to representable types.

    Outputs of type ``(0, 4)`` or ``(0, 5)`` are dropped. The largest
    discarded Fourier coefficient beyond the cutoff is stored as ``tail``.
    """
    F._compatible(G)
    allowed = set(ALLOWED_TYPES if out_types is None else out_types)
    lay = F.layout
    nA, nw = F.nA, F.nw
    acc: dict = {}
    cache: dict = {}

    def vals(f, tag, t):
        key = (tag, id(f), t)
        if key not in cache:
            cache[key] = _grid_values(f, t) if tag == "v" else _grid_dtheta(f, t)
        return cache[key]

    def add(out, arr, factor):
        arr = arr * factor
        if out in acc:
            if acc[out].shape[0] < arr.shape[0]:
                acc[out] = acc[out] + arr
            else:
                acc[out] += arr
        else:
            acc[out] = arr

    fact = math.factorial
    for t1 in _types_of(F):
        i1, j1 = t1
        for t2 in _types_of(G):
            i2, j2 = t2
            # (a) F_r . G_theta
            if nA and i1 >= 1 and t2 != FROZEN_TYPE:
                out = (i1 - 1 + i2, j1 + j2)
                if out in allowed:
                    VF = vals(F, "v", t1)
                    DG = vals(G, "d", t2)
                    P = max(VF.shape[0], DG.shape[0])
                    A = VF.reshape(VF.shape[0], nA, -1).transpose(0, 2, 1)
                    B = DG.reshape(DG.shape[0], nA, -1)
                    T = (A @ B).reshape((P,) + (nA,) * (i1 - 1) + (nw,) * j1
                                        + (nA,) * i2 + (nw,) * j2)
                    T = _reorder(T, i1 - 1, j1, i2, j2)
                    I, Jn = out
                    add(out, T, fact(I) * fact(Jn) / (
                        fact(i1 - 1) * fact(i2) * fact(j1) * fact(j2)))
            # (b) -F_theta . G_r
            if nA and i2 >= 1 and t1 != FROZEN_TYPE:
                out = (i1 + i2 - 1, j1 + j2)
                if out in allowed:
                    DF = vals(F, "d", t1)
                    VG = vals(G, "v", t2)
                    P = max(DF.shape[0], VG.shape[0])
                    A = DF.reshape(DF.shape[0], nA, -1).transpose(0, 2, 1)
                    B = VG.reshape(VG.shape[0], nA, -1)
                    T = (A @ B).reshape((P,) + (nA,) * i1 + (nw,) * j1
                                        + (nA,) * (i2 - 1) + (nw,) * j2)
                    T = _reorder(T, i1, j1, i2 - 1, j2)
                    I, Jn = out
                    add(out, T, -fact(I) * fact(Jn) / (
                        fact(i1) * fact(i2 - 1) * fact(j1) * fact(j2)))
            # (c) F_w Jb G_w
            if j1 >= 1 and j2 >= 1:
                out = (i1 + i2, j1 + j2 - 2)
                if out in allowed:
                    VF = vals(F, "v", t1)
                    VG = vals(G, "v", t2)
                    P = max(VF.shape[0], VG.shape[0])
                    A = apply_jb_right(VF.reshape(VF.shape[0], -1, nw))
                    R2 = nA ** i2
                    B = VG.reshape(VG.shape[0], R2, nw, -1).transpose(0, 2, 1, 3)
                    B = B.reshape(VG.shape[0], nw, -1)
                    T = (A @ B).reshape((P,) + (nA,) * i1 + (nw,) * (j1 - 1)
                                        + (nA,) * i2 + (nw,) * (j2 - 1))
                    T = _reorder(T, i1, j1 - 1, i2, j2 - 1)
                    I, Jn = out
                    add(out, T, fact(I) * fact(Jn) / (
                        fact(i1) * fact(i2) * fact(j1 - 1) * fact(j2 - 1)))
    res = PhaseFunction(F.model, F.N)
    tail = 0.0
    for (I, Jn), arr in acc.items():
        if arr.shape[0] != lay.P:
            arr = np.broadcast_to(arr, (lay.P,) + arr.shape[1:])
        c, tl = lay.from_grid(arr)
        tail = max(tail, tl)
        res.comps[(I, Jn)] = _reality(_symmetrize(c, I, Jn))
    res.tail = tail
    return res


def _reorder(T, ra, wa, rb, wb):
    """Reorder axes ``(P, ra, wa, rb, wb)`` into ``(P, ra, rb, wa, wb)``."""
    ax = [0]
    pos = 1
    r1 = list(range(pos, pos + ra)); pos += ra
    w1 = list(range(pos, pos + wa)); pos += wa
    r2 = list(range(pos, pos + rb)); pos += rb
    w2 = list(range(pos, pos + wb))
    return T.transpose(ax + r1 + r2 + w1 + w2)


def poisson(f: PhaseFunction, g: PhaseFunction):
    """Bracket split into its two-jet part and the remaining higher terms."""
    full = bracket(f, g)
    return full.jet(), full.nonjet()


def ad_series(S: PhaseFunction, G: PhaseFunction, n_terms: int):
    """Terms ``ad_S^n G / n!`` for ``n = 0..n_terms``."""
    terms = [G]
    cur = G
    for n in range(1, n_terms + 1):
        cur = bracket(S, cur).scale(1.0 / n)
        terms.append(cur)
    return terms


@dataclass
class LieTransformResult:
    value: PhaseFunction
    remainder_bound: float
    contraction: float
    term_norms: list


def transform_hamiltonian(H: PhaseFunction, S: PhaseFunction, n_lie: int = 6,
                          sigma: float = 0.0, mu: float = 1.0,
                          check: bool = True) -> LieTransformResult:
    """Lie transform ``H o Phi_S^1 = sum_{n<=n_lie} ad_S^n H / n!``.

    The contraction factor ``q`` is the largest ratio of consecutive term
    majorants over the last half of the series; the tail is bounded by
    ``|t_n| q / (1 - q)``.
    """
    terms = ad_series(S, H, n_lie)
    norms = [t.coef_norm(sigma, mu) for t in terms]
    ratios = [norms[n] / norms[n - 1] for n in range(1, len(norms))
              if norms[n - 1] > 0]
    tailr = ratios[len(ratios) // 2:] if ratios else []
    q = max(tailr, default=0.0)
    if check and q >= 0.5:
        raise SmallnessViolation(f"Lie series contraction factor {q:.3g} >= 1/2")
    bound = norms[-1] * q / (1 - q) if q < 1 else math.inf
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return LieTransformResult(total, bound, q, norms)


# ------------------------------------------------------------ jets

def jet_extract(f, model: LatticeModel | None = None, n_theta: int | None = None,
                radius: float = 0.5, n_contour: int = 16) -> JetFunction:
    """Two-jet of ``f`` at ``r = 0, w = 0`` as Fourier data.

    ``f`` is either a :class:`PhaseFunction` (exact) or a callable
    ``f(r, theta, w) -> complex`` evaluated on single points; callables are
    differentiated by Cauchy contour sums and Fourier-sampled in ``theta``.
    """
    if isinstance(f, PhaseFunction):
        return f.jet()
    if not callable(f):
        raise CapabilityError("jet_extract needs a PhaseFunction or callable")
    if model is None or n_theta is None:
        raise CapabilityError("callable input needs model and n_theta")
    lay = get_layout(model.n_angles, n_theta)
    nA, nw = model.n_angles, 2 * model.n_normal
    if nA:
        side = 2 * n_theta + 1
        t = 2 * np.pi * np.arange(side) / side
        g = np.meshgrid(*[t] * nA, indexing="ij")
        thetas = np.stack([x.ravel() for x in g], axis=1)
    else:
        thetas = np.zeros((1, 0))
    z = radius * np.exp(2j * np.pi * np.arange(n_contour) / n_contour)
    r0 = np.zeros(nA, complex)
    w0 = np.zeros(nw, complex)

    def ev(r, th, w):
        try:
            return complex(f(r, th, w))
        except Exception as exc:  # noqa: BLE001 - report as capability
            raise CapabilityError(f"cannot evaluate input: {exc}") from exc

    def coeff(fun, n):
        vals = np.array([fun(s) for s in z])
        return np.mean(vals * z ** (-n))

    n_pts = thetas.shape[0]
    f0 = np.zeros(n_pts, complex)
    fr = np.zeros((n_pts, nA), complex)
    fw = np.zeros((n_pts, nw), complex)
    fww = np.zeros((n_pts, nw, nw), complex)
    eye_r, eye_w = np.eye(nA), np.eye(nw)
    for p, th in enumerate(thetas):
        f0[p] = ev(r0, th, w0)
        for s in range(nA):
            fr[p, s] = coeff(lambda x: ev(x * eye_r[s], th, w0), 1)
        diag2 = np.zeros(nw, complex)
        for a in range(nw):
            fw[p, a] = coeff(lambda x: ev(r0, th, x * eye_w[a]), 1)
            diag2[a] = 2.0 * coeff(lambda x: ev(r0, th, x * eye_w[a]), 2)
            fww[p, a, a] = diag2[a]
        for a in range(nw):
            for b in range(a + 1, nw):
                d = 2.0 * coeff(lambda x: ev(r0, th, x * (eye_w[a] + eye_w[b])),
                                2)
                fww[p, a, b] = fww[p, b, a] = (d - diag2[a] - diag2[b]) / 2.0
    if nA:
        side = 2 * n_theta + 1

        def fourier(v):
            tail = v.shape[1:]
            arr = v.reshape((side,) * nA + tail)
            c = np.fft.fftn(arr, axes=tuple(range(nA)), norm="forward")
            c = np.fft.fftshift(c, axes=tuple(range(nA)))
            return c.reshape((lay.M,) + tail)
    else:
        def fourier(v):
            return v

    out = JetFunction.from_parts(model, n_theta, fourier(f0), fourier(fr),
                                 fourier(fw), fourier(fww))
    return out.enforce_reality()


# ------------------------------------------------------------ norms

@dataclass(frozen=True)
class TNormReport:
    sup_f: float
    sup_grad: float
    sup_hess: float
    total: float


def sample_domain(model: LatticeModel, dom: DomainSpec, gamma1: float,
                  gamma2: float, n_x: int, rng: np.random.Generator):
    """Random points near the boundary of the complex domain."""
    nA, n = model.n_angles, model.n_normal
    re = rng.uniform(0, 2 * np.pi, size=(n_x, nA))
    im = dom.sigma * rng.uniform(0.9, 1.0, size=(n_x, nA)) \
        * rng.choice([-1.0, 1.0], size=(n_x, nA))
    theta = re + 1j * im
    r = dom.mu * rng.uniform(0.9, 1.0, size=(n_x, nA)) \
        * np.exp(2j * np.pi * rng.uniform(size=(n_x, nA)))
    raw = rng.normal(size=(n_x, 2 * n)) + 1j * rng.normal(size=(n_x, 2 * n))
    arr = np.asarray(model.normal_sites, float).reshape(n, -1)
    nrm = np.sqrt((arr * arr).sum(-1)) if n else np.zeros(0)
    sw = np.repeat(np.exp(gamma1 * nrm) * np.maximum(nrm, 1.0) ** gamma2, 2)
    wv = raw / sw
    scale = np.sqrt(np.sum(np.abs(wv * sw) ** 2, axis=1, keepdims=True))
    scale[scale == 0] = 1.0
    w = dom.mu * rng.uniform(0.9, 1.0, size=(n_x, 1)) * wv / scale
    return r, theta, w, sw


class HessianNormer:
    """Weighted block norm of dense transverse Hessians."""

    def __init__(self, model: LatticeModel, gamma1, gamma2, kappa):
        sites = model.normal_array()
        n = len(sites)
        nrm = np.maximum(np.sqrt((sites.astype(float) ** 2).sum(-1)), 1.0) \
            if n else np.zeros(0)
        pd = pseudo_dist_matrix(sites, sites) if n else np.zeros((0, 0))
        self.W = (np.exp(gamma1 * pd) * np.maximum(pd, 1.0) ** gamma2
                  * np.minimum(nrm[:, None], nrm[None, :]) ** kappa)
        self.n = n

    def __call__(self, H: np.ndarray, C_w: float = 1.0) -> np.ndarray:
        """Norms of a stack ``(P, 2n, 2n)``."""
        P, n = H.shape[0], self.n
        if n == 0:
            return np.zeros(P)
        blocks = H.reshape(P, n, 2, n, 2).transpose(0, 1, 3, 2, 4)
        bn = block_opnorms(blocks.reshape(-1, 2, 2)).reshape(P, n, n) * self.W
        return C_w * np.maximum(bn.sum(2).max(1), bn.sum(1).max(1))


def t_norm(f: PhaseFunction, dom: DomainSpec, n_x: int = 256, seed: int = 0,
           n_gamma: int = 5) -> TNormReport:
    """Sampled three-component norm of ``f`` on the domain.

    The sup over intermediate weights runs over a geometric gamma1 grid
    between 0 and ``dom.gamma.gamma1`` with gamma2 held fixed.
    """
    from .block_matrix import gamma_grid
    model = f.model
    g = dom.gamma
    rng = np.random.default_rng(seed)
    sup_f = sup_g = sup_h = 0.0
    A = np.asarray(model.setA, float).reshape(model.n_angles, -1)
    nA_rm = np.sqrt((A * A).sum(-1)) if model.n_angles else np.zeros(0)
    for g1 in gamma_grid(0.0, g.gamma1, n_gamma):
        r, theta, w, sw = sample_domain(model, dom, g1, g.gamma2, n_x, rng)
        sup_f = max(sup_f, float(np.abs(f(r, theta, w)).max()))
        gr, gt, gw = f.gradient(r, theta, w)
        aw = np.exp(g1 * nA_rm) * np.maximum(nA_rm, 1.0) ** g.gamma2
        gn = np.sqrt(np.sum(np.abs(gw * sw) ** 2, axis=1)
                     + np.sum((np.abs(gr) ** 2 + np.abs(gt) ** 2) * aw ** 2,
                              axis=1))
        sup_g = max(sup_g, float(gn.max()))
        H = f.hessian_w(r, theta, w)
        hn = HessianNormer(model, g1, g.gamma2, g.kappa_decay)(H, g.C_w)
        sup_h = max(sup_h, float(hn.max()) if hn.size else 0.0)
    return TNormReport(sup_f, sup_g, sup_h, max(sup_f, sup_g, sup_h))


# ------------------------------------------------------------ flows

def hamiltonian_vector_field(S: PhaseFunction, x: np.ndarray) -> np.ndarray:
    """``(r', theta', w') = (-S_theta, S_r, J S_w)`` at a stacked point."""
    nA = S.nA
    gr, gt, gw = S.gradient(x[None, :nA], x[None, nA:2 * nA], x[None, 2 * nA:])
    return np.concatenate([-gt[0], gr[0], apply_j_vector(gw[0])])


def flow_point(S: PhaseFunction, t: float, x: PhasePoint, tol: float = 1e-12,
               domain: DomainSpec | None = None, bound: float = 2.0) -> PhasePoint:
    """Integrate the Hamiltonian flow of ``S`` for time ``t``.

    Uses an adaptive DOP853 integrator. With ``domain`` given, leaving the
    enlarged domain (``|Im theta| > bound sigma``, ``|r| > bound mu`` or
    ``|w| > bound mu``) raises :class:`FlowEscapeError` naming the time.
    """
    if abs(t) > 1:
        raise InvalidInputError("flow time must lie in [-1, 1]")
    nA = S.nA
    y0 = x.as_vector()
    if t == 0 or not S.comps and S.frozen is None:
        return PhasePoint.from_vector(y0, nA)

    def rhs(_, y):
        return hamiltonian_vector_field(S, y)

    events = None
    if domain is not None:
        def margin(_, y):
            m1 = bound * domain.sigma - np.max(np.abs(y[nA:2 * nA].imag),
                                               initial=0.0)
            m2 = bound * domain.mu - np.max(np.abs(y[:nA]), initial=0.0)
            m3 = bound * domain.mu - np.max(np.abs(y[2 * nA:]), initial=0.0)
            return min(m1, m2, m3)
        margin.terminal = True
        events = [margin]
    sol = solve_ivp(rhs, (0.0, t), y0, method="DOP853", rtol=tol, atol=tol,
                    events=events)
    if events is not None and sol.t_events[0].size:
        raise FlowEscapeError(sol.t_events[0][0])
    if not sol.success:
        raise FlowEscapeError(sol.t[-1], sol.message)
    return PhasePoint.from_vector(sol.y[:, -1], nA)


def flow_jacobian(S: PhaseFunction, t: float, x: PhasePoint, h: float = 1e-6,
                  tol: float = 1e-12) -> np.ndarray:
    """Central finite-difference Jacobian of the time-``t`` flow (real)."""
    y0 = x.as_vector().real
    n = y0.size
    nA = S.nA
    jac = np.zeros((n, n))
    for c in range(n):
        e = np.zeros(n)
        e[c] = h
        yp = flow_point(S, t, PhasePoint.from_vector(y0 + e, nA), tol)
        ym = flow_point(S, t, PhasePoint.from_vector(y0 - e, nA), tol)
        jac[:, c] = (yp.as_vector().real - ym.as_vector().real) / (2 * h)
    return jac


def symplectic_form_matrix(n_angles: int, nw: int) -> np.ndarray:
    """Matrix of the two-form in the stacked ``(r, theta, w)`` coordinates."""
    n = 2 * n_angles + nw
    om = np.zeros((n, n))
    for s in range(n_angles):
        # {r, theta} = 1 mirrors {p, q} = 1
        om[s, n_angles + s] = 1.0
        om[n_angles + s, s] = -1.0
    for i in range(nw // 2):
        a = 2 * n_angles + 2 * i
        om[a, a + 1] = 1.0
        om[a + 1, a] = -1.0
    return om


def symplecticity_defect(jac: np.ndarray, n_angles: int) -> float:
    """``max |Jac^T Om Jac - Om|`` for the canonical two-form ``Om``."""
    om = symplectic_form_matrix(n_angles, jac.shape[0] - 2 * n_angles)
    return float(np.abs(jac.T @ om @ jac - om).max())


# ------------------------------------------------------------ symmetry

@dataclass(frozen=True)
class Momentum:
    """Translation charges: per normal site and per angle."""

    site: np.ndarray
    angle: np.ndarray

    def z_charges(self) -> np.ndarray:
        """Charges of complex coordinates ``(xi_b, eta_b)``: ``+b`` and ``-b``."""
        s = np.asarray(self.site, dtype=np.int64)
        out = np.empty((2 * s.shape[0], s.shape[1]), dtype=np.int64)
        out[0::2] = s
        out[1::2] = -s
        return out


def _sym_transform(nw: int):
    from .block_matrix import U_SITE
    U = np.zeros((nw, nw), complex)
    for i in range(nw // 2):
        U[2 * i:2 * i + 2, 2 * i:2 * i + 2] = U_SITE
    return U, np.linalg.inv(U)


def momentum_project(f: PhaseFunction, mom: Momentum) -> PhaseFunction:
    """Keep only translation-invariant monomials.

    Each transverse index is rotated into ``(xi, eta)`` coordinates on all
    sites, entries whose total charge is nonzero are removed, and the tensor
    is rotated back.
    """
    U, Ui = _sym_transform(f.nw)
    zc = mom.z_charges()
    kc = f.layout.kvecs @ np.asarray(mom.angle, dtype=np.int64).reshape(
        f.nA, -1) if f.nA else np.zeros((f.layout.M, zc.shape[1]), np.int64)
    out = f.copy()
    for (i, j), C in f.comps.items():
        if j == 0:
            mask = np.all(kc == 0, axis=1)
            out.comps[(i, j)] = C * mask.reshape((-1,) + (1,) * (C.ndim - 1))
            continue
        Z = C
        for ax in range(j):
            Z = np.moveaxis(np.tensordot(Z, U, axes=([C.ndim - j + ax], [0])),
                            -1, C.ndim - j + ax)
        tot = kc.reshape((-1,) + (1,) * (i + j) + (kc.shape[1],))
        for ax in range(j):
            shape = [1] * (1 + i + j) + [zc.shape[1]]
            shape[1 + i + ax] = zc.shape[0]
            tot = tot + zc.reshape(shape)
        mask = np.all(tot == 0, axis=-1)
        Z = Z * mask
        for ax in range(j):
            Z = np.moveaxis(np.tensordot(Z, Ui, axes=([C.ndim - j + ax], [0])),
                            -1, C.ndim - j + ax)
        out.comps[(i, j)] = Z
    if f.frozen is not None:
        Z = f.frozen
        for ax in range(4):
            Z = np.moveaxis(np.tensordot(Z, U, axes=([ax], [0])), -1, ax)
        tot = np.zeros((1,) * 4 + (zc.shape[1],), np.int64)
        for ax in range(4):
            shape = [1] * 4 + [zc.shape[1]]
            shape[ax] = zc.shape[0]
            tot = tot + zc.reshape(shape)
        Z = Z * np.all(tot == 0, axis=-1)
        for ax in range(4):
            Z = np.moveaxis(np.tensordot(Z, Ui, axes=([ax], [0])), -1, ax)
        out.frozen = Z
    return out
