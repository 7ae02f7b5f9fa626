"""Divisor operators, exclusion by sampling, smooth cutoffs and A1/A2 checks.

All operators are built from a :class:`NormalFormData` snapshot, i.e. a
normal-form Hamiltonian evaluated at one parameter point. In complex
coordinates ``z = (xi, eta)`` the transverse part of the homological
operator is ``D = U^T A Jb U^{-T}``; divisor operators are
``<k,omega> I - i D`` restricted to blocks, and the Sylvester-type pair
operators ``X -> <k,omega> X - i (D_a X - X D'_b)`` with
``D' = U^{-1} Jb A U``.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .block_matrix import dense_transform
from .errors import InvalidInputError
from .lattice_blocks import BlockDecomposition, LatticeModel
from .phase_functions import apply_jb_right

SINGULAR_FLOOR = 1e-300


# ------------------------------------------------------------ evaluated NF

@dataclass
class NormalFormData:
    """A normal-form Hamiltonian frozen at one parameter point.

    ``A`` is the real symmetric matrix of the quadratic part
    ``1/2 <w, A w>`` in the model's normal-site order.
    """

    model: LatticeModel
    omega: np.ndarray
    A: np.ndarray
    _cache: dict = field(default_factory=dict, repr=False)

    def _transforms(self):
        if "U" not in self._cache:
            U = dense_transform(self.model)
            self._cache["U"] = U
            self._cache["Ui"] = np.linalg.inv(U)
        return self._cache["U"], self._cache["Ui"]

    @property
    def D(self) -> np.ndarray:
        """Vector-side operator ``U^T A Jb U^{-T}`` in complex coordinates."""
        if "D" not in self._cache:
            U, Ui = self._transforms()
            AJ = apply_jb_right(self.A.astype(complex))
            self._cache["D"] = U.T @ AJ @ Ui.T
        return self._cache["D"]

    @property
    def Dp(self) -> np.ndarray:
        """Right operator ``U^{-1} Jb A U`` of the Sylvester equation."""
        if "Dp" not in self._cache:
            U, Ui = self._transforms()
            JA = -apply_jb_right(self.A.T.astype(complex)).T
            self._cache["Dp"] = Ui @ JA @ U
        return self._cache["Dp"]

    @property
    def Az(self) -> np.ndarray:
        """Quadratic form in complex coordinates, ``U^T A U``."""
        if "Az" not in self._cache:
            U, _ = self._transforms()
            self._cache["Az"] = U.T @ self.A @ U
        return self._cache["Az"]

    def freq(self, k) -> float:
        return float(np.dot(np.asarray(k, float), self.omega))


def _nfdata(h, rho) -> NormalFormData:
    if isinstance(h, NormalFormData):
        return h
    if hasattr(h, "evaluate"):
        return h.evaluate(rho)
    return h(rho)


@dataclass
class DivisorOperator:
    """Dense divisor matrix for one mode and one or two blocks."""

    kind: str
    k: tuple
    blocks: tuple
    matrix: np.ndarray


def inv_norm(L) -> float:
    """``1 / sigma_min`` by dense SVD; infinity for singular input."""
    mat = L.matrix if isinstance(L, DivisorOperator) else np.asarray(L)
    if mat.size == 0:
        return 0.0
    smin = np.linalg.svd(mat, compute_uv=False).min()
    return math.inf if smin < SINGULAR_FLOOR else 1.0 / smin


def sigma_min(mat: np.ndarray) -> float:
    if mat.size == 0:
        return math.inf
    return float(np.linalg.svd(mat, compute_uv=False).min())


def build_scalar(k, h, rho=None) -> DivisorOperator:
    """The 1x1 divisor ``<k, omega(rho)>``."""
    k = tuple(int(v) for v in np.atleast_1d(k))
    if not any(k):
        raise InvalidInputError("scalar divisor needs k != 0")
    nf = _nfdata(h, rho)
    return DivisorOperator("scalar", k, (), np.array([[nf.freq(k)]],
                                                     dtype=complex))


def block_z_indices(decomp: BlockDecomposition, block_id: int) -> np.ndarray:
    """Complex-coordinate indices ``(2i, 2i+1)`` of a block's sites."""
    idx = decomp.indices(block_id)
    return np.stack([2 * idx, 2 * idx + 1], axis=1).ravel()


def build_block(k, block_id: int, h, rho=None,
                decomp: BlockDecomposition | None = None) -> DivisorOperator:
    """Block divisor ``<k,omega> I - i D`` restricted to one block.

    On Lambda_inf blocks this splits into ``<k,omega> + Q`` on ``xi`` and
    ``<k,omega> - Q^T`` on ``eta``; on the F block it is the transpose of
    ``<k,omega> - i J H``.
    """
    if decomp is None or not 0 <= block_id < decomp.n_blocks:
        raise InvalidInputError(f"unknown block {block_id}")
    k = tuple(int(v) for v in np.atleast_1d(k))
    nf = _nfdata(h, rho)
    ix = block_z_indices(decomp, block_id)
    D = nf.D[np.ix_(ix, ix)]
    mat = nf.freq(k) * np.eye(len(ix)) - 1j * D
    return DivisorOperator("block", k, (block_id,), mat)


def sylvester_matrix(c: complex, Da: np.ndarray, Dpb: np.ndarray) -> np.ndarray:
    """Matrix of ``X -> c X + Da X - X Dpb`` on row-major ``vec(X)``."""
    na, nb = Da.shape[0], Dpb.shape[0]
    return (c * np.eye(na * nb) + np.kron(Da, np.eye(nb))
            - np.kron(np.eye(na), Dpb.T))


def build_pair(k, block_a: int, block_b: int, h, rho=None,
               decomp: BlockDecomposition | None = None) -> DivisorOperator:
    """Pair operator ``X -> <k,omega> X - i (D_a X - X D'_b)``."""
    if decomp is None:
        raise InvalidInputError("build_pair needs a decomposition")
    k = tuple(int(v) for v in np.atleast_1d(k))
    nf = _nfdata(h, rho)
    ia = block_z_indices(decomp, block_a)
    ib = block_z_indices(decomp, block_b)
    mat = sylvester_matrix(nf.freq(k), -1j * nf.D[np.ix_(ia, ia)],
                           -1j * nf.Dp[np.ix_(ib, ib)])
    return DivisorOperator("pair", k, (block_a, block_b), mat)


# ------------------------------------------------------------ sampling

@dataclass
class ParamDomain:
    """Parameter samples in the unit ball of ``R^dim_P``."""

    dim_P: int
    samples: np.ndarray
    seed: int = 0

    def __post_init__(self):
        self.samples = np.asarray(self.samples, float).reshape(-1, self.dim_P)
        if np.any(np.linalg.norm(self.samples, axis=1) > 1 + 1e-12):
            raise InvalidInputError("parameter samples must lie in the unit ball")

    @classmethod
    def random(cls, dim_P: int, n: int, seed: int = 0) -> "ParamDomain":
        rng = np.random.default_rng(seed)
        d = rng.normal(size=(n, dim_P))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        rad = rng.uniform(size=(n, 1)) ** (1.0 / dim_P)
        return cls(dim_P, d * rad, seed)

    @classmethod
    def grid(cls, n: int) -> "ParamDomain":
        """Regular midpoint grid on ``[-1, 1]`` (one parameter)."""
        pts = -1 + (2 * np.arange(n) + 1) / n
        return cls(1, pts[:, None], 0)


def k_vectors(n_angles: int, N: int) -> np.ndarray:
    """Nonzero integer vectors with ``|k|_1 <= N``."""
    if n_angles == 0:
        return np.zeros((0, 0), dtype=np.int64)
    rng = np.arange(-N, N + 1)
    g = np.meshgrid(*[rng] * n_angles, indexing="ij")
    ks = np.stack([x.ravel() for x in g], axis=1)
    l1 = np.abs(ks).sum(1)
    return ks[(l1 > 0) & (l1 <= N)]


@dataclass
class ExclusionReport:
    kappa: list
    N: int
    excluded_fraction: list
    slope: float | None
    worst_inverse: dict
    n_samples: int
    min_divisors: np.ndarray = field(repr=False, default=None)

    def rows(self):
        """Table rows ``(kappa, N, excluded_fraction, slope, worst_margin)``."""
        slope = self.slope
        worst = max(self.worst_inverse.values(), default=0.0)
        return [(kp, self.N, fr, slope, worst)
                for kp, fr in zip(self.kappa, self.excluded_fraction)]


def sample_min_divisor(h, rho, N: int, decomp: BlockDecomposition | None,
                       kinds=("scalar", "block", "pair"),
                       delta_prime=math.inf) -> dict:
    """Smallest singular value per operator kind at one parameter point.

    Structural zero divisors (``k = 0`` and the difference component on one
    sphere) are never included, matching the homological solver.
    """
    nf = _nfdata(h, rho)
    out = {kd: math.inf for kd in kinds}
    ks = k_vectors(len(nf.omega), N)
    if "scalar" in kinds and len(ks):
        out["scalar"] = float(np.abs(ks @ nf.omega).min())
    if decomp is None:
        return out
    nb = decomp.n_blocks
    if "block" in kinds:
        for k in ks:
            for b in range(nb):
                out["block"] = min(out["block"],
                                   sigma_min(build_block(k, b, nf, None,
                                                         decomp).matrix))
    if "pair" in kinds:
        for k in ks:
            for a in range(nb):
                for b in range(nb):
                    if decomp.rep_dist(a, b) > delta_prime:
                        continue
                    out["pair"] = min(out["pair"], sigma_min(
                        build_pair(k, a, b, nf, None, decomp).matrix))
    return out


def loglog_slope(x, y) -> float | None:
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    ok = (x > 0) & (y > 0)
    if ok.sum() < 2:
        return None
    return float(np.polyfit(np.log(x[ok]), np.log(y[ok]), 1)[0])


def scan_measure(h, kappa, N: int, domain: ParamDomain,
                 decomp: BlockDecomposition | None = None,
                 kinds=("scalar", "block", "pair"), delta_prime=math.inf,
                 workers: int = 1) -> ExclusionReport:
    """Excluded fraction of parameter samples for one or several ``kappa``.

    ``h`` is a callable ``rho -> NormalFormData`` or an object with an
    ``evaluate`` method. A sample is excluded at threshold ``kappa`` when
    some retained divisor has smallest singular value below ``kappa``.
    """
    kappas = [float(kappa)] if np.isscalar(kappa) else [float(x) for x in kappa]
    if len(domain.samples) < 100:
        raise InvalidInputError("scan_measure needs at least 100 samples")

    def one(rho):
        return sample_min_divisor(h, rho, N, decomp, kinds, delta_prime)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            per = list(ex.map(one, domain.samples))
    else:
        per = [one(rho) for rho in domain.samples]
    mins = np.array([min(d.values()) for d in per])
    fracs = [float(np.mean(mins < kp)) for kp in kappas]
    worst = {kd: max((1.0 / d[kd] if d[kd] > 0 else math.inf) for d in per)
             for kd in kinds}
    slope = loglog_slope(kappas, fracs) if len(kappas) > 1 else None
    return ExclusionReport(kappas, N, fracs, slope, worst, len(per), mins)


def sampled_measure(fun: Callable, eps_grid, domain: ParamDomain):
    """Fraction of samples with ``|fun(rho)| < eps`` and its log-log slope."""
    vals = np.abs(np.array([fun(rho) for rho in domain.samples], dtype=float))
    fracs = [float(np.mean(vals < e)) for e in eps_grid]
    return fracs, loglog_slope(eps_grid, fracs)


# ------------------------------------------------------------ cutoff

def _psi(x):
    out = np.zeros_like(x)
    pos = x > 0
    out[pos] = np.exp(-1.0 / x[pos])
    return out


def cutoff(t, lo: float, hi: float):
    """Smooth monotone transition: 0 for ``t <= lo``, 1 for ``t >= hi``."""
    if not lo < hi:
        raise InvalidInputError("cutoff needs lo < hi")
    s = (np.asarray(t, float) - lo) / (hi - lo)
    a, b = _psi(s), _psi(1.0 - s)
    val = a / (a + b)
    return float(val) if np.ndim(val) == 0 else val


# ------------------------------------------------------------ assumptions

@dataclass
class A1Report:
    margins: dict
    worst: dict
    ok: bool


def check_A1(lam: dict, c: float, c_prime: float, beta2: float = 2.0,
             beta3: float = 2.0, H_F=None) -> A1Report:
    """Margins of the four spectral-asymptotics conditions.

    ``lam`` maps Lambda_inf sites to ``lambda_a``; positive margins mean the
    condition holds. ``H_F`` is the symmetric F-block matrix, if any.
    """
    sites = list(lam)
    vals = np.array([lam[s] for s in sites], float)
    n2 = np.array([sum(v * v for v in s) for s in sites], float)
    br = np.maximum(np.sqrt(n2), 1.0)
    m = {}
    m["asymptotics"] = c * br ** (-beta2) - np.abs(vals - n2)
    diff = (vals[:, None] - vals[None, :]) - (n2[:, None] - n2[None, :])
    bound = c_prime * c * np.maximum(br[:, None] ** (-beta3),
                                     br[None, :] ** (-beta3))
    m["difference"] = (bound - np.abs(diff))[np.triu_indices(len(sites), 1)]
    eq = [vals - c_prime]
    sep = np.abs(vals[:, None] - vals[None, :])
    dist = n2[:, None] != n2[None, :]
    sepm = [(sep - c_prime)[dist]]
    if H_F is not None and len(H_F):
        nF = H_F.shape[0] // 2
        J = np.kron(np.eye(nF), np.array([[0.0, -1.0], [1.0, 0.0]]))
        JH = J @ H_F
        eq.append(np.array([1.0 / c_prime - inv_norm(JH)]))
        sepm.append(np.array([1.0 / c_prime
                              - inv_norm(lv * np.eye(2 * nF) - 1j * JH)
                              for lv in vals]))
    m["lower_bound"] = np.concatenate(eq)
    m["separation"] = np.concatenate(sepm) if sepm else np.zeros(0)
    worst = {kk: (float(v.min()) if v.size else math.inf) for kk, v in m.items()}
    return A1Report(m, worst, all(w > 0 for w in worst.values()))


@dataclass
class A2Row:
    k: tuple
    case: str
    branch: str
    margin: float


def _fd(fun, rho, z, h=1e-4):
    """Central difference with one Richardson step."""
    e = np.zeros_like(rho)
    e[z] = 1.0

    def cd(step):
        return (fun(rho + step * e) - fun(rho - step * e)) / (2 * step)
    return (4 * cd(h / 2) - cd(h)) / 3


def check_A2_sampled(h, domain: ParamDomain, delta0: float, N: int,
                     decomp: BlockDecomposition | None = None) -> list:
    """Sampled transversality dichotomy for every ``k`` and case.

    Case ``(i)`` covers the scalar divisor (no block) and the ``xi`` pieces
    of single Lambda_inf blocks; ``(ii)`` the sum pair operators; ``(iii)``
    the difference pair operators. A row lands in branch ``invertible``
    when the operator keeps ``sigma_min >= delta0`` at every sample, in
    ``derivative`` when some parameter direction moves every eigenvalue at
    rate ``>= delta0`` (Hellmann-Feynman with tracked eigenvectors), and in
    ``failure`` otherwise.
    """
    nfs = {}

    def nf(rho):
        key = tuple(np.round(rho, 15))
        if key not in nfs:
            nfs[key] = _nfdata(h, rho)
        return nfs[key]

    ops = []
    nA = len(nf(domain.samples[0]).omega)
    for k in k_vectors(nA, N):
        ops.append((tuple(k), "(i)", None))
        if decomp is None:
            continue
        inf_blocks = [b for b in range(decomp.n_blocks) if not decomp.is_F(b)]
        for b in inf_blocks:
            ops.append((tuple(k), "(i)", (b,)))
        for a in inf_blocks:
            for b in inf_blocks:
                if a <= b:
                    ops.append((tuple(k), "(ii)", (a, b)))
                ops.append((tuple(k), "(iii)", (a, b)))

    def hermitian(rho, k, case, blocks):
        d = nf(rho)
        c = d.freq(k)
        if blocks is None:
            return np.array([[c]])
        Q = {}
        for b in set(blocks):
            ix = decomp.indices(b)
            Q[b] = d.Az[np.ix_(2 * ix, 2 * ix + 1)].real
        if case == "(i)":
            return c * np.eye(len(Q[blocks[0]])) + Q[blocks[0]]
        Qa, Qb = Q[blocks[0]], Q[blocks[1]]
        sign = 1.0 if case == "(ii)" else -1.0
        return (c * np.eye(Qa.shape[0] * Qb.shape[0])
                + np.kron(Qa, np.eye(Qb.shape[0]))
                + sign * np.kron(np.eye(Qa.shape[0]), Qb.T))

    rows = []
    dim = domain.dim_P
    for k, case, blocks in ops:
        if case == "(iii)" and blocks[0] == blocks[1] and not any(k):
            continue
        smins = []
        dmargin = math.inf
        for rho in domain.samples:
            L = hermitian(rho, k, case, blocks)
            ev, vec = np.linalg.eigh((L + L.T) / 2)
            smins.append(float(np.abs(ev).min()))
            best = 0.0
            for z in range(dim):
                dL = _fd(lambda x: hermitian(x, k, case, blocks), rho, z)
                rates = np.abs(np.einsum("ij,ik,kj->j", vec, dL, vec))
                best = max(best, float(rates.min()))
            dmargin = min(dmargin, best)
        inv_margin = min(smins)
        if inv_margin >= delta0:
            rows.append(A2Row(k, case, "invertible", inv_margin - delta0))
        elif dmargin >= delta0:
            rows.append(A2Row(k, case, "derivative", dmargin - delta0))
        else:
            rows.append(A2Row(k, case, "failure",
                              max(inv_margin, dmargin) - delta0))
    return rows
