"""Weighted block-matrix algebra over a truncated lattice.

A :class:`BlockMatrix` maps site pairs ``(a, b)`` to complex 2x2 blocks.
Absent pairs are zero. Dense conversions use the model's normal-site order
with the ``(p, q)`` pair of each site stored contiguously.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .errors import InvalidInputError
from .lattice_blocks import (BlockDecomposition, LatticeModel, WeightParams,
                             weight_array)

# complex structure on vectors
J2 = np.array([[0.0, -1.0], [1.0, 0.0]])
I2 = np.eye(2)
# per-site change of variables w = U z with z = (xi, eta)
U_SITE = np.array([[1.0, 1.0], [-1j, 1j]]) / math.sqrt(2.0)
U_SITE_INV = np.linalg.inv(U_SITE)

ZERO_DROP = 1e-300


def block_opnorm(blk: np.ndarray) -> float:
    """Largest singular value of a 2x2 block, in closed form."""
    fro2 = float(np.sum(np.abs(blk) ** 2))
    det = abs(blk[0, 0] * blk[1, 1] - blk[0, 1] * blk[1, 0])
    disc = max(fro2 * fro2 - 4.0 * det * det, 0.0)
    return math.sqrt(max((fro2 + math.sqrt(disc)) / 2.0, 0.0))


def block_opnorms(blks: np.ndarray) -> np.ndarray:
    """Vectorized :func:`block_opnorm` over an ``(n, 2, 2)`` stack."""
    fro2 = np.sum(np.abs(blks) ** 2, axis=(1, 2))
    det = np.abs(blks[:, 0, 0] * blks[:, 1, 1] - blks[:, 0, 1] * blks[:, 1, 0])
    disc = np.maximum(fro2 * fro2 - 4.0 * det * det, 0.0)
    return np.sqrt(np.maximum((fro2 + np.sqrt(disc)) / 2.0, 0.0))


def pi_project(m: np.ndarray) -> np.ndarray:
    """Hilbert-Schmidt projection of a 2x2 block onto span{I, J}."""
    c = (m[0, 0] + m[1, 1]) / 2.0
    s = (m[1, 0] - m[0, 1]) / 2.0
    return c * I2 + s * J2


class BlockMatrix:
    """Finitely supported matrix of 2x2 complex blocks.

    Parameters
    ----------
    model : LatticeModel
        Lattice the indices live on.
    entries : dict, optional
        Mapping ``(site_a, site_b) -> 2x2 array``.
    """

    __slots__ = ("model", "entries")

    def __init__(self, model: LatticeModel, entries: dict | None = None):
        self.model = model
        self.entries = {}
        if entries:
            valid = set(model.all_sites())
            for (a, b), blk in entries.items():
                a = tuple(int(v) for v in a)
                b = tuple(int(v) for v in b)
                if a not in valid or b not in valid:
                    raise InvalidInputError(f"index {(a, b)} outside lattice")
                blk = np.asarray(blk, dtype=complex).reshape(2, 2)
                if np.abs(blk).max() > ZERO_DROP:
                    self.entries[(a, b)] = blk.copy()

    # ------------------------------------------------------------ builders
    @classmethod
    def identity(cls, model: LatticeModel, sites=None) -> "BlockMatrix":
        sites = model.normal_sites if sites is None else sites
        return cls(model, {(s, s): I2 for s in sites})

    @classmethod
    def from_dense(cls, model: LatticeModel, mat: np.ndarray) -> "BlockMatrix":
        """Build from a ``(2n, 2n)`` array over normal sites."""
        n = model.n_normal
        mat = np.asarray(mat)
        if mat.shape != (2 * n, 2 * n):
            raise InvalidInputError("dense matrix has the wrong shape")
        blocks = mat.reshape(n, 2, n, 2).transpose(0, 2, 1, 3)
        ii, jj = np.nonzero(np.abs(blocks).max(axis=(2, 3)) > ZERO_DROP)
        sites = model.normal_sites
        out = cls(model)
        for i, j in zip(ii, jj):
            out.entries[(sites[i], sites[j])] = blocks[i, j].astype(complex)
        return out

    def to_dense(self) -> np.ndarray:
        n = self.model.n_normal
        idx = self.model.site_index
        out = np.zeros((n, 2, n, 2), dtype=complex)
        for (a, b), blk in self.entries.items():
            if a not in idx or b not in idx:
                raise InvalidInputError("dense form covers normal sites only")
            out[idx[a], :, idx[b], :] = blk
        return out.reshape(2 * n, 2 * n)

    # ------------------------------------------------------------ algebra
    def copy(self) -> "BlockMatrix":
        out = BlockMatrix(self.model)
        out.entries = {k: v.copy() for k, v in self.entries.items()}
        return out

    def _check(self, other: "BlockMatrix"):
        if other.model is not self.model:
            raise InvalidInputError("block matrices live on different models")

    def __add__(self, other: "BlockMatrix") -> "BlockMatrix":
        self._check(other)
        out = self.copy()
        for k, v in other.entries.items():
            out.entries[k] = out.entries[k] + v if k in out.entries else v.copy()
        return out

    def __sub__(self, other: "BlockMatrix") -> "BlockMatrix":
        return self + other.scale(-1.0)

    def scale(self, c: complex) -> "BlockMatrix":
        out = BlockMatrix(self.model)
        out.entries = {k: c * v for k, v in self.entries.items()}
        return out

    def transpose(self) -> "BlockMatrix":
        """Blockwise transpose ``(A^T)_a^b = (A_b^a)^T``."""
        out = BlockMatrix(self.model)
        out.entries = {(b, a): v.T.copy() for (a, b), v in self.entries.items()}
        return out

    def conj(self) -> "BlockMatrix":
        out = BlockMatrix(self.model)
        out.entries = {k: v.conj() for k, v in self.entries.items()}
        return out

    def max_abs(self) -> float:
        if not self.entries:
            return 0.0
        return float(max(np.abs(v).max() for v in self.entries.values()))

    def allclose(self, other: "BlockMatrix", atol: float = 1e-12) -> bool:
        return (self - other).max_abs() <= atol

    def __repr__(self) -> str:
        return f"BlockMatrix(nnz_blocks={len(self.entries)})"


def multiply(A: BlockMatrix, B: BlockMatrix) -> BlockMatrix:
    """Matrix product ``(AB)_a^b = sum_c A_a^c B_c^b``."""
    A._check(B)
    rows: dict = {}
    for (c, b), blk in B.entries.items():
        rows.setdefault(c, []).append((b, blk))
    out: dict = {}
    for (a, c), ablk in A.entries.items():
        for b, bblk in rows.get(c, ()):
            key = (a, b)
            prod = ablk @ bblk
            out[key] = out[key] + prod if key in out else prod
    res = BlockMatrix(A.model)
    res.entries = {k: v for k, v in out.items() if np.abs(v).max() > ZERO_DROP}
    return res


def m_norm(A: BlockMatrix, p: WeightParams) -> float:
    """Weighted norm: max of the weighted row sums and column sums."""
    if not A.entries:
        return 0.0
    keys = list(A.entries)
    sites = sorted({s for k in keys for s in k})
    pos = {s: i for i, s in enumerate(sites)}
    xa = np.array([k[0] for k in keys], dtype=np.int64).reshape(len(keys), -1)
    xb = np.array([k[1] for k in keys], dtype=np.int64).reshape(len(keys), -1)
    w = weight_array(xa, xb, p, pairwise=False)
    norms = block_opnorms(np.stack([A.entries[k] for k in keys]))
    rows = np.array([pos[k[0]] for k in keys], dtype=np.int64)
    cols = np.array([pos[k[1]] for k in keys], dtype=np.int64)
    return _kernels.rowcol_max(rows, cols, norms * w, len(sites))


def site_weights(model: LatticeModel, gamma1: float, gamma2: float,
                 sites=None) -> np.ndarray:
    """Per-site factors ``e^{gamma1 |a|} <a>^{gamma2}``."""
    sites = model.normal_sites if sites is None else sites
    arr = np.asarray(sites, dtype=float).reshape(len(sites), -1)
    nrm = np.sqrt((arr * arr).sum(-1))
    return np.exp(gamma1 * nrm) * np.maximum(nrm, 1.0) ** gamma2


def op_norm(A: BlockMatrix, gamma1: float, gamma2: float) -> float:
    """Operator norm of ``A`` acting on the weighted space, by dense SVD."""
    if not A.entries:
        return 0.0
    dw = np.repeat(site_weights(A.model, gamma1, gamma2), 2)
    mat = A.to_dense() * dw[:, None] / dw[None, :]
    return float(np.linalg.norm(mat, 2))


@dataclass(frozen=True)
class MatrixNormReport:
    m_norm: float
    op_norm: float
    mb_norm: float


def mb_norm(A: BlockMatrix, p: WeightParams, m_star: float) -> MatrixNormReport:
    """Bounded-operator norm plus the companion norm with shifted gamma2."""
    op = op_norm(A, p.gamma1, p.gamma2)
    comp = m_norm(A, p.with_(gamma2=p.gamma2 + p.kappa_decay - m_star))
    return MatrixNormReport(m_norm(A, p), op, op + comp)


def gamma_grid(gamma1_lo: float, gamma1_hi: float, n: int = 5) -> np.ndarray:
    """Grid in gamma1 including both endpoints, geometric away from zero."""
    if gamma1_hi <= 0:
        return np.zeros(1)
    if gamma1_lo <= 0:
        return np.concatenate([[0.0], np.geomspace(gamma1_hi / 2 ** (n - 2),
                                                   gamma1_hi, n - 1)])
    return np.geomspace(gamma1_lo, gamma1_hi, n)


def mb_norm_sup(A: BlockMatrix, p: WeightParams, m_star: float,
                gamma1_lo: float = 0.0) -> float:
    """Sup of :func:`mb_norm` over a gamma1 grid with gamma2 = m_star."""
    return max(mb_norm(A, p.with_(gamma1=g, gamma2=m_star), m_star).mb_norm
               for g in gamma_grid(gamma1_lo, p.gamma1))


def apply(A: BlockMatrix, zeta, gamma_tilde=None, gamma=None):
    """Action ``(A zeta)_a = sum_b A_a^b zeta_b``.

    Parameters
    ----------
    zeta : dict or ndarray
        Either ``site -> 2-vector`` or an ``(n_normal, 2)`` array.
    gamma_tilde, gamma : pair of float, optional
        When both are given, ``-gamma <= gamma_tilde <= gamma`` is enforced.
    """
    if gamma_tilde is not None and gamma is not None:
        for gt, g in zip(gamma_tilde, gamma):
            if abs(gt) > g + 1e-15:
                raise InvalidInputError("gamma_tilde outside [-gamma, gamma]")
    if isinstance(zeta, dict):
        out: dict = {}
        for (a, b), blk in A.entries.items():
            if b in zeta:
                v = blk @ np.asarray(zeta[b], dtype=complex)
                out[a] = out[a] + v if a in out else v
        return out
    vec = np.asarray(zeta).reshape(-1)
    return (A.to_dense() @ vec).reshape(-1, 2)


# ---------------------------------------------------------- normal forms

@dataclass(frozen=True, eq=False)
class NormalFormMatrix:
    """Real symmetric block-diagonal matrix, span{I,J}-valued on Lambda_inf."""

    base: BlockMatrix
    delta: object
    decomposition: BlockDecomposition | None = None

    def check(self, tol: float = 0.0) -> dict:
        """Report the four structural invariants (True means satisfied)."""
        A = self.base
        F = set(A.model.setF)
        real = all(np.abs(v.imag).max() <= tol for v in A.entries.values())
        sym = True
        for (a, b), v in A.entries.items():
            w = A.entries.get((b, a))
            if w is None or np.abs(w.T - v).max() > tol:
                sym = False
                break
        diag = True
        if self.decomposition is not None:
            bo = self.decomposition.block_of
            diag = all(bo[a] == bo[b] for a, b in A.entries)
        pi_ok = all(np.abs(pi_project(v) - v).max() <= tol
                    for (a, b), v in A.entries.items()
                    if a not in F and b not in F)
        return {"real": real, "symmetric": sym, "block_diagonal": diag,
                "pi_invariant": pi_ok}

    def is_valid(self, tol: float = 0.0) -> bool:
        return all(self.check(tol).values())


def nf_project(A: BlockMatrix, d: BlockDecomposition) -> NormalFormMatrix:
    """Project onto normal-form matrices for the decomposition ``d``."""
    F = set(A.model.setF)
    bo = d.block_of
    kept = {k: v for k, v in A.entries.items()
            if k[0] in bo and k[1] in bo and bo[k[0]] == bo[k[1]]}
    out: dict = {}
    for (a, b), v in kept.items():
        w = kept.get((b, a))
        sym = (v + w.T) / 2.0 if w is not None else v / 2.0
        blk = sym.real.astype(complex)
        if a not in F and b not in F:
            blk = pi_project(blk)
        out[(a, b)] = blk
    for (a, b), v in list(out.items()):
        if (b, a) not in out:
            out[(b, a)] = v.T.copy()
    res = BlockMatrix(A.model)
    res.entries = {k: v for k, v in out.items() if np.abs(v).max() > ZERO_DROP}
    return NormalFormMatrix(res, d.delta, d)


def _site_transform(model: LatticeModel, site) -> np.ndarray:
    return I2 if site in set(model.setF) else U_SITE


def to_complex(A: BlockMatrix) -> BlockMatrix:
    """Quadratic-form change of variables ``B_a^b = U_a^T A_a^b U_b``.

    ``U`` sends ``(xi, eta)`` to ``(p, q)`` with ``xi = (p + i q)/sqrt 2``
    on Lambda_inf sites and is the identity on F sites.
    """
    F = set(A.model.setF)
    out = BlockMatrix(A.model)
    for (a, b), v in A.entries.items():
        ua = I2 if a in F else U_SITE
        ub = I2 if b in F else U_SITE
        out.entries[(a, b)] = ua.T @ v @ ub
    return out


def from_complex(B: BlockMatrix) -> BlockMatrix:
    """Inverse of :func:`to_complex`."""
    F = set(B.model.setF)
    out = BlockMatrix(B.model)
    for (a, b), v in B.entries.items():
        ua = I2 if a in F else U_SITE_INV
        ub = I2 if b in F else U_SITE_INV
        out.entries[(a, b)] = ua.T @ v @ ub
    return out


def dense_transform(model: LatticeModel, F_identity: bool = True) -> np.ndarray:
    """Dense ``(2n, 2n)`` matrix of the per-site transform ``U``."""
    n = model.n_normal
    out = np.zeros((2 * n, 2 * n), dtype=complex)
    nF = model.n_F if F_identity else 0
    for i in range(n):
        out[2 * i:2 * i + 2, 2 * i:2 * i + 2] = I2 if i < nF else U_SITE
    return out
