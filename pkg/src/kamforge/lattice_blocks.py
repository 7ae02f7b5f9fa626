"""Truncated lattices, the pseudo-metric, block decompositions and weights."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from itertools import product
from typing import Sequence

import numpy as np

from . import _kernels
from .errors import InvalidInputError


class _InfiniteDelta:
    """Sentinel for the block scale that merges whole spheres."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self) -> str:
        return "INF_DELTA"

    def __reduce__(self):
        return (_InfiniteDelta, ())


INF_DELTA = _InfiniteDelta()


def is_infinite(delta) -> bool:
    return delta is INF_DELTA


def _as_site(a) -> tuple[int, ...]:
    return tuple(int(v) for v in a)


def norm2(a) -> int:
    return sum(int(v) * int(v) for v in a)


def bracket_norm(a) -> float:
    """``max(|a|, 1)``."""
    return max(math.sqrt(norm2(a)), 1.0)


def pseudo_dist(a, b) -> float:
    """Pseudo-distance ``min(|a-b|, |a+b|)`` between two sites."""
    if len(a) != len(b):
        raise InvalidInputError(f"dimension mismatch: {len(a)} vs {len(b)}")
    d1 = sum((int(x) - int(y)) ** 2 for x, y in zip(a, b))
    d2 = sum((int(x) + int(y)) ** 2 for x, y in zip(a, b))
    return math.sqrt(min(d1, d2))


def pseudo_dist_matrix(xs, ys) -> np.ndarray:
    """All pairwise pseudo-distances between two site arrays."""
    xs = np.asarray(xs, dtype=np.int64).reshape(len(xs), -1)
    ys = np.asarray(ys, dtype=np.int64).reshape(len(ys), -1)
    if len(xs) == 0 or len(ys) == 0:
        return np.zeros((len(xs), len(ys)))
    return np.sqrt(_kernels.pdist2(xs, ys).astype(float))


@dataclass(frozen=True)
class WeightParams:
    """Parameters of the weight ``e_{gamma,kappa}``.

    Parameters
    ----------
    gamma1 : float
        Exponential rate, nonnegative.
    gamma2 : float
        Polynomial rate.
    kappa_decay : float
        Decay exponent applied to ``min(<a>, <b>)``.
    C_w : float
        Multiplicative constant, at least 1.
    """

    gamma1: float = 0.0
    gamma2: float = 0.0
    kappa_decay: float = 0.0
    C_w: float = 1.0

    def __post_init__(self):
        if self.gamma1 < 0:
            raise InvalidInputError("gamma1 must be >= 0")
        if self.C_w < 1:
            raise InvalidInputError("C_w must be >= 1")

    def with_(self, **kw) -> "WeightParams":
        vals = dict(gamma1=self.gamma1, gamma2=self.gamma2,
                    kappa_decay=self.kappa_decay, C_w=self.C_w)
        vals.update(kw)
        return WeightParams(**vals)


def weight(a, b, p: WeightParams) -> float:
    """Weight ``C_w e^{g1 [a-b]} max([a-b],1)^{g2} min(<a>,<b>)^kappa``."""
    d = pseudo_dist(a, b)
    return (p.C_w * math.exp(p.gamma1 * d) * max(d, 1.0) ** p.gamma2
            * min(bracket_norm(a), bracket_norm(b)) ** p.kappa_decay)


def weight_array(xs, ys, p: WeightParams, pairwise: bool = True) -> np.ndarray:
    """Vectorized weights, pairwise (outer) or elementwise (zipped)."""
    xs = np.asarray(xs, dtype=np.int64)
    ys = np.asarray(ys, dtype=np.int64)
    nx = np.maximum(np.sqrt((xs * xs).sum(-1).astype(float)), 1.0)
    ny = np.maximum(np.sqrt((ys * ys).sum(-1).astype(float)), 1.0)
    if pairwise:
        pd = pseudo_dist_matrix(xs, ys)
        na, nb = nx[:, None], ny[None, :]
    else:
        d1 = ((xs - ys) ** 2).sum(-1)
        d2 = ((xs + ys) ** 2).sum(-1)
        pd = np.sqrt(np.minimum(d1, d2).astype(float))
        na, nb = nx, ny
    return _kernels.weights(pd, na, nb, p.gamma1, p.gamma2, p.kappa_decay,
                            p.C_w)


@dataclass(frozen=True, eq=False)
class LatticeModel:
    """Index sets of a truncated lattice.

    Sites with Euclidean norm at most ``R_lat`` form the lattice. ``setA``
    holds the tangential (action-angle) sites, ``setF`` the hyperbolic
    sites, and the remaining sites form ``lambda_inf``.
    """

    d_star: int
    setA: tuple
    setF: tuple
    R_lat: float
    lambda_inf: tuple = field(init=False)
    normal_sites: tuple = field(init=False)
    site_index: dict = field(init=False, repr=False)

    def __post_init__(self):
        if self.d_star < 1:
            raise InvalidInputError("d_star must be positive")
        if self.R_lat <= 0:
            raise InvalidInputError("R_lat must be positive")
        A = tuple(_as_site(a) for a in self.setA)
        F = tuple(_as_site(a) for a in self.setF)
        for s in A + F:
            if len(s) != self.d_star:
                raise InvalidInputError(f"site {s} has wrong dimension")
            if norm2(s) > self.R_lat ** 2 + 1e-9:
                raise InvalidInputError(f"site {s} outside truncation radius")
        if len(set(A)) != len(A) or len(set(F)) != len(F):
            raise InvalidInputError("duplicate sites")
        if set(A) & set(F):
            raise InvalidInputError("A and F must be disjoint")
        taken = set(A) | set(F)
        rest = [s for s in lattice_points(self.d_star, self.R_lat)
                if s not in taken]
        rest.sort(key=lambda s: (norm2(s), s))
        object.__setattr__(self, "setA", A)
        object.__setattr__(self, "setF", F)
        object.__setattr__(self, "lambda_inf", tuple(rest))
        normal = F + tuple(rest)
        object.__setattr__(self, "normal_sites", normal)
        object.__setattr__(self, "site_index",
                           {s: i for i, s in enumerate(normal)})

    @property
    def n_angles(self) -> int:
        return len(self.setA)

    @property
    def n_normal(self) -> int:
        return len(self.normal_sites)

    @property
    def n_F(self) -> int:
        return len(self.setF)

    def all_sites(self) -> tuple:
        return self.setA + self.normal_sites

    def normal_array(self) -> np.ndarray:
        return np.asarray(self.normal_sites, dtype=np.int64).reshape(
            self.n_normal, self.d_star)


def lattice_points(d_star: int, radius: float) -> list:
    """All integer points of norm at most ``radius``."""
    R = int(math.floor(radius + 1e-12))
    r2 = radius * radius + 1e-9
    return [p for p in product(range(-R, R + 1), repeat=d_star)
            if norm2(p) <= r2]


@dataclass(frozen=True, eq=False)
class BlockDecomposition:
    """Partition of ``F`` and ``lambda_inf`` into blocks.

    Block 0 is the ``F`` block when ``F`` is nonempty; the remaining blocks
    are ordered by squared norm and then by smallest member.
    """

    model: LatticeModel
    delta: object
    blocks: tuple
    block_of: dict
    has_F_block: bool

    @property
    def n_blocks(self) -> int:
        return len(self.blocks)

    def is_F(self, block_id: int) -> bool:
        return self.has_F_block and block_id == 0

    def indices(self, block_id: int) -> np.ndarray:
        """Normal-site indices of a block."""
        idx = self.model.site_index
        return np.array([idx[s] for s in self.blocks[block_id]],
                        dtype=np.int64)

    def representative(self, block_id: int):
        return self.blocks[block_id][0]

    def rep_dist(self, i: int, j: int) -> float:
        """Pseudo-distance between the block representatives."""
        return pseudo_dist(self.representative(i), self.representative(j))

    def block_norm2(self, block_id: int) -> int:
        return norm2(self.representative(block_id))


def decompose(model: LatticeModel, delta) -> BlockDecomposition:
    """Block decomposition at scale ``delta`` (a number >= 1 or INF_DELTA).

    Sites on one sphere are joined when their pseudo-distance is at most
    ``delta``; blocks are the connected components of that relation.
    """
    if not is_infinite(delta):
        if not (isinstance(delta, (int, float)) and delta >= 1):
            raise InvalidInputError("delta must be >= 1 or INF_DELTA")
    spheres: dict = {}
    for s in model.lambda_inf:
        spheres.setdefault(norm2(s), []).append(s)
    blocks = []
    if model.setF:
        blocks.append(tuple(sorted(model.setF, key=lambda s: (norm2(s), s))))
    for n2 in sorted(spheres):
        members = spheres[n2]
        if is_infinite(delta) or len(members) == 1:
            blocks.append(tuple(members))
            continue
        arr = np.asarray(members, dtype=np.int64)
        pd2 = _kernels.pdist2(arr, arr)
        ei, ej = np.nonzero(np.triu(pd2 <= delta * delta + 1e-9, 1))
        labels = _kernels.components(len(members), ei.astype(np.int64),
                                     ej.astype(np.int64))
        groups: dict = {}
        for s, lab in zip(members, labels):
            groups.setdefault(int(lab), []).append(s)
        for lab in sorted(groups, key=lambda g: groups[g][0]):
            blocks.append(tuple(groups[lab]))
    block_of = {s: i for i, blk in enumerate(blocks) for s in blk}
    return BlockDecomposition(model, delta, tuple(blocks), block_of,
                              bool(model.setF))


def block_diameters(d: BlockDecomposition) -> np.ndarray:
    """Pseudo-diameter of each block."""
    out = np.zeros(d.n_blocks)
    for i, blk in enumerate(d.blocks):
        if len(blk) > 1:
            out[i] = pseudo_dist_matrix(blk, blk).max()
    return out


def block_diameter(d: BlockDecomposition) -> float:
    """Largest block pseudo-diameter, the F block included."""
    if d.n_blocks == 0:
        return 0.0
    return float(block_diameters(d).max())


def separation_violations(d: BlockDecomposition) -> int:
    """Count same-sphere cross-block pairs closer than ``delta``."""
    if is_infinite(d.delta):
        return 0
    count = 0
    by_sphere: dict = {}
    for i, blk in enumerate(d.blocks):
        if d.is_F(i):
            continue
        by_sphere.setdefault(norm2(blk[0]), []).append(i)
    for ids in by_sphere.values():
        for x in range(len(ids)):
            for y in range(x + 1, len(ids)):
                pd = pseudo_dist_matrix(d.blocks[ids[x]], d.blocks[ids[y]])
                count += int((pd < d.delta - 1e-12).sum())
    return count


def is_refinement(fine: BlockDecomposition, coarse: BlockDecomposition) -> bool:
    """True when every block of ``fine`` sits inside one block of ``coarse``."""
    for blk in fine.blocks:
        if len({coarse.block_of[s] for s in blk}) != 1:
            return False
    return True


# ------------------------------------------------------------ weight lemmas

def sample_sites(model: LatticeModel, n: int, rng: np.random.Generator,
                 include_A: bool = True) -> np.ndarray:
    """Draw ``n`` sites uniformly from the truncated lattice."""
    sites = model.all_sites() if include_A else model.normal_sites
    arr = np.asarray(sites, dtype=np.int64).reshape(len(sites), model.d_star)
    return arr[rng.integers(0, len(arr), size=n)]


def weight_lemma_ratios(p: WeightParams, a, b, c, gamma_tilde):
    """Ratios whose maxima must stay at most 1 for both weight lemmas.

    Returns ``(ratio_i, ratio_ii)`` arrays. Lemma (i) compares
    ``e_{g,k}(a,b)`` with ``e_{g,0}(a,c) e_{g,k}(c,b)``; lemma (ii)
    compares ``e_{gt,k}(a,0)`` with ``e_{g,k}(a,b) e_{gt,k}(b,0)``.
    """
    zero = np.zeros_like(a)
    lhs1 = weight_array(a, b, p, pairwise=False)
    rhs1 = (weight_array(a, c, p.with_(kappa_decay=0.0), pairwise=False)
            * weight_array(c, b, p, pairwise=False))
    lhs2 = _signed_weight(a, zero, gamma_tilde, p)
    rhs2 = (weight_array(a, b, p, pairwise=False)
            * _signed_weight(b, zero, gamma_tilde, p))
    return lhs1 / rhs1, lhs2 / rhs2


def _signed_weight(a, b, gt, p: WeightParams) -> np.ndarray:
    # gamma_tilde may be negative, so WeightParams cannot hold it
    g1t, g2t = gt
    a = np.asarray(a, dtype=np.int64)
    b = np.asarray(b, dtype=np.int64)
    d1 = ((a - b) ** 2).sum(-1)
    d2 = ((a + b) ** 2).sum(-1)
    pd = np.sqrt(np.minimum(d1, d2).astype(float))
    na = np.maximum(np.sqrt((a * a).sum(-1).astype(float)), 1.0)
    nb = np.maximum(np.sqrt((b * b).sum(-1).astype(float)), 1.0)
    return (p.C_w * np.exp(g1t * pd) * np.maximum(pd, 1.0) ** g2t
            * np.minimum(na, nb) ** p.kappa_decay)


def calibrate_weight_constant(gamma1: float, gamma2: float, kappa: float,
                              model: LatticeModel, n_samples: int = 20000,
                              seed: int = 0) -> float:
    """Smallest power of two passing both weight lemmas on a seeded sample.

    Starts at the smallest power of two ``>= 2^(gamma2+kappa+1)`` and doubles
    until no sampled triple violates either inequality.
    """
    if gamma2 < kappa:
        raise InvalidInputError("weight lemmas need gamma2 >= kappa")
    rng = np.random.default_rng(seed)
    a, b, c = (sample_sites(model, n_samples, rng) for _ in range(3))
    # gamma_tilde drawn from the allowed box [-gamma, gamma]
    gts = [(s1 * gamma1, s2 * gamma2) for s1 in (-1.0, 0.0, 1.0)
           for s2 in (-1.0, 0.0, 1.0)]
    cw = 2.0 ** math.ceil(gamma2 + kappa + 1)
    for _ in range(64):
        p = WeightParams(gamma1, gamma2, kappa, cw)
        ok = True
        for gt in gts:
            r1, r2 = weight_lemma_ratios(p, a, b, c, gt)
            if r1.max() > 1.0 + 1e-12 or r2.max() > 1.0 + 1e-12:
                ok = False
                break
        if ok:
            return cw
        cw *= 2.0
    raise InvalidInputError("weight constant calibration did not converge")


def fit_diameter_constant(deltas: Sequence[float], diameters: Sequence[float],
                          exponent: float) -> float:
    """Smallest ``C`` with ``d_Delta <= C Delta^exponent`` on the given grid."""
    return max(float(dd) / float(dl) ** exponent
               for dl, dd in zip(deltas, diameters))
