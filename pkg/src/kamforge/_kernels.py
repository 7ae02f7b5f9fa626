"""Hot lattice kernels with a numba path and a pure-numpy fallback.

Set ``KAMFORGE_NUMBA=0`` to force the numpy implementations. Both
implementations are always importable so the benchmark can compare them.
"""

from __future__ import annotations

import os

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

HAVE_NUMBA = numba is not None
USE_NUMBA = HAVE_NUMBA and os.environ.get("KAMFORGE_NUMBA", "1") != "0"


# ---------------------------------------------------------------- numpy path

def pdist2_numpy(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Squared pseudo-distance ``min(|x-y|^2, |x+y|^2)`` for all pairs."""
    x = np.asarray(x, dtype=np.int64)
    y = np.asarray(y, dtype=np.int64)
    diff = x[:, None, :] - y[None, :, :]
    summ = x[:, None, :] + y[None, :, :]
    return np.minimum((diff * diff).sum(-1), (summ * summ).sum(-1))


def components_numpy(n: int, ei: np.ndarray, ej: np.ndarray) -> np.ndarray:
    """Connected-component labels, numbered by first appearance."""
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    graph = coo_matrix((np.ones(len(ei)), (ei, ej)), shape=(n, n))
    _, labels = connected_components(graph, directed=False)
    # relabel so that component ids follow the smallest member index
    _, first = np.unique(labels, return_index=True)
    order = np.argsort(first)
    remap = np.empty_like(order)
    remap[order] = np.arange(len(order))
    return remap[labels].astype(np.int64)


def weights_numpy(pd, na, nb, g1, g2, kappa, cw):
    """Elementwise weight ``cw e^{g1 pd} max(pd,1)^g2 min(na,nb)^kappa``."""
    pd = np.asarray(pd, dtype=float)
    return (cw * np.exp(g1 * pd) * np.maximum(pd, 1.0) ** g2
            * np.minimum(na, nb) ** kappa)


def rowcol_max_numpy(rows, cols, vals, n):
    """Max over rows and columns of the summed entries ``vals``."""
    if len(vals) == 0:
        return 0.0
    r = np.bincount(rows, weights=vals, minlength=n)
    c = np.bincount(cols, weights=vals, minlength=n)
    return float(max(r.max(), c.max()))


# ---------------------------------------------------------------- numba path

if HAVE_NUMBA:

    @numba.njit(cache=True)
    def pdist2_numba(x, y):
        n, d = x.shape
        m = y.shape[0]
        out = np.empty((n, m), dtype=np.int64)
        for i in range(n):
            for j in range(m):
                s1 = 0
                s2 = 0
                for t in range(d):
                    u = x[i, t] - y[j, t]
                    v = x[i, t] + y[j, t]
                    s1 += u * u
                    s2 += v * v
                out[i, j] = s1 if s1 < s2 else s2
        return out

    @numba.njit(cache=True)
    def _find(parent, i):
        root = i
        while parent[root] != root:
            root = parent[root]
        while parent[i] != root:
            nxt = parent[i]
            parent[i] = root
            i = nxt
        return root

    @numba.njit(cache=True)
    def components_numba(n, ei, ej):
        parent = np.arange(n)
        for t in range(ei.shape[0]):
            a = _find(parent, ei[t])
            b = _find(parent, ej[t])
            if a != b:
                if a < b:
                    parent[b] = a
                else:
                    parent[a] = b
        labels = np.empty(n, dtype=np.int64)
        root_id = -np.ones(n, dtype=np.int64)
        nxt = 0
        for i in range(n):
            r = _find(parent, i)
            if root_id[r] < 0:
                root_id[r] = nxt
                nxt += 1
            labels[i] = root_id[r]
        return labels

    @numba.njit(cache=True, fastmath=True)
    def _weights_flat(pd, na, nb, g1, g2, kappa, cw):
        # one exp per entry: cw e^{g1 p + g2 log max(p,1) + kappa log min}
        out = np.empty(pd.shape[0])
        lcw = np.log(cw)
        for i in range(pd.shape[0]):
            p = pd[i]
            m = na[i] if na[i] < nb[i] else nb[i]
            out[i] = np.exp(lcw + g1 * p + g2 * np.log(max(p, 1.0))
                            + kappa * np.log(m))
        return out

    def weights_numba(pd, na, nb, g1, g2, kappa, cw):
        pd, na, nb = np.broadcast_arrays(np.asarray(pd, float),
                                         np.asarray(na, float),
                                         np.asarray(nb, float))
        shape = pd.shape
        out = _weights_flat(np.ascontiguousarray(pd).ravel(),
                            np.ascontiguousarray(na).ravel(),
                            np.ascontiguousarray(nb).ravel(),
                            float(g1), float(g2), float(kappa), float(cw))
        return out.reshape(shape)

    @numba.njit(cache=True)
    def _rowcol_max(rows, cols, vals, n):
        r = np.zeros(n)
        c = np.zeros(n)
        for t in range(vals.shape[0]):
            r[rows[t]] += vals[t]
            c[cols[t]] += vals[t]
        best = 0.0
        for i in range(n):
            if r[i] > best:
                best = r[i]
            if c[i] > best:
                best = c[i]
        return best

    def rowcol_max_numba(rows, cols, vals, n):
        if len(vals) == 0:
            return 0.0
        return float(_rowcol_max(np.asarray(rows, np.int64),
                                 np.asarray(cols, np.int64),
                                 np.asarray(vals, float), int(n)))

    def _components_numba_entry(n, ei, ej):
        return components_numba(int(n), np.asarray(ei, np.int64),
                                np.asarray(ej, np.int64))

    def _pdist2_numba_entry(x, y):
        return pdist2_numba(np.ascontiguousarray(x, dtype=np.int64),
                            np.ascontiguousarray(y, dtype=np.int64))


NUMPY_KERNELS = {
    "pdist2": pdist2_numpy,
    "components": components_numpy,
    "weights": weights_numpy,
    "rowcol_max": rowcol_max_numpy,
}

NUMBA_KERNELS = {
    "pdist2": _pdist2_numba_entry,
    "components": _components_numba_entry,
    "weights": weights_numba,
    "rowcol_max": rowcol_max_numba,
} if HAVE_NUMBA else {}

# the weight kernel stays on numpy: vectorised exp beats the compiled loop
# once broadcast inputs have to be materialised (see benchmarks/)
_ACTIVE = ({**NUMBA_KERNELS, "weights": weights_numpy} if USE_NUMBA
           else NUMPY_KERNELS)

pdist2 = _ACTIVE["pdist2"]
components = _ACTIVE["components"]
weights = _ACTIVE["weights"]
rowcol_max = _ACTIVE["rowcol_max"]
BACKEND = "numba" if USE_NUMBA else "numpy"
