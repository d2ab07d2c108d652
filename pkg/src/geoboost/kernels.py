"""Hot numeric kernels, each implemented twice.

Every kernel has a numba ``@njit`` version and a pure-numpy version. The
active backend is chosen at import from ``GEOBOOST_NUMBA`` (see
:mod:`geoboost._backend`) and can be switched at runtime with
:func:`set_backend`. The two paths return bit-identical results:

* prefix sums are sequential on both sides (``np.cumsum`` accumulates
  left-to-right, matching the scalar loop);
* sorts are stable on both sides (numpy ``kind='stable'``, numba
  ``kind='mergesort'``), so tied keys keep their input order;
* no fastmath: the njit kernels use IEEE-compliant float64 arithmetic.

``benchmarks/bench_kernels.py`` times the two paths against each other.
"""

from types import SimpleNamespace

import numpy as np

from ._backend import HAVE_NUMBA, USE_NUMBA

__all__ = [
    "best_split",
    "tree_apply",
    "neighbor_order",
    "knn_prefix_means",
    "set_backend",
    "get_backend",
    "available_backends",
]


# ---------------------------------------------------------------------------
# pure-numpy implementations
# ---------------------------------------------------------------------------

def _best_split_numpy(Xsub, g, h, lam, min_child_weight):
    """Scan all columns of a node's submatrix for the best admissible split.

    Returns (col, threshold, gain); col is -1 when no split has positive
    gain with both children's hessian sums >= min_child_weight. Ties are
    broken toward the lower column index, then the lower threshold.
    """
    m, n_cols = Xsub.shape
    best_col = -1
    best_thr = 0.0
    best_gain = 0.0
    if m < 2:
        return best_col, best_thr, best_gain
    for col in range(n_cols):
        x = Xsub[:, col]
        idx = np.argsort(x, kind="stable")
        xs = x[idx]
        cg = np.cumsum(g[idx])
        ch = np.cumsum(h[idx])
        g_tot = cg[-1]
        h_tot = ch[-1]
        gl = cg[:-1]
        hl = ch[:-1]
        hr = h_tot - hl
        ok = (xs[:-1] < xs[1:]) & (hl >= min_child_weight) & (hr >= min_child_weight)
        if not ok.any():
            continue
        gr = g_tot - gl
        with np.errstate(divide="ignore", invalid="ignore"):
            gain = 0.5 * (
                gl * gl / (hl + lam)
                + gr * gr / (hr + lam)
                - g_tot * g_tot / (h_tot + lam)
            )
        gain = np.where(ok, gain, -np.inf)
        j = int(np.argmax(gain))
        if gain[j] > best_gain:
            best_gain = float(gain[j])
            best_col = col
            best_thr = float((xs[j] + xs[j + 1]) * 0.5)
    return best_col, best_thr, best_gain


def _tree_apply_numpy(feature, threshold, left, right, weight, X):
    """Route every row of X to its leaf; returns the leaf weights."""
    n = X.shape[0]
    node = np.zeros(n, dtype=np.int64)
    active = feature[node] >= 0
    while active.any():
        rows = np.nonzero(active)[0]
        cur = node[rows]
        go_left = X[rows, feature[cur]] < threshold[cur]
        node[rows] = np.where(go_left, left[cur], right[cur])
        active[rows] = feature[node[rows]] >= 0
    return weight[node]


def _neighbor_order_numpy(train_xy, query_xy, cap):
    """For each query point, train indices sorted by (squared distance, index).

    Callers pass train rows sorted by customer id, so index order doubles
    as the id tie-break. Chunked to bound the distance-matrix memory.
    """
    nq = query_xy.shape[0]
    nt = train_xy.shape[0]
    cap = min(cap, nt)
    out = np.empty((nq, cap), dtype=np.int64)
    chunk = max(1, int(4_000_000 // max(nt, 1)))
    for s in range(0, nq, chunk):
        e = min(nq, s + chunk)
        dx = query_xy[s:e, 0][:, None] - train_xy[:, 0][None, :]
        dy = query_xy[s:e, 1][:, None] - train_xy[:, 1][None, :]
        d2 = dx * dx + dy * dy
        out[s:e] = np.argsort(d2, axis=1, kind="stable")[:, :cap]
    return out


def _knn_prefix_means_numpy(order, counts, avail, ks):
    """Mean of counts over the first min(k, avail) ordered neighbors.

    order rows may be padded with -1 past avail[q]; padded entries are
    never part of any requested prefix.
    """
    nq, width = order.shape
    need = min(max(int(ks.max()), 1), width)
    gathered = counts[order[:, :need]]
    cums = np.cumsum(gathered, axis=1)
    rows = np.arange(nq)
    out = np.empty((nq, ks.shape[0]))
    for j, k in enumerate(ks):
        k_eff = np.minimum(int(k), avail)
        k_pos = np.maximum(k_eff, 1)
        vals = cums[rows, k_pos - 1] / k_pos
        out[:, j] = np.where(k_eff > 0, vals, 0.0)
    return out


_NUMPY_IMPL = SimpleNamespace(
    name="numpy",
    best_split=_best_split_numpy,
    tree_apply=_tree_apply_numpy,
    neighbor_order=_neighbor_order_numpy,
    knn_prefix_means=_knn_prefix_means_numpy,
)

_IMPLS = {"numpy": _NUMPY_IMPL}


# ---------------------------------------------------------------------------
# numba implementations
# ---------------------------------------------------------------------------

if HAVE_NUMBA:
    from numba import njit

    @njit(cache=True, error_model="numpy")
    def _best_split_numba(Xsub, g, h, lam, min_child_weight):
        m, n_cols = Xsub.shape
        best_col = -1
        best_thr = 0.0
        best_gain = 0.0
        if m < 2:
            return best_col, best_thr, best_gain
        for col in range(n_cols):
            x = np.ascontiguousarray(Xsub[:, col])
            idx = np.argsort(x, kind="mergesort")
            g_tot = 0.0
            h_tot = 0.0
            for i in range(m):
                g_tot += g[idx[i]]
                h_tot += h[idx[i]]
            parent = g_tot * g_tot / (h_tot + lam)
            gl = 0.0
            hl = 0.0
            for i in range(m - 1):
                gl += g[idx[i]]
                hl += h[idx[i]]
                if x[idx[i]] < x[idx[i + 1]]:
                    hr = h_tot - hl
                    if hl >= min_child_weight and hr >= min_child_weight:
                        gr = g_tot - gl
                        gain = 0.5 * (gl * gl / (hl + lam) + gr * gr / (hr + lam) - parent)
                        if gain > best_gain:
                            best_gain = gain
                            best_col = col
                            best_thr = (x[idx[i]] + x[idx[i + 1]]) * 0.5
        return best_col, best_thr, best_gain

    @njit(cache=True)
    def _tree_apply_numba(feature, threshold, left, right, weight, X):
        n = X.shape[0]
        out = np.empty(n)
        for r in range(n):
            node = 0
            while feature[node] >= 0:
                if X[r, feature[node]] < threshold[node]:
                    node = left[node]
                else:
                    node = right[node]
            out[r] = weight[node]
        return out

    @njit(cache=True)
    def _neighbor_order_numba(train_xy, query_xy, cap):
        nq = query_xy.shape[0]
        nt = train_xy.shape[0]
        cap = min(cap, nt)
        out = np.empty((nq, cap), dtype=np.int64)
        d2 = np.empty(nt)
        for q in range(nq):
            qx = query_xy[q, 0]
            qy = query_xy[q, 1]
            for t in range(nt):
                dx = qx - train_xy[t, 0]
                dy = qy - train_xy[t, 1]
                d2[t] = dx * dx + dy * dy
            idx = np.argsort(d2, kind="mergesort")
            out[q, :] = idx[:cap]
        return out

    @njit(cache=True)
    def _knn_prefix_means_numba(order, counts, avail, ks):
        nq = order.shape[0]
        n_ks = ks.shape[0]
        out = np.empty((nq, n_ks))
        for q in range(nq):
            a = avail[q]
            k_max = 0
            for j in range(n_ks):
                k_eff = ks[j] if ks[j] < a else a
                if k_eff > k_max:
                    k_max = k_eff
            pref = np.empty(k_max)
            s = 0.0
            for i in range(k_max):
                s += counts[order[q, i]]
                pref[i] = s
            for j in range(n_ks):
                k_eff = ks[j] if ks[j] < a else a
                if k_eff > 0:
                    out[q, j] = pref[k_eff - 1] / k_eff
                else:
                    out[q, j] = 0.0
        return out

    _IMPLS["numba"] = SimpleNamespace(
        name="numba",
        best_split=_best_split_numba,
        tree_apply=_tree_apply_numba,
        neighbor_order=_neighbor_order_numba,
        knn_prefix_means=_knn_prefix_means_numba,
    )


_impl = _IMPLS["numba" if USE_NUMBA else "numpy"]


def available_backends():
    return tuple(sorted(_IMPLS))


def get_backend() -> str:
    return _impl.name


def set_backend(name: str) -> None:
    global _impl
    if name not in _IMPLS:
        raise ValueError(f"unknown backend {name!r}; available: {available_backends()}")
    _impl = _IMPLS[name]


def best_split(Xsub, g, h, lam, min_child_weight):
    return _impl.best_split(Xsub, g, h, lam, min_child_weight)


def tree_apply(feature, threshold, left, right, weight, X):
    return _impl.tree_apply(feature, threshold, left, right, weight, X)


def neighbor_order(train_xy, query_xy, cap):
    return _impl.neighbor_order(train_xy, query_xy, cap)


def knn_prefix_means(order, counts, avail, ks):
    return _impl.knn_prefix_means(order, counts, avail, ks)
