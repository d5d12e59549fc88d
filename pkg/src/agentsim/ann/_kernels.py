"""Compiled inner loops for graph construction and traced search.

Every distance in the package goes through :func:`sqdist` so the compiled
search and the pure-Python stepper produce bit-identical floats. Heaps are
array-backed and ordered lexicographically on ``(distance, id)``, which is
what makes ties resolve toward the smaller id.
"""
import numpy as np
from numba import njit


@njit(cache=True)
def sqdist(a, b):
    s = 0.0
    for j in range(a.shape[0]):
        diff = np.float64(a[j]) - np.float64(b[j])
        s += diff * diff
    return s


@njit(cache=True)
def _lt(d1, i1, d2, i2):
    return d1 < d2 or (d1 == d2 and i1 < i2)


@njit(cache=True)
def _min_push(hd, hi, n, d, i):
    j = n
    hd[j] = d
    hi[j] = i
    while j > 0:
        p = (j - 1) >> 1
        if _lt(hd[j], hi[j], hd[p], hi[p]):
            hd[j], hd[p] = hd[p], hd[j]
            hi[j], hi[p] = hi[p], hi[j]
            j = p
        else:
            break
    return n + 1


@njit(cache=True)
def _min_pop(hd, hi, n):
    n -= 1
    hd[0] = hd[n]
    hi[0] = hi[n]
    j = 0
    while True:
        c = 2 * j + 1
        if c >= n:
            break
        r = c + 1
        if r < n and _lt(hd[r], hi[r], hd[c], hi[c]):
            c = r
        if _lt(hd[c], hi[c], hd[j], hi[j]):
            hd[j], hd[c] = hd[c], hd[j]
            hi[j], hi[c] = hi[c], hi[j]
            j = c
        else:
            break
    return n


@njit(cache=True)
def _max_push(hd, hi, n, d, i):
    j = n
    hd[j] = d
    hi[j] = i
    while j > 0:
        p = (j - 1) >> 1
        if _lt(hd[p], hi[p], hd[j], hi[j]):
            hd[j], hd[p] = hd[p], hd[j]
            hi[j], hi[p] = hi[p], hi[j]
            j = p
        else:
            break
    return n + 1


@njit(cache=True)
def _max_pop(hd, hi, n):
    n -= 1
    hd[0] = hd[n]
    hi[0] = hi[n]
    j = 0
    while True:
        c = 2 * j + 1
        if c >= n:
            break
        r = c + 1
        if r < n and _lt(hd[c], hi[c], hd[r], hi[r]):
            c = r
        if _lt(hd[j], hi[j], hd[c], hi[c]):
            hd[j], hd[c] = hd[c], hd[j]
            hi[j], hi[c] = hi[c], hi[j]
            j = c
        else:
            break
    return n


@njit(cache=True)
def _drain_sorted(rd, ri, nr):
    """Empty a max-heap into ascending ``(distance, id)`` arrays."""
    out_d = np.empty(nr, np.float64)
    out_i = np.empty(nr, np.int64)
    n = nr
    while n > 0:
        out_d[n - 1] = rd[0]
        out_i[n - 1] = ri[0]
        n = _max_pop(rd, ri, n)
    return out_d, out_i


@njit(cache=True, nogil=True)
def descend(data, links, counts, entry, max_level, q, target_level):
    """Greedy beam-1 walk from the entry point down to ``target_level``."""
    cur = entry
    dcur = sqdist(data[cur], q)
    for lev in range(max_level, target_level, -1):
        changed = True
        while changed:
            changed = False
            node = cur
            for j in range(counts[lev, node]):
                nb = links[lev, node, j]
                d = sqdist(data[nb], q)
                if _lt(d, nb, dcur, cur):
                    dcur = d
                    cur = nb
                    changed = True
    return cur, dcur


@njit(cache=True)
def _search_layer(data, links_l, counts_l, q, ep, dep, ef, tags, epoch, cd, ci, rd, ri):
    tags[ep] = epoch
    nc = _min_push(cd, ci, 0, dep, ep)
    nr = _max_push(rd, ri, 0, dep, ep)
    while nc > 0:
        dc = cd[0]
        c = ci[0]
        if nr >= ef and dc >= rd[0]:
            break
        nc = _min_pop(cd, ci, nc)
        for j in range(counts_l[c]):
            nb = links_l[c, j]
            if tags[nb] == epoch:
                continue
            tags[nb] = epoch
            d = sqdist(data[nb], q)
            if nr < ef or _lt(d, nb, rd[0], ri[0]):
                nc = _min_push(cd, ci, nc, d, nb)
                nr = _max_push(rd, ri, nr, d, nb)
                if nr > ef:
                    nr = _max_pop(rd, ri, nr)
    return _drain_sorted(rd, ri, nr)


@njit(cache=True)
def _select_heuristic(data, cand_i, cand_d, n, m_max, out):
    """Keep a candidate only if it is closer to the base than to every kept one."""
    m = 0
    for a in range(n):
        if m >= m_max:
            break
        e = cand_i[a]
        de = cand_d[a]
        good = True
        for b in range(m):
            if sqdist(data[e], data[out[b]]) < de:
                good = False
                break
        if good:
            out[m] = e
            m += 1
    return m


@njit(cache=True)
def _insertion_sort(nd, ni, n):
    for a in range(1, n):
        kd = nd[a]
        ki = ni[a]
        b = a - 1
        while b >= 0 and _lt(kd, ki, nd[b], ni[b]):
            nd[b + 1] = nd[b]
            ni[b + 1] = ni[b]
            b -= 1
        nd[b + 1] = kd
        ni[b + 1] = ki


@njit(cache=True)
def _connect(data, links, counts, lev, s, new, cap):
    c = counts[lev, s]
    if c < cap:
        links[lev, s, c] = new
        counts[lev, s] = c + 1
        return
    nd = np.empty(c + 1, np.float64)
    ni = np.empty(c + 1, np.int64)
    for j in range(c):
        nb = links[lev, s, j]
        ni[j] = nb
        nd[j] = sqdist(data[nb], data[s])
    ni[c] = new
    nd[c] = sqdist(data[new], data[s])
    _insertion_sort(nd, ni, c + 1)
    out = np.empty(cap, np.int64)
    m = _select_heuristic(data, ni, nd, c + 1, cap, out)
    for j in range(m):
        links[lev, s, j] = out[j]
    counts[lev, s] = m


@njit(cache=True)
def build(data, levels, m, ef_construction, links, counts):
    """Insert every point in dataset order; returns ``(entry, max_level)``."""
    n = data.shape[0]
    entry = 0
    max_level = levels[0]
    tags = np.zeros(n, np.int64)
    epoch = 0
    cd = np.empty(n + 1, np.float64)
    ci = np.empty(n + 1, np.int64)
    rd = np.empty(ef_construction + 2, np.float64)
    ri = np.empty(ef_construction + 2, np.int64)
    sel = np.empty(m, np.int64)
    for i in range(1, n):
        q = data[i]
        li = levels[i]
        cur, dcur = descend(data, links, counts, entry, max_level, q, li)
        top = li if li < max_level else max_level
        for lev in range(top, -1, -1):
            epoch += 1
            wd, wi = _search_layer(data, links[lev], counts[lev], q, cur, dcur,
                                   ef_construction, tags, epoch, cd, ci, rd, ri)
            k = _select_heuristic(data, wi, wd, wd.shape[0], m, sel)
            cap = 2 * m if lev == 0 else m
            for j in range(k):
                links[lev, i, j] = sel[j]
            counts[lev, i] = k
            for j in range(k):
                _connect(data, links, counts, lev, sel[j], i, cap)
            cur = wi[0]
            dcur = wd[0]
        if li > max_level:
            entry = i
            max_level = li
    return entry, max_level


@njit(cache=True, nogil=True)
def search_trace(data, links0, counts0, start, dstart, q, ef, max_steps, alpha,
                 rec_dt, rec_db, rec_dw, rec_rq, rec_ema, rec_vis):
    """Level-0 beam search from ``start`` recording one row per expansion step.

    Returns ``(steps, finished, result_d, result_i)``; results ascend by
    ``(distance, id)``. Mirrors :class:`agentsim.ann.search.SearchState`.
    """
    n = data.shape[0]
    visited = np.zeros(n, np.bool_)
    cd = np.empty(n + 1, np.float64)
    ci = np.empty(n + 1, np.int64)
    rd = np.empty(ef + 2, np.float64)
    ri = np.empty(ef + 2, np.int64)
    visited[start] = True
    nvis = 1
    nc = _min_push(cd, ci, 0, dstart, start)
    nr = _max_push(rd, ri, 0, dstart, start)
    d_best = dstart
    ema = 0.0
    t = 0
    finished = n == 1
    while not finished and t < max_steps:
        if nc == 0:
            finished = True
            break
        dc = cd[0]
        c = ci[0]
        if nr >= ef and dc >= rd[0]:
            finished = True
            break
        nc = _min_pop(cd, ci, nc)
        found = False
        best_new = 0.0
        for j in range(counts0[c]):
            nb = links0[c, j]
            if visited[nb]:
                continue
            visited[nb] = True
            nvis += 1
            d = sqdist(data[nb], q)
            if not found or d < best_new:
                best_new = d
            found = True
            nc = _min_push(cd, ci, nc, d, nb)
            if nr < ef or _lt(d, nb, rd[0], ri[0]):
                nr = _max_push(rd, ri, nr, d, nb)
                if d < d_best:
                    d_best = d
                if nr > ef:
                    nr = _max_pop(rd, ri, nr)
        d_worst = rd[0]
        d_t = best_new if found else d_worst
        if d_worst == d_best:
            rq = 1.0
        else:
            rq = (d_t - d_best) / (d_worst - d_best)
        if t == 0:
            ema = rq
        else:
            ema = alpha * rq + (1.0 - alpha) * ema
        rec_dt[t] = d_t
        rec_db[t] = d_best
        rec_dw[t] = d_worst
        rec_rq[t] = rq
        rec_ema[t] = ema
        rec_vis[t] = nvis
        t += 1
    out_d, out_i = _drain_sorted(rd, ri, nr)
    return t, finished, out_d, out_i
