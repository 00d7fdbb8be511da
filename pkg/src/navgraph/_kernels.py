"""Compiled graph kernels shared by the hierarchical and flat indexes.

Everything here is nopython numba code operating on plain numpy arrays.
A graph is passed around as the tuple

    G = (links0, deg0, ulinks, udeg, uoff)

where ``links0[i, :deg0[i]]`` is node ``i``'s base-layer adjacency and the
upper layers of node ``i`` live in rows ``uoff[i] .. uoff[i] + level[i] - 1``
of ``ulinks``/``udeg`` (``uoff[i] == -1`` for level-0 nodes).  A flat graph
is the same tuple with empty upper arrays.

Build-time caches of link distances use the matching tuple ``LD = (ld0, uld)``.

Ordering is lexicographic on ``(dist, id)`` everywhere so that every result is
deterministic.
"""

import numpy as np
from llvmlite import ir
from numba import njit, types
from numba.core import cgutils
from numba.extending import intrinsic

L2 = 0
ANGULAR = 1

_F32_ZERO = np.float32(0.0)


@intrinsic
def _prefetch_at(typingctx, row, offset):
    """Prefetch hint for the cache line at ``offset`` bytes into ``row`` (read, keep in L1)."""
    if not isinstance(row, types.Array) or not isinstance(offset, types.Integer):
        return None
    sig = types.void(row, offset)

    def codegen(context, builder, signature, args):
        ary = context.make_array(signature.args[0])(context, builder, args[0])
        ptr_t = ir.PointerType()
        i8 = ir.IntType(8)
        i32 = ir.IntType(32)
        fnty = ir.FunctionType(ir.VoidType(), [ptr_t, i32, i32, i32])
        fn = cgutils.get_or_insert_function(builder.module, fnty, "llvm.prefetch.p0")
        base = builder.bitcast(ary.data, ptr_t)
        ptr = builder.gep(base, [args[1]], source_etype=i8)
        builder.call(fn, [ptr, i32(0), i32(3), i32(1)])
        return context.get_dummy_value()

    return sig, codegen


@njit(inline="always", nogil=True)
def _prefetch(row):
    nbytes = row.shape[0] * 4
    off = 0
    while off < nbytes:
        _prefetch_at(row, off)
        off += 64


# ---------------------------------------------------------------------------
# distance kernels
#
# Products and partial sums stay in float32 so ``reassoc`` can spread each
# 64-element block over SIMD lanes; block sums are folded into a float64
# total, which bounds the rounding error independently of the dimension.
# The lane layout and reduction tree are fixed at compile time, so a given
# build is bitwise deterministic.
# ---------------------------------------------------------------------------

_SIMD = {"reassoc", "nsz", "contract"}
_BLOCK = 64


@njit(inline="always", nogil=True, fastmath=_SIMD)
def _l2_span(a, b, lo, hi):
    s = _F32_ZERO
    for i in range(lo, hi):
        t = a[i] - b[i]
        s += t * t
    return s


@njit(inline="always", nogil=True, fastmath=_SIMD)
def _dot_span(a, b, lo, hi):
    s = _F32_ZERO
    for i in range(lo, hi):
        s += a[i] * b[i]
    return s


@njit(inline="always", nogil=True, fastmath=_SIMD)
def l2sq(a, b):
    n = a.shape[0]
    if n <= _BLOCK:
        return _l2_span(a, b, 0, n)
    nb = n // _BLOCK
    total = 0.0
    for blk in range(nb):
        o = blk * _BLOCK
        s = _F32_ZERO
        for i in range(_BLOCK):  # constant trip count: unrolled over SIMD lanes
            t = a[o + i] - b[o + i]
            s += t * t
        total += s
    total += _l2_span(a, b, nb * _BLOCK, n)
    return np.float32(total)


@njit(inline="always", nogil=True, fastmath=_SIMD)
def dot(a, b):
    n = a.shape[0]
    if n <= _BLOCK:
        return _dot_span(a, b, 0, n)
    nb = n // _BLOCK
    total = 0.0
    for blk in range(nb):
        o = blk * _BLOCK
        s = _F32_ZERO
        for i in range(_BLOCK):
            s += a[o + i] * b[o + i]
        total += s
    total += _dot_span(a, b, nb * _BLOCK, n)
    return np.float32(total)


@njit(inline="always", nogil=True)
def angular_from(ab, aa, bb):
    # the product of two float32 values is exact in float64, so sqrt(x*x) == x
    # and a vector's distance to itself is exactly zero
    c = np.float64(ab) / np.sqrt(np.float64(aa) * np.float64(bb))
    r = 1.0 - c
    if r < 0.0:
        r = 0.0
    elif r > 2.0:
        r = 2.0
    return np.float32(r)


@njit(inline="always", nogil=True)
def qdist(metric, q, qsq, data, sqn, j):
    if metric == L2:
        return l2sq(q, data[j])
    return angular_from(dot(q, data[j]), qsq, sqn[j])


@njit(nogil=True, cache=True)
def pair_distance(metric, a, b):
    if metric == L2:
        return l2sq(a, b)
    return angular_from(dot(a, b), dot(a, a), dot(b, b))


@njit(nogil=True, cache=True)
def squared_norms(data):
    out = np.empty(data.shape[0], dtype=np.float32)
    for i in range(data.shape[0]):
        out[i] = dot(data[i], data[i])
    return out


@njit(nogil=True, cache=True)
def distances_to(metric, q, data):
    """Distances from ``q`` to every row of ``data`` with the search kernel."""
    qsq = dot(q, q)
    out = np.empty(data.shape[0], dtype=np.float32)
    for j in range(data.shape[0]):
        if metric == L2:
            out[j] = l2sq(q, data[j])
        else:
            out[j] = angular_from(dot(q, data[j]), qsq, dot(data[j], data[j]))
    return out


# ---------------------------------------------------------------------------
# binary heaps over parallel (dist, id) arrays
# ---------------------------------------------------------------------------


@njit(inline="always", nogil=True)
def _lt(d1, i1, d2, i2):
    return d1 < d2 or (d1 == d2 and i1 < i2)


@njit(inline="always", nogil=True)
def _minheap_push(hd, hi, size, d, i):
    pos = size
    while pos > 0:
        parent = (pos - 1) >> 1
        if _lt(d, i, hd[parent], hi[parent]):
            hd[pos] = hd[parent]
            hi[pos] = hi[parent]
            pos = parent
        else:
            break
    hd[pos] = d
    hi[pos] = i
    return size + 1


@njit(inline="always", nogil=True)
def _minheap_pop(hd, hi, size):
    size -= 1
    d = hd[size]
    i = hi[size]
    pos = 0
    while True:
        child = 2 * pos + 1
        if child >= size:
            break
        if child + 1 < size and _lt(hd[child + 1], hi[child + 1], hd[child], hi[child]):
            child += 1
        if _lt(hd[child], hi[child], d, i):
            hd[pos] = hd[child]
            hi[pos] = hi[child]
            pos = child
        else:
            break
    if size > 0:
        hd[pos] = d
        hi[pos] = i
    return size


@njit(inline="always", nogil=True)
def _maxheap_push(hd, hi, size, d, i):
    pos = size
    while pos > 0:
        parent = (pos - 1) >> 1
        if _lt(hd[parent], hi[parent], d, i):
            hd[pos] = hd[parent]
            hi[pos] = hi[parent]
            pos = parent
        else:
            break
    hd[pos] = d
    hi[pos] = i
    return size + 1


@njit(inline="always", nogil=True)
def _maxheap_pop(hd, hi, size):
    size -= 1
    d = hd[size]
    i = hi[size]
    pos = 0
    while True:
        child = 2 * pos + 1
        if child >= size:
            break
        if child + 1 < size and _lt(hd[child], hi[child], hd[child + 1], hi[child + 1]):
            child += 1
        if _lt(d, i, hd[child], hi[child]):
            hd[pos] = hd[child]
            hi[pos] = hi[child]
            pos = child
        else:
            break
    if size > 0:
        hd[pos] = d
        hi[pos] = i
    return size


@njit(nogil=True, cache=True)
def _sort_pairs(ds, ids, n):
    # insertion sort; lists here are at most a few hundred long
    for a in range(1, n):
        d = ds[a]
        i = ids[a]
        b = a - 1
        while b >= 0 and _lt(d, i, ds[b], ids[b]):
            ds[b + 1] = ds[b]
            ids[b + 1] = ids[b]
            b -= 1
        ds[b + 1] = d
        ids[b + 1] = i


# ---------------------------------------------------------------------------
# graph access
# ---------------------------------------------------------------------------


@njit(inline="always", nogil=True)
def _row_index(G, layer, node):
    if layer == 0:
        return node
    return G[4][node] + layer - 1


@njit(inline="always", nogil=True)
def _links(G, layer, node):
    if layer == 0:
        return G[0][node], G[1][node]
    r = G[4][node] + layer - 1
    return G[2][r], G[3][r]


@njit(inline="always", nogil=True)
def _next_epoch(visited, vstate):
    e = vstate[0] + 1
    if e >= 2147483647:
        visited[:] = 0
        e = 1
    vstate[0] = e
    return e


# ---------------------------------------------------------------------------
# search
# ---------------------------------------------------------------------------


@njit(nogil=True, cache=True)
def search_layer(metric, q, qsq, data, sqn, G, layer, entries, ef,
                 visited, vstate, trace, stats):
    """Best-first beam search on one layer.

    ``stats[0]`` accumulates distance evaluations.  When ``trace`` is non-empty
    every first-time evaluation is appended at ``trace[stats[1]]`` and
    ``stats[1]`` is advanced.  Returns (ids, dists) ascending by (dist, id).
    """
    epoch = _next_epoch(visited, vstate)
    tracing = trace.shape[0] > 0

    cap_c = 256 + 4 * ef
    cd = np.empty(cap_c, dtype=np.float32)
    ci = np.empty(cap_c, dtype=np.int32)
    nc = 0
    wd = np.empty(ef + 1, dtype=np.float32)
    wi = np.empty(ef + 1, dtype=np.int32)
    nw = 0

    for t in range(entries.shape[0]):
        e = entries[t]
        if visited[e] == epoch:
            continue
        visited[e] = epoch
        d = qdist(metric, q, qsq, data, sqn, e)
        stats[0] += 1
        if tracing:
            trace[stats[1]] = e
            stats[1] += 1
        if nc == cap_c:
            cap_c *= 2
            cd = np.concatenate((cd, np.empty(cap_c - cd.shape[0], dtype=np.float32)))
            ci = np.concatenate((ci, np.empty(cap_c - ci.shape[0], dtype=np.int32)))
        nc = _minheap_push(cd, ci, nc, d, e)
        if nw < ef:
            nw = _maxheap_push(wd, wi, nw, d, e)
        elif _lt(d, e, wd[0], wi[0]):
            nw = _maxheap_push(wd, wi, nw, d, e)
            nw = _maxheap_pop(wd, wi, nw)

    while nc > 0:
        c_d = cd[0]
        c_i = ci[0]
        if c_d > wd[0]:
            break
        nc = _minheap_pop(cd, ci, nc)
        row, deg = _links(G, layer, c_i)
        for j in range(deg):
            nb = row[j]
            if visited[nb] != epoch:
                _prefetch(data[nb])
        for j in range(deg):
            nb = row[j]
            if visited[nb] == epoch:
                continue
            visited[nb] = epoch
            d = qdist(metric, q, qsq, data, sqn, nb)
            stats[0] += 1
            if tracing:
                trace[stats[1]] = nb
                stats[1] += 1
            if nw < ef or _lt(d, nb, wd[0], wi[0]):
                if nc == cap_c:
                    cap_c *= 2
                    cd = np.concatenate((cd, np.empty(cap_c - cd.shape[0], dtype=np.float32)))
                    ci = np.concatenate((ci, np.empty(cap_c - ci.shape[0], dtype=np.int32)))
                nc = _minheap_push(cd, ci, nc, d, nb)
                nw = _maxheap_push(wd, wi, nw, d, nb)
                if nw > ef:
                    nw = _maxheap_pop(wd, wi, nw)

    out_d = np.empty(nw, dtype=np.float32)
    out_i = np.empty(nw, dtype=np.int32)
    for t in range(nw - 1, -1, -1):
        out_d[t] = wd[0]
        out_i[t] = wi[0]
        nw = _maxheap_pop(wd, wi, nw)
    return out_i, out_d


@njit(inline="always", nogil=True)
def _greedy(metric, q, qsq, data, sqn, G, layer, ep, epd, stats):
    changed = True
    while changed:
        changed = False
        row, deg = _links(G, layer, ep)
        for j in range(deg):
            nb = row[j]
            d = qdist(metric, q, qsq, data, sqn, nb)
            stats[0] += 1
            if _lt(d, nb, epd, ep):
                ep = nb
                epd = d
                changed = True
    return ep, epd


@njit(nogil=True, cache=True)
def search_one(metric, q, data, sqn, G, entry, max_level, k, ef,
               visited, vstate, trace, stats):
    """ef=1 greedy descent over the upper layers, then a base-layer beam search."""
    qsq = dot(q, q)
    ep = entry
    if max_level > 0:
        epd = qdist(metric, q, qsq, data, sqn, ep)
        stats[0] += 1
        for layer in range(max_level, 0, -1):
            ep, epd = _greedy(metric, q, qsq, data, sqn, G, layer, ep, epd, stats)
    entries = np.empty(1, dtype=np.int32)
    entries[0] = ep
    ids, ds = search_layer(metric, q, qsq, data, sqn, G, 0, entries, ef,
                           visited, vstate, trace, stats)
    kk = min(k, ids.shape[0])
    return ids[:kk].copy(), ds[:kk].copy()


@njit(nogil=True, cache=True)
def search_batch(metric, queries, data, sqn, G, entry, max_level, k, ef, visited, vstate):
    nq = queries.shape[0]
    out_i = np.full((nq, k), -1, dtype=np.int32)
    out_d = np.full((nq, k), np.inf, dtype=np.float32)
    comps = np.zeros(nq, dtype=np.int64)
    stats = np.zeros(2, dtype=np.int64)
    no_trace = np.empty(0, dtype=np.int32)
    for t in range(nq):
        stats[0] = 0
        ids, ds = search_one(metric, queries[t], data, sqn, G, entry, max_level, k, ef,
                             visited, vstate, no_trace, stats)
        out_i[t, :ids.shape[0]] = ids
        out_d[t, :ids.shape[0]] = ds
        comps[t] = stats[0]
    return out_i, out_d, comps


# ---------------------------------------------------------------------------
# construction
# ---------------------------------------------------------------------------


@njit(nogil=True, cache=True)
def select_neighbors(metric, data, sqn, cand_i, cand_d, ncand, cap, out_i, out_d, out_tag):
    """Diversity heuristic with backfill; candidates ascending by distance to the base.

    A candidate is kept iff it is strictly closer to the base than to every
    already kept node.  Rejected candidates fill leftover slots in ascending
    order.  ``out_tag`` receives -1 for kept slots and, for backfilled slots,
    the id of the kept node that rejected them.  Returns the count written.
    """
    rej = np.empty(ncand, dtype=np.int32)
    rej_by = np.empty(ncand, dtype=np.int32)
    nrej = 0
    kept = 0
    for c in range(ncand):
        if kept >= cap:
            break
        cid = cand_i[c]
        cdist = cand_d[c]
        by = -1
        cv = data[cid]
        csq = sqn[cid]
        for s in range(kept):
            if not cdist < qdist(metric, cv, csq, data, sqn, out_i[s]):
                by = out_i[s]
                break
        if by < 0:
            out_i[kept] = cid
            out_d[kept] = cdist
            out_tag[kept] = -1
            kept += 1
        else:
            rej[nrej] = c
            rej_by[nrej] = by
            nrej += 1
    n = kept
    for r in range(nrej):
        if n >= cap:
            break
        out_i[n] = cand_i[rej[r]]
        out_d[n] = cand_d[rej[r]]
        out_tag[n] = rej_by[r]
        n += 1
    return n


@njit(nogil=True, cache=True)
def reprune_one_more(metric, data, sqn, base, row_i, row_d, row_tag, cap, x, dx,
                     buf_i, buf_d, buf_t, out_i, out_d, out_tag):
    """``select_neighbors`` over a full heuristic-consistent row plus one new candidate.

    ``row_*`` must be a previous output of the heuristic (kept slots tagged -1,
    backfilled slots tagged with a kept rejector).  Every kept/rejected
    decision before the new candidate is unchanged, so only comparisons that
    involve newly kept nodes are evaluated.  The result is identical to
    re-running the heuristic from scratch.
    """
    n = cap + 1
    for j in range(cap):
        buf_i[j] = row_i[j]
        buf_d[j] = row_d[j]
        buf_t[j] = row_tag[j]
    buf_i[cap] = x
    buf_d[cap] = dx
    buf_t[cap] = -2  # the new candidate
    # insertion sort carrying tags
    for a in range(1, n):
        d = buf_d[a]
        i = buf_i[a]
        t = buf_t[a]
        b = a - 1
        while b >= 0 and _lt(d, i, buf_d[b], buf_i[b]):
            buf_d[b + 1] = buf_d[b]
            buf_i[b + 1] = buf_i[b]
            buf_t[b + 1] = buf_t[b]
            b -= 1
        buf_d[b + 1] = d
        buf_i[b + 1] = i
        buf_t[b + 1] = t

    kept = 0
    # fresh[s] is True when kept slot s was not kept in the previous row
    fresh = np.zeros(cap, dtype=np.bool_)
    rej = np.empty(n, dtype=np.int32)
    rej_by = np.empty(n, dtype=np.int32)
    nrej = 0
    for c in range(n):
        if kept >= cap:
            break
        cid = buf_i[c]
        cdist = buf_d[c]
        tag = buf_t[c]
        cv = data[cid]
        csq = sqn[cid]
        by = -1
        if tag == -1:
            # passed every previously kept node before it; check only the new ones
            for s in range(kept):
                if fresh[s] and not cdist < qdist(metric, cv, csq, data, sqn, out_i[s]):
                    by = out_i[s]
                    break
        else:
            still = False
            if tag >= 0:
                for s in range(kept):
                    if out_i[s] == tag:
                        still = True
                        break
            if still:
                by = tag
            else:
                for s in range(kept):
                    if not cdist < qdist(metric, cv, csq, data, sqn, out_i[s]):
                        by = out_i[s]
                        break
        if by < 0:
            out_i[kept] = cid
            out_d[kept] = cdist
            out_tag[kept] = -1
            fresh[kept] = tag != -1
            kept += 1
        else:
            rej[nrej] = c
            rej_by[nrej] = by
            nrej += 1
    m = kept
    for r in range(nrej):
        if m >= cap:
            break
        out_i[m] = buf_i[rej[r]]
        out_d[m] = buf_d[rej[r]]
        out_tag[m] = rej_by[r]
        m += 1
    return m


@njit(nogil=True, cache=True)
def _add_link(metric, data, sqn, G, LD, layer, s, q, dsq, cap, scratch):
    buf_i, buf_d, buf_t, sel_i, sel_d, sel_t = scratch
    r = _row_index(G, layer, s)
    if layer == 0:
        links = G[0]
        degs = G[1]
        ld = LD[0]
        tags = LD[2]
        ok = LD[4]
    else:
        links = G[2]
        degs = G[3]
        ld = LD[1]
        tags = LD[3]
        ok = LD[5]
    deg = degs[r]
    if deg < cap:
        links[r, deg] = q
        ld[r, deg] = dsq
        degs[r] = deg + 1
        ok[r] = 0
        return
    if ok[r]:
        n = reprune_one_more(metric, data, sqn, s, links[r], ld[r], tags[r], cap, q, dsq,
                             buf_i, buf_d, buf_t, sel_i, sel_d, sel_t)
    else:
        for j in range(deg):
            buf_i[j] = links[r, j]
            buf_d[j] = ld[r, j]
        buf_i[deg] = q
        buf_d[deg] = dsq
        _sort_pairs(buf_d, buf_i, deg + 1)
        n = select_neighbors(metric, data, sqn, buf_i, buf_d, deg + 1, cap, sel_i, sel_d, sel_t)
    for j in range(n):
        links[r, j] = sel_i[j]
        ld[r, j] = sel_d[j]
        tags[r, j] = sel_t[j]
    degs[r] = n
    ok[r] = 1


@njit(nogil=True, cache=True)
def insert_range(metric, data, sqn, G, LD, levels, start, end, entry, max_level,
                 M, M0, ef_construction, visited, vstate):
    """Insert nodes ``start..end-1`` (vectors and levels already stored).

    ``LD = (ld0, uld, tag0, utag, ok0, uok)`` holds build-time caches: link
    distances, heuristic tags and a per-row flag saying the row is an exact
    heuristic output.  Returns the updated (entry, max_level); ``entry == -1``
    means empty graph.
    """
    stats = np.zeros(2, dtype=np.int64)
    no_trace = np.empty(0, dtype=np.int32)
    capmax = max(M, M0) + 1
    scratch = (np.empty(capmax, dtype=np.int32), np.empty(capmax, dtype=np.float32),
               np.empty(capmax, dtype=np.int32), np.empty(capmax, dtype=np.int32),
               np.empty(capmax, dtype=np.float32), np.empty(capmax, dtype=np.int32))
    for q in range(start, end):
        lvl = levels[q]
        if entry < 0:
            entry = q
            max_level = lvl
            continue
        qv = data[q]
        qsq = sqn[q]
        ep = entry
        epd = qdist(metric, qv, qsq, data, sqn, ep)
        for layer in range(max_level, lvl, -1):
            ep, epd = _greedy(metric, qv, qsq, data, sqn, G, layer, ep, epd, stats)
        eps = np.empty(1, dtype=np.int32)
        eps[0] = ep
        for layer in range(min(lvl, max_level), -1, -1):
            ids, ds = search_layer(metric, qv, qsq, data, sqn, G, layer, eps,
                                   ef_construction, visited, vstate, no_trace, stats)
            cap = M0 if layer == 0 else M
            r = _row_index(G, layer, q)
            if layer == 0:
                links = G[0]
                degs = G[1]
                ld = LD[0]
                tags = LD[2]
                ok = LD[4]
            else:
                links = G[2]
                degs = G[3]
                ld = LD[1]
                tags = LD[3]
                ok = LD[5]
            n = select_neighbors(metric, data, sqn, ids, ds, ids.shape[0], cap,
                                 links[r], ld[r], tags[r])
            degs[r] = n
            ok[r] = 1
            for j in range(n):
                _add_link(metric, data, sqn, G, LD, layer, links[r, j], q, ld[r, j], cap,
                          scratch)
            eps = ids
        if lvl > max_level:
            entry = q
            max_level = lvl
    return entry, max_level


@njit(nogil=True, cache=True)
def link_distances(metric, data, sqn, G, LD, levels, n):
    """Recompute the build-time link-distance caches (after deserialization)."""
    for i in range(n):
        for j in range(G[1][i]):
            LD[0][i, j] = qdist(metric, data[i], sqn[i], data, sqn, G[0][i, j])
        for layer in range(1, levels[i] + 1):
            r = G[4][i] + layer - 1
            for j in range(G[3][r]):
                LD[1][r, j] = qdist(metric, data[i], sqn[i], data, sqn, G[2][r, j])


@njit(nogil=True, cache=True)
def search_batch_traced(metric, queries, data, sqn, G, entry, max_level, k, ef,
                        visited, vstate):
    """Like :func:`search_batch` but also returns base-layer first-visit traces.

    Traces are concatenated; query ``t`` owns ``trace[offsets[t]:offsets[t + 1]]``.
    """
    nq = queries.shape[0]
    n = data.shape[0]
    out_i = np.full((nq, k), -1, dtype=np.int32)
    out_d = np.full((nq, k), np.inf, dtype=np.float32)
    comps = np.zeros(nq, dtype=np.int64)
    offsets = np.zeros(nq + 1, dtype=np.int64)
    stats = np.zeros(2, dtype=np.int64)
    buf = np.empty(max(n, 1), dtype=np.int32)
    total = np.empty(max(n, 1024), dtype=np.int32)
    used = 0
    for t in range(nq):
        stats[0] = 0
        stats[1] = 0
        ids, ds = search_one(metric, queries[t], data, sqn, G, entry, max_level, k, ef,
                             visited, vstate, buf, stats)
        out_i[t, :ids.shape[0]] = ids
        out_d[t, :ids.shape[0]] = ds
        comps[t] = stats[0]
        m = stats[1]
        while used + m > total.shape[0]:
            total = np.concatenate((total, np.empty(total.shape[0], dtype=np.int32)))
        total[used:used + m] = buf[:m]
        used += m
        offsets[t + 1] = used
    return out_i, out_d, comps, total[:used].copy(), offsets
