# cython: boundscheck=False, wraparound=False, language_level=3
"""Compiled kernels: BFS reachability and longest-match token scanning.

Mirrors `_pure` exactly; see that module for the semantics.
"""

import numpy as np

cimport numpy as cnp

cnp.import_array()

BACKEND = "ext"


def reachable_within(indptr, indices, seeds, hops):
    cdef cnp.int64_t[::1] ip = np.ascontiguousarray(indptr, dtype=np.int64)
    cdef cnp.int64_t[::1] ix = np.ascontiguousarray(indices, dtype=np.int64)
    cdef cnp.int64_t[::1] sd = np.ascontiguousarray(seeds, dtype=np.int64)
    cdef Py_ssize_t n = ip.shape[0] - 1
    cdef cnp.int64_t[::1] dist = np.full(n, -1, dtype=np.int64)
    cdef cnp.int64_t[::1] frontier = np.empty(n, dtype=np.int64)
    cdef cnp.int64_t[::1] nxt = np.empty(n, dtype=np.int64)
    cdef Py_ssize_t flen = 0, nlen, i, u, v, e
    cdef long depth = 0, max_hops = hops

    for i in range(sd.shape[0]):
        u = sd[i]
        if dist[u] < 0:
            dist[u] = 0
            frontier[flen] = u
            flen += 1
    while flen > 0 and depth < max_hops:
        depth += 1
        nlen = 0
        for i in range(flen):
            u = frontier[i]
            for e in range(ip[u], ip[u + 1]):
                v = ix[e]
                if dist[v] < 0:
                    dist[v] = depth
                    nxt[nlen] = v
                    nlen += 1
        frontier, nxt = nxt, frontier
        flen = nlen
    return np.flatnonzero(np.asarray(dist) >= 0).astype(np.int64)


def match_spans(tokens, pat_flat, pat_start, pat_len, pat_owner,
                first_tids, group_start, group_end):
    cdef cnp.int64_t[::1] tok = np.ascontiguousarray(tokens, dtype=np.int64)
    cdef cnp.int64_t[::1] flat = np.ascontiguousarray(pat_flat, dtype=np.int64)
    cdef cnp.int64_t[::1] pstart = np.ascontiguousarray(pat_start, dtype=np.int64)
    cdef cnp.int64_t[::1] plen = np.ascontiguousarray(pat_len, dtype=np.int64)
    cdef cnp.int64_t[::1] owner = np.ascontiguousarray(pat_owner, dtype=np.int64)
    cdef cnp.int64_t[::1] firsts = np.ascontiguousarray(first_tids, dtype=np.int64)
    cdef cnp.int64_t[::1] gs = np.ascontiguousarray(group_start, dtype=np.int64)
    cdef cnp.int64_t[::1] ge = np.ascontiguousarray(group_end, dtype=np.int64)
    cdef Py_ssize_t n = tok.shape[0], ng = firsts.shape[0]
    cdef cnp.int64_t[::1] out = np.empty(n if n > 0 else 1, dtype=np.int64)
    cdef Py_ssize_t olen = 0, pos = 0, step, k, j, lo, hi, mid, g
    cdef cnp.int64_t t
    cdef Py_ssize_t L, ps
    cdef bint ok

    while pos < n:
        t = tok[pos]
        step = 1
        if t >= 0 and ng > 0:
            lo = 0
            hi = ng
            while lo < hi:
                mid = (lo + hi) >> 1
                if firsts[mid] < t:
                    lo = mid + 1
                else:
                    hi = mid
            g = lo
            if g < ng and firsts[g] == t:
                for k in range(gs[g], ge[g]):
                    L = plen[k]
                    if pos + L > n:
                        continue
                    ps = pstart[k]
                    ok = True
                    for j in range(L):
                        if tok[pos + j] != flat[ps + j]:
                            ok = False
                            break
                    if ok:
                        out[olen] = owner[k]
                        olen += 1
                        step = L
                        break
        pos += step
    return np.asarray(out[:olen]).copy()
