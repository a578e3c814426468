"""Pure-Python kernels: BFS reachability and longest-match token scanning.

Semantics here are the reference; the compiled `_graph_ext` module mirrors
them exactly and is preferred at import time when available.
"""

from __future__ import annotations

import numpy as np

BACKEND = "pure"


def reachable_within(indptr, indices, seeds, hops):
    """Node ids within `hops` hops of any seed, as a sorted int64 array.

    `indptr`/`indices` form a CSR adjacency over nodes 0..N-1. hops=0 keeps
    only the seeds themselves.
    """
    n = len(indptr) - 1
    dist = np.full(n, -1, dtype=np.int64)
    frontier = []
    for s in seeds:
        s = int(s)
        if dist[s] < 0:
            dist[s] = 0
            frontier.append(s)
    depth = 0
    while frontier and depth < hops:
        depth += 1
        nxt = []
        for u in frontier:
            for v in indices[indptr[u]:indptr[u + 1]]:
                v = int(v)
                if dist[v] < 0:
                    dist[v] = depth
                    nxt.append(v)
        frontier = nxt
    return np.flatnonzero(dist >= 0).astype(np.int64)


def match_spans(tokens, pat_flat, pat_start, pat_len, pat_owner,
                first_tids, group_start, group_end):
    """Greedy left-to-right longest-match scan over an int token stream.

    Patterns are flattened into `pat_flat` (slices given by `pat_start`,
    `pat_len`), each owned by entity id `pat_owner[k]`, grouped by first
    token id: group `g` covers patterns `group_start[g]:group_end[g]` and
    `first_tids[g]` is that shared first token (sorted ascending). Within a
    group, patterns are sorted by descending length so the first full match
    is the longest. Returns the matched owner ids in scan order.
    """
    out = []
    n = len(tokens)
    pos = 0
    while pos < n:
        t = tokens[pos]
        step = 1
        if t >= 0:
            g = np.searchsorted(first_tids, t)
            if g < len(first_tids) and first_tids[g] == t:
                for k in range(group_start[g], group_end[g]):
                    plen = int(pat_len[k])
                    if pos + plen > n:
                        continue
                    ps = int(pat_start[k])
                    ok = True
                    for j in range(plen):
                        if tokens[pos + j] != pat_flat[ps + j]:
                            ok = False
                            break
                    if ok:
                        out.append(int(pat_owner[k]))
                        step = plen
                        break
        pos += step
    return np.asarray(out, dtype=np.int64)
