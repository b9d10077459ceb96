"""Compiled log-space dynamic programming kernels.

All kernels take one sequence in pre-gathered form:

    log_em   (L, S)      log E(z, x_l)
    log_tr   (L-1, S, S) log A^(l)(z -> z'); -inf marks forbidden moves
    log_pi   (S,)

``pred``/``succ`` are padded adjacency lists (``-1`` terminated) of the
structurally allowed moves, so merges only visit real neighbours.
"""

import os

import numba
import numpy as np
from numba import njit, prange

# Installed TBB builds are often older than numba accepts; try OpenMP first.
if "NUMBA_THREADING_LAYER_PRIORITY" not in os.environ:
    numba.config.THREADING_LAYER_PRIORITY = ["omp", "tbb", "workqueue"]

NEG_INF = -np.inf


@njit(cache=True, inline="always")
def _lse2(a, b):
    if a == NEG_INF:
        return b
    if b == NEG_INF:
        return a
    if a > b:
        return a + np.log1p(np.exp(b - a))
    return b + np.log1p(np.exp(a - b))


@njit(cache=True)
def logsumexp(x):
    m = NEG_INF
    for v in x:
        if v > m:
            m = v
    if m == NEG_INF:
        return NEG_INF
    s = 0.0
    for v in x:
        s += np.exp(v - m)
    return m + np.log(s)


@njit(cache=True)
def forward_backward(log_em, log_tr, log_pi):
    L, S = log_em.shape
    la = np.full((L, S), NEG_INF)
    lb = np.full((L, S), NEG_INF)
    for z in range(S):
        la[0, z] = log_pi[z] + log_em[0, z]
    for l in range(1, L):
        for z2 in range(S):
            acc = NEG_INF
            for z in range(S):
                t = log_tr[l - 1, z, z2]
                if t != NEG_INF and la[l - 1, z] != NEG_INF:
                    acc = _lse2(acc, la[l - 1, z] + t)
            if acc != NEG_INF:
                la[l, z2] = acc + log_em[l, z2]
    for z in range(S):
        lb[L - 1, z] = 0.0
    for l in range(L - 2, -1, -1):
        for z in range(S):
            acc = NEG_INF
            for z2 in range(S):
                t = log_tr[l, z, z2]
                if t != NEG_INF and lb[l + 1, z2] != NEG_INF:
                    acc = _lse2(acc, t + log_em[l + 1, z2] + lb[l + 1, z2])
            lb[l, z] = acc
    ll_fwd = logsumexp(la[L - 1])
    first = np.empty(S)
    for z in range(S):
        first[z] = log_pi[z] + log_em[0, z] + lb[0, z]
    ll_bwd = logsumexp(first)
    return la, lb, ll_fwd, ll_bwd


@njit(cache=True)
def viterbi(log_em, log_tr, log_pi):
    L, S = log_em.shape
    delta = np.full((L, S), NEG_INF)
    back = np.full((L, S), -1, dtype=np.int64)
    for z in range(S):
        delta[0, z] = log_pi[z] + log_em[0, z]
    for l in range(1, L):
        for z2 in range(S):
            best = NEG_INF
            arg = -1
            for z in range(S):
                t = log_tr[l - 1, z, z2]
                if t == NEG_INF or delta[l - 1, z] == NEG_INF:
                    continue
                c = delta[l - 1, z] + t
                if c > best:
                    best = c
                    arg = z
            if arg >= 0:
                delta[l, z2] = best + log_em[l, z2]
                back[l, z2] = arg
    path = np.empty(L, dtype=np.int64)
    best = NEG_INF
    arg = -1
    for z in range(S):
        if delta[L - 1, z] > best:
            best = delta[L - 1, z]
            arg = z
    path[L - 1] = arg
    for l in range(L - 1, 0, -1):
        path[l - 1] = back[l, path[l]]
    return path, best


@njit(cache=True)
def _kbest_forward(log_em, log_tr, log_pi, inset, pred, D):
    L, S = log_em.shape
    F = np.full((L, S, D), NEG_INF)
    Fv = np.zeros((L, S, D), dtype=np.int64)
    Fn = np.zeros((L, S), dtype=np.int64)
    for z in range(S):
        v = log_pi[z] + log_em[0, z]
        if v != NEG_INF:
            F[0, z, 0] = v
            Fv[0, z, 0] = inset[z]
            Fn[0, z] = 1
    ptr = np.zeros(S, dtype=np.int64)
    for l in range(1, L):
        for z2 in range(S):
            if log_em[l, z2] == NEG_INF:
                continue
            for q in range(pred.shape[1]):
                if pred[z2, q] < 0:
                    break
                ptr[pred[z2, q]] = 0
            n = 0
            while n < D:
                best = NEG_INF
                bz = -1
                for q in range(pred.shape[1]):
                    z = pred[z2, q]
                    if z < 0:
                        break
                    t = log_tr[l - 1, z, z2]
                    if t == NEG_INF or ptr[z] >= Fn[l - 1, z]:
                        continue
                    c = F[l - 1, z, ptr[z]] + t
                    if c > best or (c == best and bz >= 0 and z < bz):
                        best = c
                        bz = z
                if bz < 0:
                    break
                F[l, z2, n] = best + log_em[l, z2]
                Fv[l, z2, n] = Fv[l - 1, bz, ptr[bz]] + inset[z2]
                ptr[bz] += 1
                n += 1
            Fn[l, z2] = n
    return F, Fv, Fn


@njit(cache=True)
def _kbest_backward(log_em, log_tr, inset, succ, D):
    # Bk[l, z, d]: d-th best log-prob of the suffix strictly after l given z_l = z
    # (departure transition included, emission at l excluded).
    L, S = log_em.shape
    Bk = np.full((L, S, D), NEG_INF)
    Bv = np.zeros((L, S, D), dtype=np.int64)
    Bn = np.zeros((L, S), dtype=np.int64)
    for z in range(S):
        Bk[L - 1, z, 0] = 0.0
        Bn[L - 1, z] = 1
    ptr = np.zeros(S, dtype=np.int64)
    for l in range(L - 2, -1, -1):
        for z in range(S):
            for q in range(succ.shape[1]):
                if succ[z, q] < 0:
                    break
                ptr[succ[z, q]] = 0
            n = 0
            while n < D:
                best = NEG_INF
                bz = -1
                for q in range(succ.shape[1]):
                    z2 = succ[z, q]
                    if z2 < 0:
                        break
                    t = log_tr[l, z, z2]
                    if t == NEG_INF or ptr[z2] >= Bn[l + 1, z2]:
                        continue
                    c = t + log_em[l + 1, z2] + Bk[l + 1, z2, ptr[z2]]
                    if c > best or (c == best and bz >= 0 and z2 < bz):
                        best = c
                        bz = z2
                if bz < 0:
                    break
                Bk[l, z, n] = best
                Bv[l, z, n] = Bv[l + 1, bz, ptr[bz]] + inset[bz]
                ptr[bz] += 1
                n += 1
            Bn[l, z] = n
    return Bk, Bv, Bn


@njit(cache=True, inline="always")
def _before(hv, hi, hj, a, b):
    # heap order: larger value first, then lower (i, j)
    if hv[a] != hv[b]:
        return hv[a] > hv[b]
    if hi[a] != hi[b]:
        return hi[a] < hi[b]
    return hj[a] < hj[b]


@njit(cache=True)
def _heap_push(hv, hi, hj, size, v, i, j):
    k = size
    hv[k] = v
    hi[k] = i
    hj[k] = j
    while k > 0:
        p = (k - 1) // 2
        if _before(hv, hi, hj, k, p):
            hv[k], hv[p] = hv[p], hv[k]
            hi[k], hi[p] = hi[p], hi[k]
            hj[k], hj[p] = hj[p], hj[k]
            k = p
        else:
            break
    return size + 1


@njit(cache=True)
def _heap_pop(hv, hi, hj, size):
    size -= 1
    hv[0] = hv[size]
    hi[0] = hi[size]
    hj[0] = hj[size]
    k = 0
    while True:
        c = 2 * k + 1
        if c >= size:
            break
        if c + 1 < size and _before(hv, hi, hj, c + 1, c):
            c += 1
        if _before(hv, hi, hj, c, k):
            hv[k], hv[c] = hv[c], hv[k]
            hi[k], hi[c] = hi[c], hi[k]
            hj[k], hj[c] = hj[c], hj[k]
            k = c
        else:
            break
    return size


@njit(cache=True)
def _combine(fa, fv, nf, ba, bv, nb, D, out_c, out_v, hv, hi, hj):
    """Top-D of fa[i] + ba[j] over pairs; both inputs sorted descending.

    Lazy frontier: every pair (i, j) has the unique parent (i, j-1), or
    (i-1, 0) when j = 0, so the heap never holds more than D + 1 pairs.
    """
    if nf == 0 or nb == 0:
        return 0
    size = _heap_push(hv, hi, hj, 0, fa[0] + ba[0], 0, 0)
    n = 0
    while n < D and size > 0:
        v = hv[0]
        i = hi[0]
        j = hj[0]
        size = _heap_pop(hv, hi, hj, size)
        out_c[n] = v
        out_v[n] = fv[i] + bv[j]
        n += 1
        if j + 1 < nb:
            size = _heap_push(hv, hi, hj, size, fa[i] + ba[j + 1], i, j + 1)
        if j == 0 and i + 1 < nf:
            size = _heap_push(hv, hi, hj, size, fa[i + 1] + ba[0], i + 1, 0)
    return n


@njit(cache=True)
def conditional_paths(log_em, log_tr, log_pi, inset, pred, succ, alias_root, alias_off,
                      la, lb, first_only, D):
    """Top-D conditional paths for every (l, z) at a fixed width D.

    Returns C, V, Cn and per-(l, z) coverage of p(z_l = z, X).  States on
    a deterministic chain share their path set with the chain entry state
    ``alias_off`` positions earlier, so only entry and background states
    are combined explicitly.
    """
    L, S = log_em.shape
    F, Fv, Fn = _kbest_forward(log_em, log_tr, log_pi, inset, pred, D)
    Bk, Bv, Bn = _kbest_backward(log_em, log_tr, inset, succ, D)
    C = np.full((L, S, D), NEG_INF)
    V = np.full((L, S, D), -1, dtype=np.int64)
    Cn = np.zeros((L, S), dtype=np.int64)
    hv = np.empty(D + 2)
    hi = np.empty(D + 2, dtype=np.int64)
    hj = np.empty(D + 2, dtype=np.int64)
    last = 1 if first_only else L
    for l in range(last):
        for z in range(S):
            if alias_off[z] > 0:
                continue
            Cn[l, z] = _combine(F[l, z], Fv[l, z], Fn[l, z], Bk[l, z], Bv[l, z], Bn[l, z],
                                D, C[l, z], V[l, z], hv, hi, hj)
    if not first_only:
        for l in range(L):
            for z in range(S):
                off = alias_off[z]
                if off == 0 or l - off < 0:
                    continue
                r = alias_root[z]
                n = Cn[l - off, r]
                Cn[l, z] = n
                for d in range(n):
                    C[l, z, d] = C[l - off, r, d]
                    V[l, z, d] = V[l - off, r, d]
    cov = np.ones((L, S))
    for l in range(last):
        for z in range(S):
            target = la[l, z] + lb[l, z]
            if target == NEG_INF:
                continue
            cov[l, z] = np.exp(logsumexp(C[l, z, :Cn[l, z]]) - target)
    return C, V, Cn, cov


@njit(cache=True)
def grow_paths(log_em, log_tr, log_pi, inset, pred, succ, alias_root, alias_off,
               la, lb, first_only, d_init, d_cap, threshold):
    D = d_init
    while True:
        C, V, Cn, cov = conditional_paths(log_em, log_tr, log_pi, inset, pred, succ,
                                          alias_root, alias_off, la, lb, first_only, D)
        worst = cov.min()
        if worst >= threshold or D >= d_cap:
            return C, V, Cn, cov, D
        D = D * 2
        if D > d_cap:
            D = d_cap


@njit(cache=True)
def summary_distributions(C, V, Cn, first_only, vmax):
    """Renormalized p(v | z_l = z, X) as a dense (L, S, vmax+1) table."""
    L, S, _ = C.shape
    out = np.zeros((L, S, vmax + 1))
    last = 1 if first_only else L
    for l in range(last):
        for z in range(S):
            n = Cn[l, z]
            if n == 0:
                continue
            top = C[l, z, 0]
            tot = 0.0
            for d in range(n):
                w = np.exp(C[l, z, d] - top)
                out[l, z, V[l, z, d]] += w
                tot += w
            for v in range(vmax + 1):
                out[l, z, v] /= tot
    return out


@njit(cache=True)
def _log_weighted(p, logw):
    """log sum_v p[v] * exp(logw[v]) without underflow."""
    m = NEG_INF
    for v in range(p.shape[0]):
        if p[v] > 0.0 and logw[v] > m:
            m = logw[v]
    if m == NEG_INF:
        return NEG_INF
    s = 0.0
    for v in range(p.shape[0]):
        if p[v] > 0.0:
            s += p[v] * np.exp(logw[v] - m)
    return m + np.log(s)


@njit(cache=True)
def _gather(log_E, X, L):
    S = log_E.shape[0]
    out = np.empty((L, S))
    for l in range(L):
        for z in range(S):
            out[l, z] = log_E[z, X[l]]
    return out


@njit(cache=True, parallel=True)
def batch_forward_backward(log_E, log_tr, log_pi, Xs):
    N, L = Xs.shape
    S = log_E.shape[0]
    gamma = np.zeros((N, L, S))
    xi_entry = np.zeros((N, L - 1, 3))
    ll = np.zeros(N)
    for i in prange(N):
        log_em = _gather(log_E, Xs[i], L)
        la, lb, llf, _ = forward_backward(log_em, log_tr, log_pi)
        ll[i] = llf
        for l in range(L):
            for z in range(S):
                gamma[i, l, z] = np.exp(la[l, z] + lb[l, z] - llf)
        _entry_pairs(la, lb, llf, log_em, log_tr, xi_entry[i])
    return gamma, xi_entry, ll


@njit(cache=True)
def _entry_pairs(la, lb, ll, log_em, log_tr, out):
    """Pairwise posteriors of the three free moves out of B (index 0)."""
    L, S = log_em.shape
    K = (S - 1) // 2
    targets = (0, 1, K + 1)
    for l in range(L - 1):
        for c in range(3):
            z2 = targets[c]
            t = log_tr[l, 0, z2]
            if t == NEG_INF:
                out[l, c] = 0.0
            else:
                out[l, c] = np.exp(la[l, 0] + t + log_em[l + 1, z2] + lb[l + 1, z2] - ll)


@njit(cache=True, parallel=True)
def batch_response_estep(log_E, log_tr, log_pi, inset, pred, succ, alias_root, alias_off,
                         Xs, logpy, d_init, d_cap, threshold):
    """Response-adjusted E-step for every sequence.

    logpy[i, v] = log p(y_i | v).  Returns the adjusted state posteriors,
    the adjusted entry-move posteriors, p(v | X_i), p(v | X_i, y_i),
    log p(X_i), log p(y_i | X_i), the width used and the number of
    under-covered (l, z) cells per sequence.
    """
    N, L = Xs.shape
    S = log_E.shape[0]
    vmax = logpy.shape[1] - 1
    gt = np.zeros((N, L, S))
    xi = np.zeros((N, L - 1, 3))
    marg = np.zeros((N, vmax + 1))
    post = np.zeros((N, vmax + 1))
    llx = np.zeros(N)
    lly = np.zeros(N)
    used = np.zeros(N, dtype=np.int64)
    under = np.zeros(N, dtype=np.int64)
    mincov = np.ones(N)
    K = (S - 1) // 2
    for i in prange(N):
        log_em = _gather(log_E, Xs[i], L)
        la, lb, ll, _ = forward_backward(log_em, log_tr, log_pi)
        llx[i] = ll
        C, V, Cn, cov, D = grow_paths(log_em, log_tr, log_pi, inset, pred, succ,
                                      alias_root, alias_off, la, lb, False,
                                      d_init, d_cap, threshold)
        used[i] = D
        cnt = 0
        for l in range(L):
            for z in range(S):
                if cov[l, z] < threshold:
                    cnt += 1
        under[i] = cnt
        mincov[i] = cov.min()
        cond = summary_distributions(C, V, Cn, False, vmax)
        # p(v | X) from the partition of paths by their state at l = 0
        for z in range(S):
            g0 = np.exp(la[0, z] + lb[0, z] - ll)
            for v in range(vmax + 1):
                marg[i, v] += g0 * cond[0, z, v]
        lly[i] = _log_weighted(marg[i], logpy[i])
        for v in range(vmax + 1):
            if marg[i, v] > 0.0:
                post[i, v] = np.exp(np.log(marg[i, v]) + logpy[i, v] - lly[i])
        lr = np.empty(S)
        for l in range(L):
            top = NEG_INF
            for z in range(S):
                lg = la[l, z] + lb[l, z] - ll
                if lg == NEG_INF:
                    lr[z] = NEG_INF
                    continue
                lr[z] = lg + _log_weighted(cond[l, z], logpy[i])
                if lr[z] > top:
                    top = lr[z]
            norm = 0.0
            for z in range(S):
                if lr[z] != NEG_INF:
                    gt[i, l, z] = np.exp(lr[z] - top)
                    norm += gt[i, l, z]
            for z in range(S):
                gt[i, l, z] /= norm
        # moves into an entry state have B as their only predecessor
        for l in range(L - 1):
            xi[i, l, 1] = gt[i, l + 1, 1]
            xi[i, l, 2] = gt[i, l + 1, K + 1]
            rest = gt[i, l, 0] - xi[i, l, 1] - xi[i, l, 2]
            xi[i, l, 0] = rest if rest > 0.0 else 0.0
    return gt, xi, marg, post, llx, lly, used, under, mincov


@njit(cache=True, parallel=True)
def batch_marginal(log_E, log_tr, log_pi, inset, pred, succ, alias_root, alias_off,
                   Xs, vmax, d_init, d_cap, threshold):
    """p(v | X_i) for every sequence from paths conditioned at l = 0."""
    N, L = Xs.shape
    S = log_E.shape[0]
    marg = np.zeros((N, vmax + 1))
    llx = np.zeros(N)
    used = np.zeros(N, dtype=np.int64)
    mincov = np.ones(N)
    for i in prange(N):
        log_em = _gather(log_E, Xs[i], L)
        la, lb, ll, _ = forward_backward(log_em, log_tr, log_pi)
        llx[i] = ll
        C, V, Cn, cov, D = grow_paths(log_em, log_tr, log_pi, inset, pred, succ,
                                      alias_root, alias_off, la, lb, True,
                                      d_init, d_cap, threshold)
        used[i] = D
        mincov[i] = cov[0].min()
        cond = summary_distributions(C, V, Cn, True, vmax)
        for z in range(S):
            g0 = np.exp(la[0, z] + lb[0, z] - ll)
            for v in range(vmax + 1):
                marg[i, v] += g0 * cond[0, z, v]
    return marg, llx, used, mincov
