"""Compiled inner loops: tree growth, leaf lookup and batched local solves.

All kernels release the GIL so trees and test points can be spread over a
thread pool. Nothing here allocates random state; callers pass in a
``numpy.random.Generator`` owned by the tree being grown.
"""

import math

import numpy as np
from numba import njit

RULE_CART = 0
RULE_RIDGE = 1

_JIT = dict(cache=True, nogil=True)


# ---------------------------------------------------------------------------
# small dense linear algebra

@njit(**_JIT)
def _cholesky_inplace(M):
    p = M.shape[0]
    for j in range(p):
        s = M[j, j]
        for k in range(j):
            s -= M[j, k] * M[j, k]
        if not s > 0.0:
            return False
        ljj = math.sqrt(s)
        M[j, j] = ljj
        for i in range(j + 1, p):
            t = M[i, j]
            for k in range(j):
                t -= M[i, k] * M[j, k]
            M[i, j] = t / ljj
    return True


@njit(**_JIT)
def _chol_solve_factored(L, b, out):
    p = L.shape[0]
    for i in range(p):
        t = b[i]
        for k in range(i):
            t -= L[i, k] * out[k]
        out[i] = t / L[i, i]
    for i in range(p - 1, -1, -1):
        t = out[i]
        for k in range(i + 1, p):
            t -= L[k, i] * out[k]
        out[i] = t / L[i, i]


@njit(**_JIT)
def spd_factor(M, L):
    """Cholesky of ``M`` into ``L``; retries once with a 1e-12 diagonal jitter."""
    p = M.shape[0]
    L[:, :] = M
    if _cholesky_inplace(L):
        return True
    scale = 0.0
    for i in range(p):
        scale = max(scale, abs(M[i, i]))
    jitter = 1e-12 * max(scale, 1.0)
    L[:, :] = M
    for i in range(p):
        L[i, i] += jitter
    return _cholesky_inplace(L)


# ---------------------------------------------------------------------------
# splitting

@njit(**_JIT)
def _min_child(m, omega):
    c = int(math.ceil(omega * m - 1e-9))
    return max(c, 1)


@njit(**_JIT)
def best_split(X, r, jrows, irows, cand, omega, min_leaf, check_honest, tol):
    """Best variance-reduction split of the J rows on the candidate variables.

    ``r[k]`` is the response of ``jrows[k]``. A split is admissible when each
    child keeps at least ``ceil(omega * m)`` J rows and, if ``check_honest``,
    at least ``min_leaf`` of the I rows. Returns ``(var, threshold, gain)``
    with ``var = -1`` when nothing is admissible. Ties (within ``tol``) go to
    the lowest variable, then the lowest threshold.
    """
    m = jrows.shape[0]
    mi = irows.shape[0]
    min_j = _min_child(m, omega)
    total = 0.0
    for k in range(m):
        total += r[k]
    base = total * total / m
    best_var = -1
    best_thr = 0.0
    best_gain = -np.inf
    xs = np.empty(m)
    xi = np.empty(mi)
    for c in range(cand.shape[0]):
        v = cand[c]
        for k in range(m):
            xs[k] = X[jrows[k], v]
        order = np.argsort(xs, kind="mergesort")
        if check_honest:
            for k in range(mi):
                xi[k] = X[irows[k], v]
            xi.sort()
        sl = 0.0
        ip = 0
        for p in range(1, m):
            sl += r[order[p - 1]]
            if p < min_j:
                continue
            if m - p < min_j:
                break
            a = xs[order[p - 1]]
            b = xs[order[p]]
            if not a < b:
                continue
            thr = 0.5 * (a + b)
            if not thr < b:
                thr = a
            if check_honest:
                while ip < mi and xi[ip] <= thr:
                    ip += 1
                if ip < min_leaf or mi - ip < min_leaf:
                    continue
            sr = total - sl
            gain = sl * sl / p + sr * sr / (m - p) - base
            if gain > best_gain + tol:
                best_gain = gain
                best_var = v
                best_thr = thr
    return best_var, best_thr, best_gain


@njit(**_JIT)
def ridge_fit(X, y, rows, lam, beta):
    """Ridge of ``y[k]`` on ``[1, X[rows[k]]]`` with an unpenalized intercept."""
    d = X.shape[1]
    p = d + 1
    G = np.zeros((p, p))
    g = np.zeros(p)
    z = np.empty(p)
    z[0] = 1.0
    for k in range(rows.shape[0]):
        i = rows[k]
        for a in range(d):
            z[a + 1] = X[i, a]
        for a in range(p):
            g[a] += z[a] * y[k]
            for b in range(a + 1):
                G[a, b] += z[a] * z[b]
    for a in range(p):
        for b in range(a):
            G[b, a] = G[a, b]
        if a > 0:
            G[a, a] += lam
    L = np.empty((p, p))
    if not spd_factor(G, L):
        return False
    _chol_solve_factored(L, g, beta)
    return True


@njit(**_JIT)
def ridge_residuals(X, y, rows, beta, out):
    d = X.shape[1]
    for k in range(rows.shape[0]):
        i = rows[k]
        f = beta[0]
        for a in range(d):
            f += X[i, a] * beta[a + 1]
        out[k] = y[k] - f


@njit(**_JIT)
def _causal_pseudo(yv, wv, out):
    """Gradient pseudo-outcome of a residual-on-residual slope at one node."""
    m = yv.shape[0]
    ybar = 0.0
    wbar = 0.0
    for k in range(m):
        ybar += yv[k]
        wbar += wv[k]
    ybar /= m
    wbar /= m
    sww = 0.0
    swy = 0.0
    for k in range(m):
        sww += (wv[k] - wbar) ** 2
        swy += (wv[k] - wbar) * (yv[k] - ybar)
    var = sww / m
    if not var > 1e-12:
        return False
    tau = swy / sww
    for k in range(m):
        wc = wv[k] - wbar
        out[k] = wc * ((yv[k] - ybar) - wc * tau) / var
    return True


@njit(**_JIT)
def grow_tree(X, y, wres, causal, jrows0, irows0, mtry, min_leaf, omega, rule,
              lam_split, cutoff, force_prob, rng):
    """Grow one honest tree.

    Structure is chosen from ``y`` (or the causal pseudo-outcome built from
    ``y`` and ``wres``) on the J rows only; I rows enter only through their
    covariates, for leaf-size checks, and are stored as leaf members.

    Returns ``(split_var, threshold, left, right, depth, leaf_start,
    leaf_count, members)`` trimmed to the number of nodes grown.
    """
    d = X.shape[1]
    nj0 = jrows0.shape[0]
    max_nodes = 2 * nj0 + 1
    split_var = np.full(max_nodes, -1, np.int32)
    threshold = np.zeros(max_nodes)
    left = np.full(max_nodes, -1, np.int32)
    right = np.full(max_nodes, -1, np.int32)
    depth = np.zeros(max_nodes, np.int32)
    leaf_start = np.full(max_nodes, -1, np.int64)
    leaf_count = np.zeros(max_nodes, np.int64)
    members = np.empty(irows0.shape[0], np.int64)

    jwork = jrows0.copy()
    iwork = irows0.copy()
    jtmp = np.empty(nj0, np.int64)
    itmp = np.empty(irows0.shape[0], np.int64)
    node_js = np.zeros(max_nodes, np.int64)
    node_je = np.zeros(max_nodes, np.int64)
    node_is = np.zeros(max_nodes, np.int64)
    node_ie = np.zeros(max_nodes, np.int64)
    node_beta = np.full(max_nodes, -1, np.int64)
    max_fits = 2 * (nj0 // max(cutoff, 1)) + 2
    betas = np.zeros((max_fits, d + 1))
    n_fits = 0

    perm = np.arange(d)
    yv = np.empty(nj0)
    wv = np.empty(nj0)
    base = np.empty(nj0)
    resid = np.empty(nj0)
    stack = np.empty(max_nodes, np.int64)

    node_je[0] = nj0
    node_ie[0] = irows0.shape[0]
    sp = 0
    stack[sp] = 0
    sp += 1
    n_nodes = 1
    n_mem = 0
    while sp > 0:
        sp -= 1
        node = stack[sp]
        js = node_js[node]
        je = node_je[node]
        is_ = node_is[node]
        ie = node_ie[node]
        mj = je - js
        mi = ie - is_
        var = -1
        thr = 0.0
        child_beta = node_beta[node]
        if mj >= max(2 * min_leaf, 2) and mi >= 2 * min_leaf:
            rows = jwork[js:je]
            ok = True
            for k in range(mj):
                yv[k] = y[rows[k]]
            if causal:
                for k in range(mj):
                    wv[k] = wres[rows[k]]
                ok = _causal_pseudo(yv[:mj], wv[:mj], base[:mj])
            else:
                base[:mj] = yv[:mj]
            if ok:
                r = base[:mj]
                if rule == RULE_RIDGE:
                    if mj >= cutoff and n_fits < max_fits:
                        if ridge_fit(X, base[:mj], rows, lam_split, betas[n_fits]):
                            child_beta = n_fits
                            n_fits += 1
                    if child_beta >= 0:
                        ridge_residuals(X, base[:mj], rows, betas[child_beta], resid[:mj])
                        r = resid[:mj]
                # candidate variables
                if rng.random() < force_prob:
                    cand = np.empty(1, np.int64)
                    cand[0] = rng.integers(0, d)
                else:
                    for a in range(d):
                        perm[a] = a
                    for a in range(mtry):
                        b = rng.integers(a, d)
                        t = perm[a]
                        perm[a] = perm[b]
                        perm[b] = t
                    cand = np.sort(perm[:mtry].astype(np.int64))
                bmean = 0.0
                for k in range(mj):
                    bmean += base[k]
                bmean /= mj
                scale = 0.0
                for k in range(mj):
                    scale += r[k] * r[k] + (base[k] - bmean) ** 2
                tol = 1e-12 * scale
                var, thr, gain = best_split(X, r, rows, iwork[is_:ie], cand, omega,
                                            min_leaf, True, tol)
                if not np.isfinite(gain):
                    var = -1
        if var >= 0:
            # stable partition of both samples
            nl = 0
            nr = 0
            for k in range(js, je):
                i = jwork[k]
                if X[i, var] <= thr:
                    jwork[js + nl] = i
                    nl += 1
                else:
                    jtmp[nr] = i
                    nr += 1
            for k in range(nr):
                jwork[js + nl + k] = jtmp[k]
            jmid = js + nl
            nl = 0
            nr = 0
            for k in range(is_, ie):
                i = iwork[k]
                if X[i, var] <= thr:
                    iwork[is_ + nl] = i
                    nl += 1
                else:
                    itmp[nr] = i
                    nr += 1
            for k in range(nr):
                iwork[is_ + nl + k] = itmp[k]
            imid = is_ + nl

            lc = n_nodes
            rc = n_nodes + 1
            n_nodes += 2
            split_var[node] = var
            threshold[node] = thr
            left[node] = lc
            right[node] = rc
            node_js[lc] = js
            node_je[lc] = jmid
            node_is[lc] = is_
            node_ie[lc] = imid
            node_js[rc] = jmid
            node_je[rc] = je
            node_is[rc] = imid
            node_ie[rc] = ie
            node_beta[lc] = child_beta
            node_beta[rc] = child_beta
            depth[lc] = depth[node] + 1
            depth[rc] = depth[node] + 1
            stack[sp] = rc
            sp += 1
            stack[sp] = lc
            sp += 1
        else:
            leaf_start[node] = n_mem
            leaf_count[node] = mi
            seg = np.sort(iwork[is_:ie])
            for k in range(mi):
                members[n_mem + k] = seg[k]
            n_mem += mi
    return (split_var[:n_nodes].copy(), threshold[:n_nodes].copy(), left[:n_nodes].copy(),
            right[:n_nodes].copy(), depth[:n_nodes].copy(), leaf_start[:n_nodes].copy(),
            leaf_count[:n_nodes].copy(), members[:n_mem].copy())


# ---------------------------------------------------------------------------
# forest traversal

@njit(**_JIT)
def find_leaf(split_var, threshold, left, right, offset, x):
    node = 0
    while split_var[offset + node] >= 0:
        v = split_var[offset + node]
        if x[v] <= threshold[offset + node]:
            node = left[offset + node]
        else:
            node = right[offset + node]
    return offset + node


@njit(**_JIT)
def forest_leaves(split_var, threshold, left, right, node_off, leaf_count, in_sample,
                  Xtest, oob_rows):
    """Global leaf id per (test point, tree); -1 if the tree is skipped.

    A tree is skipped when its leaf holds no estimation points, or when
    ``oob_rows[t] >= 0`` and that training row was in the tree's subsample.
    """
    nt = Xtest.shape[0]
    B = node_off.shape[0] - 1
    out = np.full((nt, B), -1, np.int64)
    for t in range(nt):
        x = Xtest[t]
        o = oob_rows[t]
        for b in range(B):
            if o >= 0 and in_sample[b, o]:
                continue
            leaf = find_leaf(split_var, threshold, left, right, node_off[b], x)
            if leaf_count[leaf] > 0:
                out[t, b] = leaf
    return out


@njit(**_JIT)
def leaves_to_weights(leaves, leaf_start, leaf_count, members, n):
    """CSR forest weights from per-tree leaves (empty trees renormalized away)."""
    nt, B = leaves.shape
    scratch = np.zeros(n)
    mark = np.zeros(n, np.bool_)
    touched = np.empty(n, np.int64)
    indptr = np.zeros(nt + 1, np.int64)
    cap = max(n, 16)
    idx = np.empty(cap, np.int64)
    val = np.empty(cap)
    nnz = 0
    for t in range(nt):
        nt_used = 0
        ntouch = 0
        for b in range(B):
            leaf = leaves[t, b]
            if leaf < 0:
                continue
            nt_used += 1
            c = leaf_count[leaf]
            s = leaf_start[leaf]
            inv = 1.0 / c
            for k in range(c):
                i = members[s + k]
                if not mark[i]:
                    mark[i] = True
                    touched[ntouch] = i
                    ntouch += 1
                scratch[i] += inv
        if nnz + ntouch > cap:
            while nnz + ntouch > cap:
                cap *= 2
            idx2 = np.empty(cap, np.int64)
            val2 = np.empty(cap)
            idx2[:nnz] = idx[:nnz]
            val2[:nnz] = val[:nnz]
            idx = idx2
            val = val2
        srt = np.sort(touched[:ntouch])
        for k in range(ntouch):
            i = srt[k]
            idx[nnz + k] = i
            val[nnz + k] = scratch[i] / nt_used
            scratch[i] = 0.0
            mark[i] = False
        nnz += ntouch
        indptr[t + 1] = nnz
    return indptr, idx[:nnz].copy(), val[:nnz].copy()


# ---------------------------------------------------------------------------
# batched local regressions

@njit(**_JIT)
def local_ridge_batch(indptr, idx, val, X, Y, Xtest, feats, lambdas, want_gamma):
    """Weighted ridge with unpenalized intercept at every test point.

    Returns ``mu[t, l]`` for each penalty, a status array (0 ok, 1 no
    neighbors, 2 singular) and, if ``want_gamma``, the score residuals
    Gamma (CSR-aligned with the weights) at ``lambdas[0]``.
    """
    nt = Xtest.shape[0]
    q = feats.shape[0]
    p = q + 1
    nl = lambdas.shape[0]
    mu = np.full((nt, nl), np.nan)
    status = np.zeros(nt, np.int64)
    gamma = np.zeros(idx.shape[0]) if want_gamma else np.zeros(0)
    M0 = np.zeros((p, p))
    rhs = np.zeros(p)
    M = np.empty((p, p))
    L = np.empty((p, p))
    beta = np.empty(p)
    zeta = np.empty(p)
    e1 = np.zeros(p)
    e1[0] = 1.0
    z = np.empty(p)
    z[0] = 1.0
    for t in range(nt):
        a0 = indptr[t]
        a1 = indptr[t + 1]
        if a1 == a0:
            status[t] = 1
            continue
        M0[:, :] = 0.0
        rhs[:] = 0.0
        for k in range(a0, a1):
            i = idx[k]
            w = val[k]
            for a in range(q):
                z[a + 1] = X[i, feats[a]] - Xtest[t, feats[a]]
            for a in range(p):
                rhs[a] += w * z[a] * Y[i]
                for b in range(a + 1):
                    M0[a, b] += w * z[a] * z[b]
        for a in range(p):
            for b in range(a):
                M0[b, a] = M0[a, b]
        for l in range(nl):
            M[:, :] = M0
            for a in range(1, p):
                M[a, a] += lambdas[l]
            if not spd_factor(M, L):
                status[t] = 2
                continue
            _chol_solve_factored(L, rhs, beta)
            mu[t, l] = beta[0]
            if want_gamma and l == 0:
                _chol_solve_factored(L, e1, zeta)
                for k in range(a0, a1):
                    i = idx[k]
                    for a in range(q):
                        z[a + 1] = X[i, feats[a]] - Xtest[t, feats[a]]
                    zd = 0.0
                    fit = 0.0
                    for a in range(p):
                        zd += zeta[a] * z[a]
                        fit += beta[a] * z[a]
                    gamma[k] = zd * (Y[i] - fit)
    return mu, status, gamma


@njit(**_JIT)
def causal_ridge_batch(indptr, idx, val, X, Yres, Wres, Xtest, feats, lam_tau, lam_a):
    """Local linear causal solve for each test point and each penalty pair.

    Design columns are ``[1, dx, w, w * dx]`` with ``dx = X_i - x0`` over the
    selected features and ``w`` the treatment residual. ``lam_a`` penalizes
    the ``dx`` block and ``lam_tau`` the ``w * dx`` block; the returned value
    is the coefficient on ``w``.
    """
    nt = Xtest.shape[0]
    q = feats.shape[0]
    p = 2 * (q + 1)
    npair = lam_tau.shape[0]
    tau = np.full((nt, npair), np.nan)
    status = np.zeros(nt, np.int64)
    M0 = np.zeros((p, p))
    rhs = np.zeros(p)
    M = np.empty((p, p))
    L = np.empty((p, p))
    beta = np.empty(p)
    z = np.empty(p)
    for t in range(nt):
        a0 = indptr[t]
        a1 = indptr[t + 1]
        if a1 == a0:
            status[t] = 1
            continue
        M0[:, :] = 0.0
        rhs[:] = 0.0
        for k in range(a0, a1):
            i = idx[k]
            w = val[k]
            wr = Wres[i]
            z[0] = 1.0
            z[q + 1] = wr
            for a in range(q):
                dx = X[i, feats[a]] - Xtest[t, feats[a]]
                z[a + 1] = dx
                z[q + 2 + a] = wr * dx
            for a in range(p):
                rhs[a] += w * z[a] * Yres[i]
                for b in range(a + 1):
                    M0[a, b] += w * z[a] * z[b]
        for a in range(p):
            for b in range(a):
                M0[b, a] = M0[a, b]
        for l in range(npair):
            M[:, :] = M0
            for a in range(q):
                M[a + 1, a + 1] += lam_a[l]
                M[q + 2 + a, q + 2 + a] += lam_tau[l]
            if not spd_factor(M, L):
                status[t] = 2
                continue
            _chol_solve_factored(L, rhs, beta)
            tau[t, l] = beta[q + 1]
    return tau, status


@njit(**_JIT)
def little_bags_batch(leaves, leaf_start, leaf_count, members, tree_group, n_groups,
                      indptr, idx, gamma, n):
    """Bootstrap-of-little-bags variance for each test point.

    For every tree with a usable leaf the tree term is the leaf average of
    Gamma; group means are compared across groups and the within-group
    Monte Carlo noise is subtracted. Returns ``(sigma2, between, within,
    groups_used)``.
    """
    nt, B = leaves.shape
    sigma2 = np.full(nt, np.nan)
    between = np.full(nt, np.nan)
    within = np.full(nt, np.nan)
    used = np.zeros(nt, np.int64)
    dense = np.zeros(n)
    gsum = np.zeros(n_groups)
    gsq = np.zeros(n_groups)
    gcnt = np.zeros(n_groups, np.int64)
    for t in range(nt):
        for k in range(indptr[t], indptr[t + 1]):
            dense[idx[k]] = gamma[k]
        gsum[:] = 0.0
        gsq[:] = 0.0
        gcnt[:] = 0
        for b in range(B):
            leaf = leaves[t, b]
            if leaf < 0:
                continue
            s = leaf_start[leaf]
            c = leaf_count[leaf]
            acc = 0.0
            for k in range(c):
                acc += dense[members[s + k]]
            term = acc / c
            g = tree_group[b]
            gsum[g] += term
            gsq[g] += term * term
            gcnt[g] += 1
        for k in range(indptr[t], indptr[t + 1]):
            dense[idx[k]] = 0.0
        ng = 0
        psum = 0.0
        inv_cnt = 0.0
        for g in range(n_groups):
            if gcnt[g] > 0:
                ng += 1
                psum += gsum[g] / gcnt[g]
                inv_cnt += 1.0 / gcnt[g]
        used[t] = ng
        if ng < 2:
            continue
        pbar = psum / ng
        bv = 0.0
        for g in range(n_groups):
            if gcnt[g] > 0:
                bv += (gsum[g] / gcnt[g] - pbar) ** 2
        bv /= ng - 1
        wsum = 0.0
        nw = 0
        for g in range(n_groups):
            c = gcnt[g]
            if c >= 2:
                m = gsum[g] / c
                wsum += (gsq[g] - c * m * m) / (c - 1)
                nw += 1
        wv = wsum / nw if nw > 0 else 0.0
        if wv < 0.0:
            wv = 0.0
        correction = wv * inv_cnt / ng
        between[t] = bv
        within[t] = wv
        sigma2[t] = max(0.0, bv - correction)
    return sigma2, between, within, used
