"""Numba kernels for the hot loops.

All parallel loops are partitioned by output row, so every array element is
written by exactly one thread in a fixed order: results are bit-identical
regardless of the thread count.
"""

import numba as nb
import numpy as np


@nb.njit(cache=True, inline="always")
def tri_index(a: int, b: int, n: int) -> int:
    """Flat index of (a, b) in row-major upper-triangle-with-diagonal storage."""
    if a <= b:
        return a * n - (a * (a - 1)) // 2 + (b - a)
    return b * n - (b * (b - 1)) // 2 + (a - b)


@nb.njit(parallel=True, cache=True)
def csr_zonal_values(indptr, indices, row_xyz, col_xyz, wl, out_t, out_k, out_kp):
    """Evaluate cos-angle, kernel value and radial derivative per CSR entry.

    ``wl`` holds the spectral weights (2l+1) exp(-l(l+1) sigma) (already
    divided by 4 pi when normalized).  The kernel value is the Legendre
    contraction clamped at zero; ``out_kp`` receives d/dt of the unclamped
    contraction, using the pole limit P_l'(+-1) = (+-1)^(l+1) l(l+1)/2.
    The recurrence runs vectorized over each row's entries so it can SIMD.
    """
    n_rows = indptr.size - 1
    H = wl.size - 1
    c1 = np.empty(H + 1)
    c2 = np.empty(H + 1)
    for l in range(1, H + 1):
        c1[l] = (2.0 * l - 1.0) / l
        c2[l] = (l - 1.0) / l
    for a in nb.prange(n_rows):
        lo = indptr[a]
        m = indptr[a + 1] - lo
        if m == 0:
            continue
        rx = row_xyz[a, 0]
        ry = row_xyz[a, 1]
        rz = row_xyz[a, 2]
        t = np.empty(m)
        for i in range(m):
            j = indices[lo + i]
            ti = rx * col_xyz[j, 0] + ry * col_xyz[j, 1] + rz * col_xyz[j, 2]
            if ti > 1.0:
                ti = 1.0
            elif ti < -1.0:
                ti = -1.0
            t[i] = ti
        k = np.full(m, wl[0])
        dnum = np.zeros(m)
        pm = np.ones(m)
        pk = t.copy()
        if H >= 1:
            for i in range(m):
                k[i] += wl[1] * pk[i]
                dnum[i] += wl[1] * (pm[i] - t[i] * pk[i])
            for l in range(2, H + 1):
                a1 = c1[l]
                a2 = c2[l]
                w = wl[l]
                wd = l * wl[l]
                for i in range(m):
                    pn = a1 * t[i] * pk[i] - a2 * pm[i]
                    pm[i] = pk[i]
                    pk[i] = pn
                    k[i] += w * pn
                    dnum[i] += wd * (pm[i] - t[i] * pn)
        for i in range(m):
            ti = t[i]
            s2 = 1.0 - ti * ti
            if s2 > 1e-14:
                kp = dnum[i] / s2
            else:
                kp = 0.0
                sgn = 1.0 if ti > 0.0 else -1.0
                flip = sgn  # sgn^(l+1) at l = 0
                for l in range(H + 1):
                    kp += wl[l] * flip * 0.5 * l * (l + 1)
                    flip *= sgn
            out_t[lo + i] = ti
            out_k[lo + i] = k[i] if k[i] > 0.0 else 0.0
            out_kp[lo + i] = kp


@nb.njit(parallel=True, cache=True)
def gather_entries(order, col_ids, t, k, kp, out_idx, out_t, out_k, out_kp):
    """Apply a transpose permutation to the entry arrays in one pass."""
    for i in nb.prange(order.size):
        src = order[i]
        out_idx[i] = col_ids[src]
        out_t[i] = t[src]
        out_k[i] = k[src]
        out_kp[i] = kp[src]


@nb.njit(parallel=True, cache=True)
def fill_candidates(q_indptr, query_ids, query_faces, face_indptr, face_rows, out):
    """Copy each query's coarse-face candidate list into the flat layout."""
    for i in nb.prange(query_ids.size):
        pos = q_indptr[query_ids[i]]
        f = query_faces[i]
        for e in range(face_indptr[f], face_indptr[f + 1]):
            out[pos + e - face_indptr[f]] = face_rows[e]


@nb.njit(cache=True)
def csr_transpose_order(indices, indptr_t):
    """Entry permutation mapping row-major CSR order to its transpose.

    Equivalent to a stable counting sort of entries by column, so entries
    within a transposed row keep increasing original-row order.
    """
    order = np.empty(indices.size, dtype=np.int64)
    pos = indptr_t[:-1].copy()
    for e in range(indices.size):
        c = indices[e]
        order[pos[c]] = e
        pos[c] += 1
    return order


@nb.njit(parallel=True, cache=True)
def sort_csr_rows(indptr, indices):
    """Sort the column indices of each CSR row in place."""
    for a in nb.prange(indptr.size - 1):
        indices[indptr[a]: indptr[a + 1]].sort()


PANEL = 64


@nb.njit(parallel=True, cache=True)
def candidate_tfilter_counts(q_indptr, q_cand, row_xyz, col_xyz, tmin, counts):
    """Per query, how many candidate rows pass the cos-angle prefilter."""
    for q in nb.prange(q_indptr.size - 1):
        cx = col_xyz[q, 0]
        cy = col_xyz[q, 1]
        cz = col_xyz[q, 2]
        c = 0
        for e in range(q_indptr[q], q_indptr[q + 1]):
            a = q_cand[e]
            t = cx * row_xyz[a, 0] + cy * row_xyz[a, 1] + cz * row_xyz[a, 2]
            if t >= tmin:
                c += 1
        counts[q] = c


@nb.njit(parallel=True, cache=True)
def zonal_eval_filtered(q_indptr, q_cand, row_xyz, col_xyz, wl, tmin,
                        out_indptr, out_rows, out_t, out_k, out_kp):
    """Kernel evaluation on prefiltered candidates, packed per query.

    Writes entries for query ``q`` at ``out_indptr[q]..out_indptr[q+1]`` in
    candidate order; the Legendre recurrence runs vectorized over each
    query's surviving candidates.  Values follow the same clamping and pole
    conventions as :func:`csr_zonal_values`.
    """
    H = wl.size - 1
    c1 = np.empty(H + 1)
    c2 = np.empty(H + 1)
    for l in range(1, H + 1):
        c1[l] = (2.0 * l - 1.0) / l
        c2[l] = (l - 1.0) / l
    for q in nb.prange(q_indptr.size - 1):
        lo = out_indptr[q]
        m = out_indptr[q + 1] - lo
        if m == 0:
            continue
        cx = col_xyz[q, 0]
        cy = col_xyz[q, 1]
        cz = col_xyz[q, 2]
        pos = lo
        for e in range(q_indptr[q], q_indptr[q + 1]):
            a = q_cand[e]
            t = cx * row_xyz[a, 0] + cy * row_xyz[a, 1] + cz * row_xyz[a, 2]
            if t >= tmin:
                if t > 1.0:
                    t = 1.0
                elif t < -1.0:
                    t = -1.0
                out_rows[pos] = a
                out_t[pos] = t
                pos += 1
        t = out_t[lo: lo + m]
        k = np.full(m, wl[0])
        dnum = np.zeros(m)
        pm = np.ones(m)
        pk = t.copy()
        if H >= 1:
            for i in range(m):
                k[i] += wl[1] * pk[i]
                dnum[i] += wl[1] * (pm[i] - t[i] * pk[i])
            for l in range(2, H + 1):
                a1 = c1[l]
                a2 = c2[l]
                w = wl[l]
                wd = l * wl[l]
                for i in range(m):
                    pn = a1 * t[i] * pk[i] - a2 * pm[i]
                    pm[i] = pk[i]
                    pk[i] = pn
                    k[i] += w * pn
                    dnum[i] += wd * (pm[i] - t[i] * pn)
        for i in range(m):
            ti = t[i]
            s2 = 1.0 - ti * ti
            if s2 > 1e-14:
                kp = dnum[i] / s2
            else:
                kp = 0.0
                sgn = 1.0 if ti > 0.0 else -1.0
                flip = sgn
                for l in range(H + 1):
                    kp += wl[l] * flip * 0.5 * l * (l + 1)
                    flip *= sgn
            out_k[lo + i] = k[i] if k[i] > 0.0 else 0.0
            out_kp[lo + i] = kp


@nb.njit(cache=True, inline="always")
def _block_union(a_indptr, a_indices, lo_row, rows, mark, rank_of, j_list):
    """Collect the union of column indices over a block of CSR rows.

    ``mark`` is a reusable map (column -> block serial) so no clearing is
    needed; returns the union size.  Union order is first-touch, iterating
    rows in order, which is deterministic.
    """
    count = 0
    for r in range(rows):
        a = lo_row + r
        for e in range(a_indptr[a], a_indptr[a + 1]):
            j = a_indices[e]
            if mark[j] != lo_row:
                mark[j] = lo_row
                rank_of[j] = count
                j_list[count] = j
                count += 1
    return count


@nb.njit(parallel=True, cache=True, fastmath=True)
def panel_product(a_indptr, a_indices, a_values, row_lo, row_hi,
                  bt_indptr, bt_indices, bt_values, n_cols, n_data, out):
    """Dense row block out[a - row_lo, b] = sum_j A(a, j) B(b, j) via panels.

    Rows are processed in blocks of PANEL; each data column appearing in a
    block is visited once, streaming its B^T row with contiguous PANEL-wide
    fused multiply-adds.  Each output row is owned by one block, so the
    parallel loop is deterministic.
    """
    n_blocks = (row_hi - row_lo + PANEL - 1) // PANEL
    for blk in nb.prange(n_blocks):
        lo = row_lo + blk * PANEL
        rows = min(PANEL, row_hi - lo)
        mark = np.full(n_data, -1, dtype=np.int64)
        rank_of = np.empty(n_data, dtype=np.int64)
        j_list = np.empty(a_indptr[lo + rows] - a_indptr[lo], dtype=np.int64)
        count = _block_union(a_indptr, a_indices, lo, rows, mark, rank_of, j_list)
        apanel = np.zeros((count, PANEL))
        for r in range(rows):
            a = lo + r
            for e in range(a_indptr[a], a_indptr[a + 1]):
                apanel[rank_of[a_indices[e]], r] = a_values[e]
        acc = np.zeros((n_cols, PANEL))
        for c in range(count):
            j = j_list[c]
            ap = apanel[c]
            for f in range(bt_indptr[j], bt_indptr[j + 1]):
                b = bt_indices[f]
                u = bt_values[f]
                row = acc[b]
                for r in range(PANEL):
                    row[r] += u * ap[r]
        for r in range(rows):
            for b in range(n_cols):
                out[lo - row_lo + r, b] = acc[b, r]


@nb.njit(parallel=True, cache=True, fastmath=True)
def panel_gradient(a_indptr, a_indices, a_t, a_kp, row_xyz, col_xyz,
                   bt_indptr, bt_indices, bt_values, n_data,
                   q1, q2, w, n, q_floor, scale, gx, gy, gz):
    """Accumulate one symmetrization term of the gradient aggregates.

    Per row block, builds the residual weight panel Y(a, b) and forms
    Z(a, j) = sum_b Y(a, b) B(b, j) with panel-wide FMAs, then contracts
    Z against the analytic kernel gradient values on the block's entries.
    ``q1``/``q2`` are full symmetric matrices.  Adds into ``gx, gy, gz``;
    callers zero them before the first term.
    """
    n_blocks = (n + PANEL - 1) // PANEL
    for blk in nb.prange(n_blocks):
        lo = blk * PANEL
        rows = min(PANEL, n - lo)
        mark = np.full(n_data, -1, dtype=np.int64)
        rank_of = np.empty(n_data, dtype=np.int64)
        j_list = np.empty(a_indptr[lo + rows] - a_indptr[lo], dtype=np.int64)
        count = _block_union(a_indptr, a_indices, lo, rows, mark, rank_of, j_list)
        if count == 0:
            continue
        ypanel = np.zeros((n, PANEL))
        for r in range(rows):
            a = lo + r
            q1row = q1[a]
            q2row = q2[a]
            for b in range(n):
                v = q2row[b]
                if v > q_floor:
                    ypanel[b, r] = w[b] * (q1row[b] - v) / (2.0 * v)
        z = np.zeros((count, PANEL))
        for c in range(count):
            j = j_list[c]
            zr = z[c]
            for f in range(bt_indptr[j], bt_indptr[j + 1]):
                b = bt_indices[f]
                u = bt_values[f]
                yb = ypanel[b]
                for r in range(PANEL):
                    zr[r] += u * yb[r]
        for r in range(rows):
            a = lo + r
            rx = row_xyz[a, 0]
            ry = row_xyz[a, 1]
            rz = row_xyz[a, 2]
            ax = 0.0
            ay = 0.0
            az = 0.0
            for e in range(a_indptr[a], a_indptr[a + 1]):
                j = a_indices[e]
                zval = z[rank_of[j], r] * a_kp[e] * scale
                t = a_t[e]
                ax += zval * (col_xyz[j, 0] - t * rx)
                ay += zval * (col_xyz[j, 1] - t * ry)
                az += zval * (col_xyz[j, 2] - t * rz)
            gx[a] += ax
            gy[a] += ay
            gz[a] += az


@nb.njit(parallel=True, cache=True, fastmath=True)
def panel_residual_z(a_indptr, a_indices, bt_indptr, bt_indices, bt_values,
                     n_data, q1, q2, w, n, q_floor, z_out):
    """Residual-weighted kernel contraction per pattern entry.

    Writes Z(a, j) = sum_b w_b (q1 - q2)(a, b) / (2 q2(a, b)) B(b, j) for
    every entry (a, j) of the pattern, in the pattern's row-major entry
    order.  Same panel scheme as :func:`panel_gradient`.
    """
    n_blocks = (n + PANEL - 1) // PANEL
    for blk in nb.prange(n_blocks):
        lo = blk * PANEL
        rows = min(PANEL, n - lo)
        mark = np.full(n_data, -1, dtype=np.int64)
        rank_of = np.empty(n_data, dtype=np.int64)
        j_list = np.empty(a_indptr[lo + rows] - a_indptr[lo], dtype=np.int64)
        count = _block_union(a_indptr, a_indices, lo, rows, mark, rank_of, j_list)
        if count == 0:
            continue
        ypanel = np.zeros((n, PANEL))
        for r in range(rows):
            a = lo + r
            q1row = q1[a]
            q2row = q2[a]
            for b in range(n):
                v = q2row[b]
                if v > q_floor:
                    ypanel[b, r] = w[b] * (q1row[b] - v) / (2.0 * v)
        z = np.zeros((count, PANEL))
        for c in range(count):
            j = j_list[c]
            zr = z[c]
            for f in range(bt_indptr[j], bt_indptr[j + 1]):
                b = bt_indices[f]
                u = bt_values[f]
                yb = ypanel[b]
                for r in range(PANEL):
                    zr[r] += u * yb[r]
        for r in range(rows):
            a = lo + r
            for e in range(a_indptr[a], a_indptr[a + 1]):
                z_out[e] = z[rank_of[a_indices[e]], r]


@nb.njit(parallel=True, cache=True)
def data_point_vectors(indptr_t, indices_t, kp_t, z_t, w, row_xyz, out):
    """Per data point, the residual-weighted kernel-gradient pullback.

    out[j] = sum over pattern entries (a, j) of w_a K'(t) Z(a, j) v_a, the
    vector whose dot with a tangent field at the data point gives that
    point's contribution to the energy derivative.
    """
    for j in nb.prange(indptr_t.size - 1):
        ax = 0.0
        ay = 0.0
        az = 0.0
        for e in range(indptr_t[j], indptr_t[j + 1]):
            a = indices_t[e]
            c = w[a] * kp_t[e] * z_t[e]
            ax += c * row_xyz[a, 0]
            ay += c * row_xyz[a, 1]
            az += c * row_xyz[a, 2]
        out[j, 0] = ax
        out[j, 1] = ay
        out[j, 2] = az


@nb.njit(parallel=True, cache=True)
def symmetrize_inplace(x, n):
    """Replace a square matrix by (X + X^T) / 2 without a temporary."""
    n_blocks = (n + 127) // 128
    for bi in nb.prange(n_blocks):
        ai = bi * 128
        for bj in range(bi, n_blocks):
            aj = bj * 128
            for a in range(ai, min(ai + 128, n)):
                b0 = aj if bj > bi else a
                for b in range(b0, min(aj + 128, n)):
                    v = 0.5 * (x[a, b] + x[b, a])
                    x[a, b] = v
                    x[b, a] = v


@nb.njit(parallel=True, cache=True)
def residual_aggregates_full(q1, q2, w, n, s_out, e_out):
    """Row sums s(a) = sum_b w_b r q2 and e(a) = sum_b w_b r^2, full grids."""
    for a in nb.prange(n):
        q1row = q1[a]
        q2row = q2[a]
        s = 0.0
        e = 0.0
        for b in range(n):
            r = q1row[b] - q2row[b]
            s += w[b] * r * q2row[b]
            e += w[b] * r * r
        s_out[a] = s
        e_out[a] = e


@nb.njit(parallel=True, cache=True)
def spgemm_rows_dense(a_indptr, a_indices, a_values, row_lo, row_hi,
                      bt_indptr, bt_indices, bt_values, out, accumulate):
    """Dense row block of A @ B^T for CSR ``A`` and CSR ``B^T``.

    ``out`` has shape (row_hi - row_lo, ncols); rows are independent and
    processed by exactly one thread each.  The inner scatter is unrolled
    four-wide: column indices within a B^T row are unique, so the partial
    updates are independent and can overlap.
    """
    for ii in nb.prange(row_hi - row_lo):
        a = row_lo + ii
        row = out[ii]
        if not accumulate:
            row[:] = 0.0
        for e in range(a_indptr[a], a_indptr[a + 1]):
            j = a_indices[e]
            v = a_values[e]
            f = bt_indptr[j]
            hi = bt_indptr[j + 1]
            while f + 4 <= hi:
                i0 = bt_indices[f]
                i1 = bt_indices[f + 1]
                i2 = bt_indices[f + 2]
                i3 = bt_indices[f + 3]
                row[i0] += v * bt_values[f]
                row[i1] += v * bt_values[f + 1]
                row[i2] += v * bt_values[f + 2]
                row[i3] += v * bt_values[f + 3]
                f += 4
            while f < hi:
                row[bt_indices[f]] += v * bt_values[f]
                f += 1


@nb.njit(parallel=True, cache=True, fastmath=True)
def gradient_gather(q1p, q2p, w, n, q_floor, scale,
                    a_indptr, a_indices, a_t, a_kp, row_xyz, col_xyz,
                    bt_indptr, bt_indices, bt_values,
                    gx, gy, gz):
    """Accumulate one symmetrization term of the density-gradient aggregates.

    For each grid row ``a`` this adds, over pattern entries (a, j),

        scale * grad_x K(v_a, p_j)_c * sum_b Y(a, b) K2(v_b, q_j)

    with Y(a, b) = w_b (q1 - q2)(a, b) / (2 q2(a, b)) floored at q_floor,
    which is exactly sum_b Y(a,b) (A_c @ B^T)(a,b) with the summation order
    exchanged: a gather-reduce instead of scattered dense products.
    """
    for a in nb.prange(n):
        lo = a_indptr[a]
        hi = a_indptr[a + 1]
        if lo == hi:
            gx[a] += 0.0
            continue
        yrow = np.empty(n)
        for b in range(a):
            idx = b * n - (b * (b - 1)) // 2 + (a - b)
            q2 = q2p[idx]
            yrow[b] = w[b] * (q1p[idx] - q2) / (2.0 * q2) if q2 > q_floor else 0.0
        base = a * n - (a * (a - 1)) // 2
        for b in range(a, n):
            q2 = q2p[base + (b - a)]
            yrow[b] = w[b] * (q1p[base + (b - a)] - q2) / (2.0 * q2) if q2 > q_floor else 0.0
        rx = row_xyz[a, 0]
        ry = row_xyz[a, 1]
        rz = row_xyz[a, 2]
        ax = 0.0
        ay = 0.0
        az = 0.0
        for e in range(lo, hi):
            j = a_indices[e]
            acc0 = 0.0
            acc1 = 0.0
            acc2 = 0.0
            acc3 = 0.0
            f = bt_indptr[j]
            fhi = bt_indptr[j + 1]
            while f + 4 <= fhi:
                acc0 += yrow[bt_indices[f]] * bt_values[f]
                acc1 += yrow[bt_indices[f + 1]] * bt_values[f + 1]
                acc2 += yrow[bt_indices[f + 2]] * bt_values[f + 2]
                acc3 += yrow[bt_indices[f + 3]] * bt_values[f + 3]
                f += 4
            while f < fhi:
                acc0 += yrow[bt_indices[f]] * bt_values[f]
                f += 1
            z = ((acc0 + acc1) + (acc2 + acc3)) * a_kp[e] * scale
            t = a_t[e]
            ax += z * (col_xyz[j, 0] - t * rx)
            ay += z * (col_xyz[j, 1] - t * ry)
            az += z * (col_xyz[j, 2] - t * rz)
        gx[a] += ax
        gy[a] += ay
        gz[a] += az


@nb.njit(parallel=True, cache=True)
def pack_symmetric_from_full(x, n, scale, out_packed):
    """Packed storage of scale * (X + X^T) / 2 for a full square matrix."""
    for a in nb.prange(n):
        base = a * n - (a * (a - 1)) // 2
        for b in range(a, n):
            out_packed[base + (b - a)] = scale * 0.5 * (x[a, b] + x[b, a])


@nb.njit(parallel=True, cache=True)
def pack_symmetric_mean(x_rows, y_rows, row_lo, n, scale, out_packed):
    """Store scale * (X(a,b) + Y(a,b)) / 2 at packed (a,b), b >= a, a in block.

    ``X`` rows hold F(a, :) and ``Y`` rows hold F^T(a, :); the mean is the
    symmetrized matrix.
    """
    for ii in nb.prange(x_rows.shape[0]):
        a = row_lo + ii
        base = a * n - (a * (a - 1)) // 2
        for b in range(a, n):
            out_packed[base + (b - a)] = scale * 0.5 * (x_rows[ii, b] + y_rows[ii, b])


@nb.njit(parallel=True, cache=True)
def packed_unpack(packed, n, out):
    for a in nb.prange(n):
        base = a * n - (a * (a - 1)) // 2
        for b in range(a, n):
            v = packed[base + (b - a)]
            out[a, b] = v
            out[b, a] = v


@nb.njit(parallel=True, cache=True)
def packed_weighted_sq_norm(dpacked, w, n):
    """Sum_{a,b} w_a w_b d(a,b)^2 for symmetric d given in packed storage."""
    total = 0.0
    for a in nb.prange(n):
        base = a * n - (a * (a - 1)) // 2
        acc = w[a] * w[a] * dpacked[base] ** 2
        for b in range(a + 1, n):
            acc += 2.0 * w[a] * w[b] * dpacked[base + (b - a)] ** 2
        total += acc
    return total


@nb.njit(parallel=True, cache=True)
def packed_energy(q1p, q2p, w, n):
    """Quadrature of (q1 - q2)^2 over all grid pairs, both packed."""
    total = 0.0
    for a in nb.prange(n):
        base = a * n - (a * (a - 1)) // 2
        d = q1p[base] - q2p[base]
        acc = w[a] * w[a] * d * d
        for b in range(a + 1, n):
            d = q1p[base + (b - a)] - q2p[base + (b - a)]
            acc += 2.0 * w[a] * w[b] * d * d
        total += acc
    return total


@nb.njit(parallel=True, cache=True)
def residual_aggregates_packed(q1p, q2p, w, n, s_out):
    """s(a) = sum_b w_b (q1 - q2)(a,b) q2(a,b) with both grids packed."""
    for a in nb.prange(n):
        acc = 0.0
        for b in range(n):
            idx = tri_index(a, b, n)
            q2 = q2p[idx]
            acc += w[b] * (q1p[idx] - q2) * q2
        s_out[a] = acc


@nb.njit(parallel=True, cache=True)
def grad_aggregates_chunk_packed(q1p, q2p, w, n, row_lo, dfx, dfy, dfz,
                                 scale, q_floor, gx, gy, gz):
    """g_c(a) = sum_b w_b r(a,b) df_c(a,b) scale / (2 q2(a,b)), floored.

    ``df*`` are dense row chunks of the first-argument density gradient;
    entries where q2 <= q_floor contribute nothing (the q-gradient is
    defined as zero there).
    """
    for ii in nb.prange(dfx.shape[0]):
        a = row_lo + ii
        ax = 0.0
        ay = 0.0
        az = 0.0
        for b in range(n):
            idx = tri_index(a, b, n)
            q2 = q2p[idx]
            if q2 > q_floor:
                c = w[b] * (q1p[idx] - q2) * scale / (2.0 * q2)
                ax += c * dfx[ii, b]
                ay += c * dfy[ii, b]
                az += c * dfz[ii, b]
        gx[a] = ax
        gy[a] = ay
        gz[a] = az


@nb.njit(parallel=True, cache=True)
def residual_aggregates_mixed(q1p, q2full, w, n, s_out, e_out):
    """Row sums s(a) and e(a) with q1 packed and q2 as a full matrix."""
    for a in nb.prange(n):
        s = 0.0
        e = 0.0
        for b in range(n):
            q2 = q2full[a, b]
            r = q1p[tri_index(a, b, n)] - q2
            s += w[b] * r * q2
            e += w[b] * r * r
        s_out[a] = s
        e_out[a] = e


@nb.njit(parallel=True, cache=True)
def grad_aggregate_mixed_single(q1p, q2full, w, n, dq_rows, g_out):
    """g(a) = sum_b w_b (q1 - q2)(a,b) dq(a,b) for one gradient component."""
    for a in nb.prange(n):
        acc = 0.0
        q2row = q2full[a]
        dqrow = dq_rows[a]
        for b in range(n):
            acc += w[b] * (q1p[tri_index(a, b, n)] - q2row[b]) * dqrow[b]
        g_out[a] = acc


@nb.njit(parallel=True, cache=True, fastmath=True)
def grid_action_gradient(q1p, q2full, w, n, v, g_indptr, g_indices,
                         gx_vals, gy_vals, gz_vals, g_out, s_out, e_out):
    """Grid-side gradient aggregates in one row pass.

    For every grid row ``a`` this forms the first-argument q-gradient rows
    from the 1-ring difference operator (applied within a's hemisphere
    block) and immediately reduces them against the residual, yielding
    g_c(a), s(a) and the per-row energy e(a).  ``q1p`` is packed symmetric;
    ``q2full`` is the current full grid state.
    """
    for a in nb.prange(n):
        av = a % v
        base_col = a - av
        dx = np.zeros(n)
        dy = np.zeros(n)
        dz = np.zeros(n)
        for e in range(g_indptr[av], g_indptr[av + 1]):
            i = base_col + g_indices[e]
            cx = gx_vals[e]
            cy = gy_vals[e]
            cz = gz_vals[e]
            qrow = q2full[i]
            for b in range(n):
                q = qrow[b]
                dx[b] += cx * q
                dy[b] += cy * q
                dz[b] += cz * q
        q2row = q2full[a]
        ax = 0.0
        ay = 0.0
        az = 0.0
        s = 0.0
        en = 0.0
        base = a * n - (a * (a - 1)) // 2
        for b in range(n):
            if b >= a:
                q1v = q1p[base + (b - a)]
            else:
                q1v = q1p[b * n - (b * (b - 1)) // 2 + (a - b)]
            q2v = q2row[b]
            r = w[b] * (q1v - q2v)
            ax += r * dx[b]
            ay += r * dy[b]
            az += r * dz[b]
            s += r * q2v
            en += r * (q1v - q2v)
        g_out[0, a] = ax
        g_out[1, a] = ay
        g_out[2, a] = az
        s_out[a] = s
        e_out[a] = en


@nb.njit(parallel=True, cache=True, fastmath=True)
def group_action_apply(q_full, n, idx, wgt, roots, out):
    """Jacobian-corrected barycentric resampling of a full grid function.

    out(a, b) = roots_a roots_b sum_{k,l} wgt[a,k] wgt[b,l]
                q(idx[a,k], idx[b,l]) with three support vertices per
    warped position (rows and columns resampled independently).
    """
    for a in nb.prange(n):
        tmp = np.zeros(n)
        for k in range(3):
            ia = idx[a, k]
            va = wgt[a, k]
            qrow = q_full[ia]
            for b in range(n):
                tmp[b] += va * qrow[b]
        ra = roots[a]
        orow = out[a]
        for b in range(n):
            acc = (wgt[b, 0] * tmp[idx[b, 0]]
                   + wgt[b, 1] * tmp[idx[b, 1]]
                   + wgt[b, 2] * tmp[idx[b, 2]])
            orow[b] = ra * roots[b] * acc


@nb.njit(parallel=True, cache=True)
def grad_aggregates_chunk_mixed(q1p, q2full, w, n, row_lo, dqx, dqy, dqz,
                                gx, gy, gz):
    """g_c(a) = sum_b w_b r(a,b) dq_c(a,b) with precomputed q-gradient rows."""
    for ii in nb.prange(dqx.shape[0]):
        a = row_lo + ii
        ax = 0.0
        ay = 0.0
        az = 0.0
        for b in range(n):
            c = w[b] * (q1p[tri_index(a, b, n)] - q2full[a, b])
            ax += c * dqx[ii, b]
            ay += c * dqy[ii, b]
            az += c * dqz[ii, b]
        gx[a] = ax
        gy[a] = ay
        gz[a] = az


@nb.njit(parallel=True, cache=True)
def packed_energy_mixed(q1p, q2full, w, n):
    total = 0.0
    for a in nb.prange(n):
        acc = 0.0
        for b in range(n):
            d = q1p[tri_index(a, b, n)] - q2full[a, b]
            acc += w[a] * w[b] * d * d
        total += acc
    return total
