"""Hot numeric kernels.

Every kernel has a loop implementation (compiled with numba when available)
and a vectorised numpy implementation. The public name binds to one of the
two according to :data:`tumorbed._accel.USE_NUMBA`; both stay importable so
tests and the benchmark can compare them directly.
"""

import numpy as np

from ._accel import jit, select

# ---------------------------------------------------------------------------
# HSV keep-band mask
# ---------------------------------------------------------------------------


def _hsv_band_mask_loops(rgb, bounds):
    h_lo, h_hi, s_lo, v_lo, v_hi = bounds[0], bounds[1], bounds[2], bounds[3], bounds[4]
    rows, cols = rgb.shape[0], rgb.shape[1]
    out = np.zeros((rows, cols), dtype=np.bool_)
    for i in range(rows):
        for j in range(cols):
            r = rgb[i, j, 0] / 255.0
            g = rgb[i, j, 1] / 255.0
            b = rgb[i, j, 2] / 255.0
            hi = max(r, g, b)
            lo = min(r, g, b)
            v = hi
            if not (v_lo < v < v_hi):
                continue
            if hi == lo:
                s = 0.0
                h = 0.0
            else:
                span = hi - lo
                s = span / hi
                rc = (hi - r) / span
                gc = (hi - g) / span
                bc = (hi - b) / span
                if r == hi:
                    h = bc - gc
                elif g == hi:
                    h = 2.0 + rc - bc
                else:
                    h = 4.0 + gc - rc
                h = (h / 6.0) % 1.0
            out[i, j] = (h_lo < h < h_hi) and (s > s_lo)
    return out


def _hsv_planes_numpy(rgb):
    x = rgb.astype(np.float64) / 255.0
    r, g, b = x[..., 0], x[..., 1], x[..., 2]
    hi = x.max(axis=-1)
    lo = x.min(axis=-1)
    span = hi - lo
    chroma = span > 0
    safe_span = np.where(chroma, span, 1.0)
    safe_hi = np.where(hi > 0, hi, 1.0)
    s = np.where(chroma, span / safe_hi, 0.0)
    rc = (hi - r) / safe_span
    gc = (hi - g) / safe_span
    bc = (hi - b) / safe_span
    h = np.where(r == hi, bc - gc, np.where(g == hi, 2.0 + rc - bc, 4.0 + gc - rc))
    h = np.where(chroma, (h / 6.0) % 1.0, 0.0)
    return h, s, hi


def _hsv_band_mask_numpy(rgb, bounds):
    h_lo, h_hi, s_lo, v_lo, v_hi = (float(b) for b in bounds)
    h, s, v = _hsv_planes_numpy(rgb)
    return (h_lo < h) & (h < h_hi) & (s > s_lo) & (v_lo < v) & (v < v_hi)


hsv_band_mask_numba = jit(_hsv_band_mask_loops)
hsv_band_mask = select(hsv_band_mask_numba, _hsv_band_mask_numpy)

# ---------------------------------------------------------------------------
# Heatmap vote accumulation
# ---------------------------------------------------------------------------


def _cell_span(start, side, cell_size, ncells):
    # cells whose centre lies in [start, start + side)
    first = int(np.ceil((start - cell_size / 2.0) / cell_size))
    last = int(np.ceil((start + side - cell_size / 2.0) / cell_size))
    return max(first, 0), min(last, ncells)


def _accumulate_votes_loops(xs, ys, sides, probs, cell_size, vote_sum, vote_count):
    nrows, ncols = vote_sum.shape
    half = cell_size / 2.0
    for t in range(xs.shape[0]):
        c0 = max(int(np.ceil((xs[t] - half) / cell_size)), 0)
        c1 = min(int(np.ceil((xs[t] + sides[t] - half) / cell_size)), ncols)
        r0 = max(int(np.ceil((ys[t] - half) / cell_size)), 0)
        r1 = min(int(np.ceil((ys[t] + sides[t] - half) / cell_size)), nrows)
        p = probs[t]
        for r in range(r0, r1):
            for c in range(c0, c1):
                vote_sum[r, c] += p
                vote_count[r, c] += 1


def _accumulate_votes_numpy(xs, ys, sides, probs, cell_size, vote_sum, vote_count):
    nrows, ncols = vote_sum.shape
    flat_idx = []
    flat_p = []
    for x, y, side, p in zip(xs, ys, sides, probs):
        c0, c1 = _cell_span(x, side, cell_size, ncols)
        r0, r1 = _cell_span(y, side, cell_size, nrows)
        if c1 <= c0 or r1 <= r0:
            continue
        rr, cc = np.meshgrid(np.arange(r0, r1), np.arange(c0, c1), indexing="ij")
        idx = (rr * ncols + cc).ravel()
        flat_idx.append(idx)
        flat_p.append(np.full(idx.size, p, dtype=np.float64))
    if not flat_idx:
        return
    idx = np.concatenate(flat_idx)
    # np.add.at applies addends in order, which keeps sums identical to the loop path
    np.add.at(vote_sum.reshape(-1), idx, np.concatenate(flat_p))
    np.add.at(vote_count.reshape(-1), idx, 1)


accumulate_votes_numba = jit(_accumulate_votes_loops)
accumulate_votes = select(accumulate_votes_numba, _accumulate_votes_numpy)

# ---------------------------------------------------------------------------
# Point in polygon (even-odd crossing rule)
# ---------------------------------------------------------------------------


def _points_in_polygon_loops(px, py, vx, vy):
    n = vx.shape[0]
    out = np.zeros(px.shape[0], dtype=np.bool_)
    for k in range(px.shape[0]):
        x = px[k]
        y = py[k]
        inside = False
        j = n - 1
        for i in range(n):
            yi = vy[i]
            yj = vy[j]
            if (yi > y) != (yj > y):
                xcross = vx[i] + (y - yi) * (vx[j] - vx[i]) / (yj - yi)
                if x < xcross:
                    inside = not inside
            j = i
        out[k] = inside
    return out


def _points_in_polygon_numpy(px, py, vx, vy):
    inside = np.zeros(px.shape[0], dtype=bool)
    n = vx.shape[0]
    j = n - 1
    for i in range(n):
        yi, yj = vy[i], vy[j]
        straddle = (yi > py) != (yj > py)
        if yi != yj:
            xcross = vx[i] + (py - yi) * (vx[j] - vx[i]) / (yj - yi)
            inside ^= straddle & (px < xcross)
        j = i
    return inside


points_in_polygon_numba = jit(_points_in_polygon_loops)
points_in_polygon = select(points_in_polygon_numba, _points_in_polygon_numpy)

# ---------------------------------------------------------------------------
# K-means: nearest-centroid assignment and streaming centre update
# ---------------------------------------------------------------------------


def _assign_nearest_loops(x, centroids):
    n, d = x.shape
    k = centroids.shape[0]
    labels = np.empty(n, dtype=np.int64)
    dist = np.empty(n, dtype=np.float64)
    for i in range(n):
        best = np.inf
        arg = 0
        for c in range(k):
            acc = 0.0
            for f in range(d):
                diff = x[i, f] - centroids[c, f]
                acc += diff * diff
                # partial sums only grow: this centre can no longer win
                if acc >= best:
                    break
            if acc < best:
                best = acc
                arg = c
        labels[i] = arg
        dist[i] = best
    return labels, dist


def _assign_nearest_numpy(x, centroids, chunk=4096):
    n = x.shape[0]
    labels = np.empty(n, dtype=np.int64)
    dist = np.empty(n, dtype=np.float64)
    c_sq = np.einsum("ij,ij->i", centroids, centroids)
    for start in range(0, n, chunk):
        block = x[start:start + chunk]
        d2 = np.einsum("ij,ij->i", block, block)[:, None] - 2.0 * block @ centroids.T + c_sq[None, :]
        np.maximum(d2, 0.0, out=d2)
        arg = np.argmin(d2, axis=1)
        labels[start:start + chunk] = arg
        # the expansion above cancels badly near a centre; redo the winner directly
        diff = block - centroids[arg]
        dist[start:start + chunk] = np.einsum("ij,ij->i", diff, diff)
    return labels, dist


assign_nearest_numba = jit(_assign_nearest_loops)
# BLAS beats the compiled loop here even on one core (see benchmarks/), so
# both backends use the matmul form; the loop stays for parity checks
assign_nearest = _assign_nearest_numpy


def _streaming_update_loops(batch, labels, centroids, counts):
    d = batch.shape[1]
    for i in range(batch.shape[0]):
        c = labels[i]
        counts[c] += 1
        eta = 1.0 / counts[c]
        for f in range(d):
            centroids[c, f] += eta * (batch[i, f] - centroids[c, f])


def _streaming_update_numpy(batch, labels, centroids, counts):
    # closed form of the per-sample 1/count running mean
    k, d = centroids.shape
    added = np.bincount(labels, minlength=k)
    sums = np.zeros((k, d), dtype=np.float64)
    np.add.at(sums, labels, batch)
    hit = added > 0
    new_counts = counts + added
    centroids[hit] = (counts[hit, None] * centroids[hit] + sums[hit]) / new_counts[hit, None]
    counts[:] = new_counts


streaming_update_numba = jit(_streaming_update_loops)
streaming_update = select(streaming_update_numba, _streaming_update_numpy)

# (compiled loops, numpy); the loop entry is plain Python when numba is missing
IMPLEMENTATIONS = {
    "hsv_band_mask": (hsv_band_mask_numba, _hsv_band_mask_numpy),
    "accumulate_votes": (accumulate_votes_numba, _accumulate_votes_numpy),
    "points_in_polygon": (points_in_polygon_numba, _points_in_polygon_numpy),
    "assign_nearest": (assign_nearest_numba, _assign_nearest_numpy),
    "streaming_update": (streaming_update_numba, _streaming_update_numpy),
}
