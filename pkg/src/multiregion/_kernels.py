"""Hot numeric kernels, each in a numba and a pure-numpy flavour.

The public names at the bottom of the module (``iou_matrix``, ``greedy_nms``,
...) point at the numba versions unless ``MULTIREGION_DISABLE_NUMBA`` is set.
Both flavours are importable under their suffixed names so the test-suite can
check them against each other and ``benchmarks/bench_kernels.py`` can time
them side by side.

Conventions shared by all kernels:

* boxes are ``(N, 4)`` float64 arrays of ``x1, y1, x2, y2``;
* cell rectangles are ``(N, 4)`` int64 arrays ``cx0, cy0, cx1, cy1`` with
  exclusive upper bounds;
* feature values are ``(C, H, W)`` float32.
"""

import numpy as np

from ._accel import USE_NUMBA, njit

# ---------------------------------------------------------------------------
# IoU
# ---------------------------------------------------------------------------


@njit
def iou_matrix_numba(a, b):
    n = a.shape[0]
    m = b.shape[0]
    out = np.zeros((n, m), dtype=np.float64)
    for i in range(n):
        ax1 = a[i, 0]
        ay1 = a[i, 1]
        ax2 = a[i, 2]
        ay2 = a[i, 3]
        area_a = (ax2 - ax1) * (ay2 - ay1)
        for j in range(m):
            iw = min(ax2, b[j, 2]) - max(ax1, b[j, 0])
            if iw <= 0.0:
                continue
            ih = min(ay2, b[j, 3]) - max(ay1, b[j, 1])
            if ih <= 0.0:
                continue
            inter = iw * ih
            area_b = (b[j, 2] - b[j, 0]) * (b[j, 3] - b[j, 1])
            out[i, j] = inter / (area_a + area_b - inter)
    return out


def iou_matrix_numpy(a, b):
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.where((iw > 0) & (ih > 0), iw * ih, 0.0)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return inter / union


# ---------------------------------------------------------------------------
# Greedy NMS
# ---------------------------------------------------------------------------


@njit
def greedy_nms_numba(boxes, order, threshold):
    # order: indices sorted by descending score, ties already broken
    n = order.shape[0]
    keep = np.empty(n, dtype=np.int64)
    n_keep = 0
    for oi in range(n):
        i = order[oi]
        x1 = boxes[i, 0]
        y1 = boxes[i, 1]
        x2 = boxes[i, 2]
        y2 = boxes[i, 3]
        area_i = (x2 - x1) * (y2 - y1)
        ok = True
        for k in range(n_keep):
            j = keep[k]
            iw = min(x2, boxes[j, 2]) - max(x1, boxes[j, 0])
            if iw <= 0.0:
                continue
            ih = min(y2, boxes[j, 3]) - max(y1, boxes[j, 1])
            if ih <= 0.0:
                continue
            inter = iw * ih
            area_j = (boxes[j, 2] - boxes[j, 0]) * (boxes[j, 3] - boxes[j, 1])
            if inter / (area_i + area_j - inter) > threshold:
                ok = False
                break
        if ok:
            keep[n_keep] = i
            n_keep += 1
    return keep[:n_keep].copy()


def greedy_nms_numpy(boxes, order, threshold):
    boxes = np.asarray(boxes, dtype=np.float64)
    order = np.asarray(order, dtype=np.int64)
    ious = iou_matrix_numpy(boxes, boxes)
    suppressed = np.zeros(boxes.shape[0], dtype=bool)
    keep = []
    for i in order:
        if suppressed[i]:
            continue
        keep.append(i)
        suppressed |= ious[i] > threshold
    return np.asarray(keep, dtype=np.int64)


# ---------------------------------------------------------------------------
# Adaptive max pooling with optional ring mask
# ---------------------------------------------------------------------------


@njit
def adaptive_max_pool_numba(values, rects, inner, has_inner, grid_h, grid_w):
    n = rects.shape[0]
    c_dim = values.shape[0]
    out = np.zeros((n, c_dim, grid_h, grid_w), dtype=np.float32)
    empty = np.zeros(n, dtype=np.int64)
    for k in range(n):
        cx0 = rects[k, 0]
        cy0 = rects[k, 1]
        cx1 = rects[k, 2]
        cy1 = rects[k, 3]
        rows = cy1 - cy0
        cols = cx1 - cx0
        masked = has_inner[k]
        ix0 = inner[k, 0]
        iy0 = inner[k, 1]
        ix1 = inner[k, 2]
        iy1 = inner[k, 3]
        for bi in range(grid_h):
            r0 = cy0 + (bi * rows) // grid_h
            r1 = cy0 + ((bi + 1) * rows) // grid_h
            for bj in range(grid_w):
                c0 = cx0 + (bj * cols) // grid_w
                c1 = cx0 + ((bj + 1) * cols) // grid_w
                if r1 <= r0 or c1 <= c0:
                    empty[k] += 1
                    continue
                for ch in range(c_dim):
                    best = -np.inf
                    for r in range(r0, r1):
                        yc = r + 0.5
                        row_in = masked and iy0 < yc and yc < iy1
                        for c in range(c0, c1):
                            v = values[ch, r, c]
                            if row_in:
                                xc = c + 0.5
                                if ix0 < xc and xc < ix1:
                                    v = 0.0
                            if v > best:
                                best = v
                    out[k, ch, bi, bj] = best
    return out, empty


def adaptive_max_pool_numpy(values, rects, inner, has_inner, grid_h, grid_w):
    values = np.asarray(values, dtype=np.float32)
    rects = np.asarray(rects, dtype=np.int64).reshape(-1, 4)
    inner = np.asarray(inner, dtype=np.float64).reshape(-1, 4)
    n = rects.shape[0]
    c_dim = values.shape[0]
    out = np.zeros((n, c_dim, grid_h, grid_w), dtype=np.float32)
    empty = np.zeros(n, dtype=np.int64)
    for k in range(n):
        cx0, cy0, cx1, cy1 = (int(v) for v in rects[k])
        patch = values[:, cy0:cy1, cx0:cx1]
        if has_inner[k]:
            yc = np.arange(cy0, cy1) + 0.5
            xc = np.arange(cx0, cx1) + 0.5
            ix0, iy0, ix1, iy1 = inner[k]
            mask = ((yc > iy0) & (yc < iy1))[:, None] & ((xc > ix0) & (xc < ix1))[None, :]
            if mask.any():
                patch = np.where(mask[None], np.float32(0.0), patch)
        rows = cy1 - cy0
        cols = cx1 - cx0
        r_edges = (np.arange(grid_h + 1) * rows) // grid_h
        c_edges = (np.arange(grid_w + 1) * cols) // grid_w
        for bi in range(grid_h):
            r0, r1 = r_edges[bi], r_edges[bi + 1]
            for bj in range(grid_w):
                c0, c1 = c_edges[bj], c_edges[bj + 1]
                if r1 <= r0 or c1 <= c0:
                    empty[k] += 1
                    continue
                out[k, :, bi, bj] = patch[:, r0:r1, c0:c1].max(axis=(1, 2))
    return out, empty


# ---------------------------------------------------------------------------
# Toy feature bank: bilinear resize + 4 fixed channels + stride block means
# ---------------------------------------------------------------------------


@njit
def resize_bilinear_numba(image, out_h, out_w):
    in_h, in_w = image.shape
    out = np.empty((out_h, out_w), dtype=np.float64)
    sy = in_h / out_h
    sx = in_w / out_w
    for r in range(out_h):
        y = (r + 0.5) * sy - 0.5
        if y < 0.0:
            y = 0.0
        if y > in_h - 1:
            y = in_h - 1.0
        y0 = int(np.floor(y))
        y1 = min(y0 + 1, in_h - 1)
        fy = y - y0
        for c in range(out_w):
            x = (c + 0.5) * sx - 0.5
            if x < 0.0:
                x = 0.0
            if x > in_w - 1:
                x = in_w - 1.0
            x0 = int(np.floor(x))
            x1 = min(x0 + 1, in_w - 1)
            fx = x - x0
            # a + (b - a) * t is exact when a == b
            top = image[y0, x0] + (image[y0, x1] - image[y0, x0]) * fx
            bot = image[y1, x0] + (image[y1, x1] - image[y1, x0]) * fx
            out[r, c] = top + (bot - top) * fy
    return out


def _bilinear_axis(n_in, n_out):
    pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    pos = np.clip(pos, 0.0, n_in - 1.0)
    lo = np.floor(pos).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, pos - lo


def resize_bilinear_numpy(image, out_h, out_w):
    image = np.asarray(image, dtype=np.float64)
    in_h, in_w = image.shape
    y0, y1, fy = _bilinear_axis(in_h, out_h)
    x0, x1, fx = _bilinear_axis(in_w, out_w)
    top = image[y0][:, x0] + (image[y0][:, x1] - image[y0][:, x0]) * fx
    bot = image[y1][:, x0] + (image[y1][:, x1] - image[y1][:, x0]) * fx
    return top + (bot - top) * fy[:, None]


@njit
def feature_bank_numba(image, stride):
    h, w = image.shape
    hc = (h + stride - 1) // stride
    wc = (w + stride - 1) // stride
    acc = np.zeros((4, hc, wc), dtype=np.float64)
    cnt = np.zeros((hc, wc), dtype=np.float64)
    for r in range(h):
        rm = max(r - 1, 0)
        rp = min(r + 1, h - 1)
        br = r // stride
        for c in range(w):
            cm = max(c - 1, 0)
            cp = min(c + 1, w - 1)
            v = image[r, c]
            gx = abs(image[r, cp] - image[r, cm]) * 0.5
            gy = abs(image[rp, c] - image[rm, c]) * 0.5
            s = 0.0
            for dr in range(-1, 2):
                rr = min(max(r + dr, 0), h - 1)
                for dc in range(-1, 2):
                    s += image[rr, min(max(c + dc, 0), w - 1)]
            mean = s / 9.0
            var = 0.0
            for dr in range(-1, 2):
                rr = min(max(r + dr, 0), h - 1)
                for dc in range(-1, 2):
                    d = image[rr, min(max(c + dc, 0), w - 1)] - mean
                    var += d * d
            var /= 9.0
            bc = c // stride
            acc[0, br, bc] += v
            acc[1, br, bc] += gx
            acc[2, br, bc] += gy
            acc[3, br, bc] += var
            cnt[br, bc] += 1.0
    out = np.empty((4, hc, wc), dtype=np.float32)
    for ch in range(4):
        for i in range(hc):
            for j in range(wc):
                out[ch, i, j] = acc[ch, i, j] / cnt[i, j]
    return out


def feature_bank_numpy(image, stride):
    image = np.asarray(image, dtype=np.float64)
    h, w = image.shape
    p = np.pad(image, 1, mode="edge")
    gx = np.abs(p[1:-1, 2:] - p[1:-1, :-2]) * 0.5
    gy = np.abs(p[2:, 1:-1] - p[:-2, 1:-1]) * 0.5
    s = np.zeros_like(image)
    for dr in range(3):
        for dc in range(3):
            s += p[dr:dr + h, dc:dc + w]
    mean = s / 9.0
    var = np.zeros_like(image)
    for dr in range(3):
        for dc in range(3):
            d = p[dr:dr + h, dc:dc + w] - mean
            var += d * d
    var /= 9.0
    stack = np.stack([image, gx, gy, var])
    starts_r = np.arange(0, h, stride)
    starts_c = np.arange(0, w, stride)
    sums = np.add.reduceat(np.add.reduceat(stack, starts_r, axis=1), starts_c, axis=2)
    rows = np.diff(np.append(starts_r, h)).astype(np.float64)
    cols = np.diff(np.append(starts_c, w)).astype(np.float64)
    return (sums / (rows[:, None] * cols[None, :])[None]).astype(np.float32)


# ---------------------------------------------------------------------------
# Dual coordinate descent for the L2-regularized hinge-loss linear SVM
# ---------------------------------------------------------------------------


@njit
def _xorshift(state):
    state ^= (state << np.uint64(13)) & np.uint64(0xFFFFFFFFFFFFFFFF)
    state ^= state >> np.uint64(7)
    state ^= (state << np.uint64(17)) & np.uint64(0xFFFFFFFFFFFFFFFF)
    return state


@njit
def _shuffle(order, state):
    # Fisher-Yates driven by xorshift64 so both backends visit samples alike
    for i in range(len(order) - 1, 0, -1):
        state = _xorshift(state)
        j = int(state % np.uint64(i + 1))
        order[i], order[j] = order[j], order[i]
    return state


@njit
def svm_dual_cd_numba(x, y, c_reg, tol, max_epochs, seed=1):
    # x carries the bias column already; returns (w, alpha, epochs, converged)
    n, d = x.shape
    alpha = np.zeros(n, dtype=np.float64)
    w = np.zeros(d, dtype=np.float64)
    qdiag = np.empty(n, dtype=np.float64)
    for i in range(n):
        s = 0.0
        for k in range(d):
            s += x[i, k] * x[i, k]
        qdiag[i] = s
    order = np.arange(n)
    state = np.uint64(seed) | np.uint64(1)
    epochs = 0
    converged = False
    while epochs < max_epochs:
        epochs += 1
        state = _shuffle(order, state)
        pg_max = -np.inf
        pg_min = np.inf
        for ii in range(n):
            i = order[ii]
            if qdiag[i] <= 0.0:
                continue
            dot = 0.0
            for k in range(d):
                dot += w[k] * x[i, k]
            g = y[i] * dot - 1.0
            a = alpha[i]
            if a <= 0.0:
                pg = min(g, 0.0)
            elif a >= c_reg:
                pg = max(g, 0.0)
            else:
                pg = g
            if pg > pg_max:
                pg_max = pg
            if pg < pg_min:
                pg_min = pg
            if pg != 0.0:
                a_new = min(max(a - g / qdiag[i], 0.0), c_reg)
                delta = (a_new - a) * y[i]
                alpha[i] = a_new
                for k in range(d):
                    w[k] += delta * x[i, k]
        if pg_max - pg_min < tol:
            converged = True
            break
    return w, alpha, epochs, converged


_MASK64 = (1 << 64) - 1


def _shuffle_py(order, state):
    for i in range(len(order) - 1, 0, -1):
        state ^= (state << 13) & _MASK64
        state ^= state >> 7
        state ^= (state << 17) & _MASK64
        j = state % (i + 1)
        order[i], order[j] = order[j], order[i]
    return state


def svm_dual_cd_numpy(x, y, c_reg, tol, max_epochs, seed=1):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n, d = x.shape
    alpha = np.zeros(n)
    w = np.zeros(d)
    qdiag = np.einsum("ij,ij->i", x, x)
    order = np.arange(n)
    state = int(seed) | 1
    epochs = 0
    converged = False
    while epochs < max_epochs:
        epochs += 1
        state = _shuffle_py(order, state)
        pg_max, pg_min = -np.inf, np.inf
        for i in order:
            if qdiag[i] <= 0.0:
                continue
            g = y[i] * float(w @ x[i]) - 1.0
            a = alpha[i]
            pg = min(g, 0.0) if a <= 0.0 else (max(g, 0.0) if a >= c_reg else g)
            pg_max = max(pg_max, pg)
            pg_min = min(pg_min, pg)
            if pg != 0.0:
                a_new = min(max(a - g / qdiag[i], 0.0), c_reg)
                w += (a_new - a) * y[i] * x[i]
                alpha[i] = a_new
        if pg_max - pg_min < tol:
            converged = True
            break
    return w, alpha, epochs, converged


# ---------------------------------------------------------------------------
# Dispatch
# ---------------------------------------------------------------------------

if USE_NUMBA:
    iou_matrix = iou_matrix_numba
    greedy_nms = greedy_nms_numba
    adaptive_max_pool = adaptive_max_pool_numba
    resize_bilinear = resize_bilinear_numba
    feature_bank = feature_bank_numba
    svm_dual_cd = svm_dual_cd_numba
else:
    iou_matrix = iou_matrix_numpy
    greedy_nms = greedy_nms_numpy
    adaptive_max_pool = adaptive_max_pool_numpy
    resize_bilinear = resize_bilinear_numpy
    feature_bank = feature_bank_numpy
    svm_dual_cd = svm_dual_cd_numpy

BACKEND = "numba" if USE_NUMBA else "numpy"
