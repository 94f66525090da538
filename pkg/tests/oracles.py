"""Independent brute-force references shared by the unit and acceptance tests."""

import numpy as np


def prune_oracle(p_map, center, n, t):
    """Sort outside-zone cells by (p, flat index) and take the first min(t, |outside|)."""
    side = p_map.shape[0]
    r = (n - 1) // 2
    u, v = center
    cz, outside = set(), []
    for i in range(side):
        for j in range(side):
            if abs(i - u) <= r and abs(j - v) <= r:
                cz.add((i, j))
            else:
                outside.append((p_map[i, j], i * side + j))
    outside.sort()
    pruned = sorted(idx for _, idx in outside[: min(t, len(outside))])
    return cz, pruned


def box_sum_oracle(p):
    h, w = p.shape
    out = np.zeros_like(p)
    for u in range(h):
        for v in range(w):
            acc = 0.0
            for du in (-1, 0, 1):
                for dv in (-1, 0, 1):
                    if 0 <= u + du < h and 0 <= v + dv < w:
                        acc += p[u + du, v + dv]
            out[u, v] = acc
    return out


def giou_oracle(a, b):
    """GIoU of (cx, cy, w, h) boxes written out from corner coordinates."""
    ax0, ay0, ax1, ay1 = a[0] - a[2] / 2, a[1] - a[3] / 2, a[0] + a[2] / 2, a[1] + a[3] / 2
    bx0, by0, bx1, by1 = b[0] - b[2] / 2, b[1] - b[3] / 2, b[0] + b[2] / 2, b[1] + b[3] / 2
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    union = a[2] * a[3] + b[2] * b[3] - inter
    hull = (max(ax1, bx1) - min(ax0, bx0)) * (max(ay1, by1) - min(ay0, by0))
    return inter / union - (hull - union) / hull


def focal_oracle(prob, heat, alpha=2.0, beta=4.0):
    pos = neg = 0.0
    npos = 0
    for p, y in zip(np.ravel(prob), np.ravel(heat)):
        if y == 1.0:
            pos += (1 - p) ** alpha * np.log(p)
            npos += 1
        else:
            neg += (1 - y) ** beta * p**alpha * np.log(1 - p)
    return -(pos + neg) / max(npos, 1)


def bce_oracle(p, y):
    tot = 0.0
    for pi, yi in zip(np.ravel(p), np.ravel(y)):
        tot += -(yi * np.log(pi) + (1 - yi) * np.log(1 - pi))
    return tot / np.size(p)


def bare_grid(t_side, g_side, d=2, batch=1, seed=0):
    """Random-feature [ZI; ZD; X] grid built without the embedding layer."""
    from desktrack.autodiff import Tensor
    from desktrack.tokens import ZD, ZI, X, TokenGrid, grid_coords

    rng = np.random.default_rng(seed)
    nt, nx = t_side * t_side, g_side * g_side
    group = np.array([ZI] * nt + [ZD] * nt + [X] * nx, dtype=np.int8)
    coord = np.concatenate([grid_coords(t_side)] * 2 + [grid_coords(g_side)])
    n = len(group)
    return TokenGrid(
        Tensor(rng.normal(size=(batch, n, d))),
        group,
        np.broadcast_to(coord, (batch, n, 2)).copy(),
        np.tile(np.arange(n), (batch, 1)),
        np.ones((batch, n), bool),
        g_side,
    )
