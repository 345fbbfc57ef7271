"""Independent brute-force reference implementations used as oracles.

Everything here is deliberately naive (python loops, direct formula
evaluation) and shares no code with the package under test.
"""

import numpy as np


def naive_conv3d(x, w, b=None, stride=1, padding=0):
    """Direct 7-nested-loop cross-correlation. x: (N,C,D,H,W), w: (K,C,kd,kh,kw)."""
    n, c, d, h, wd = x.shape
    k, _, kd, kh, kw = w.shape
    if padding:
        x = np.pad(x, ((0, 0), (0, 0)) + ((padding, padding),) * 3)
    od = (d + 2 * padding - kd) // stride + 1
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((n, k, od, oh, ow), dtype=np.float64)
    for ni in range(n):
        for ki in range(k):
            for zi in range(od):
                for yi in range(oh):
                    for xi in range(ow):
                        acc = 0.0
                        for ci in range(c):
                            for a in range(kd):
                                for bb in range(kh):
                                    for cc in range(kw):
                                        acc += (x[ni, ci, zi * stride + a,
                                                  yi * stride + bb, xi * stride + cc]
                                                * w[ki, ci, a, bb, cc])
                        out[ni, ki, zi, yi, xi] = acc
            if b is not None:
                out[ni, ki] += b[ki]
    return out


def naive_upsample2x_1d(col):
    """Scalar align-corners-false factor-2 linear interpolation of a 1-D array."""
    m = len(col)
    out = np.zeros(2 * m, dtype=np.float64)
    for j in range(2 * m):
        src = (j + 0.5) / 2.0 - 0.5
        src = min(max(src, 0.0), m - 1.0)
        i0 = int(np.floor(src))
        i1 = min(i0 + 1, m - 1)
        w1 = src - i0
        out[j] = (1.0 - w1) * col[i0] + w1 * col[i1]
    return out


def naive_upsample2x_3d(vol):
    """Separable scalar trilinear factor-2 upsampling of a 3-D array."""
    d, h, w = vol.shape
    out = np.zeros((2 * d, h, w), dtype=np.float64)
    for y in range(h):
        for x in range(w):
            out[:, y, x] = naive_upsample2x_1d(vol[:, y, x])
    out2 = np.zeros((2 * d, 2 * h, w), dtype=np.float64)
    for z in range(2 * d):
        for x in range(w):
            out2[z, :, x] = naive_upsample2x_1d(out[z, :, x])
    out3 = np.zeros((2 * d, 2 * h, 2 * w), dtype=np.float64)
    for z in range(2 * d):
        for y in range(2 * h):
            out3[z, y, :] = naive_upsample2x_1d(out2[z, y, :])
    return out3


def naive_edges(mask):
    """Per-voxel 6-neighbor scan; border neighbors count as outside."""
    nx, ny, nz = mask.shape
    out = np.zeros_like(mask, dtype=bool)
    for x in range(nx):
        for y in range(ny):
            for z in range(nz):
                if not mask[x, y, z]:
                    continue
                edge = False
                for dx, dy, dz in ((1, 0, 0), (-1, 0, 0), (0, 1, 0),
                                   (0, -1, 0), (0, 0, 1), (0, 0, -1)):
                    xx, yy, zz = x + dx, y + dy, z + dz
                    if not (0 <= xx < nx and 0 <= yy < ny and 0 <= zz < nz):
                        edge = True
                        break
                    if not mask[xx, yy, zz]:
                        edge = True
                        break
                out[x, y, z] = edge
    return out


def naive_dice(mask_a, mask_b):
    """Set-count dice with the empty-mask conventions."""
    a = int(mask_a.sum())
    b = int(mask_b.sum())
    if a == 0 and b == 0:
        return 1.0
    if a == 0 or b == 0:
        return 0.0
    inter = int((mask_a & mask_b).sum())
    return 2.0 * inter / (a + b)
