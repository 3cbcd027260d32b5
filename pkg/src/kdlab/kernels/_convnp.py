"""Pure-numpy conv2d kernels (im2col), the fallback backend.

All kernels assume stride 1 and square k x k filters. Shapes follow the
B x C x H x W convention used everywhere else in the package.
"""

import numpy as np

BACKEND_NAME = "numpy"


def _out_hw(H, W, k, pad):
    return H + 2 * pad - k + 1, W + 2 * pad - k + 1


def _im2col(x, k, pad):
    B, C, H, W = x.shape
    Ho, Wo = _out_hw(H, W, k, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((B, C, k, k, Ho, Wo), dtype=np.float64)
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xp[:, :, i:i + Ho, j:j + Wo]
    return cols.reshape(B, C * k * k, Ho * Wo)


def _col2im(cols, xshape, k, pad):
    B, C, H, W = xshape
    Ho, Wo = _out_hw(H, W, k, pad)
    cols = cols.reshape(B, C, k, k, Ho, Wo)
    xp = np.zeros((B, C, H + 2 * pad, W + 2 * pad), dtype=np.float64)
    for i in range(k):
        for j in range(k):
            xp[:, :, i:i + Ho, j:j + Wo] += cols[:, :, i, j]
    if pad:
        return xp[:, :, pad:pad + H, pad:pad + W]
    return xp


def conv2d_forward(x, w, pad):
    B, C, H, W = x.shape
    Cout, Cin, k, _ = w.shape
    Ho, Wo = _out_hw(H, W, k, pad)
    cols = _im2col(x, k, pad)
    out = w.reshape(Cout, Cin * k * k) @ cols  # (B, Cout, Ho*Wo) via broadcast
    return np.ascontiguousarray(out.reshape(B, Cout, Ho, Wo))


def conv2d_grad_input(g, w, pad, xshape):
    B = g.shape[0]
    Cout, Cin, k, _ = w.shape
    gmat = g.reshape(B, Cout, -1)
    cols_g = np.matmul(w.reshape(Cout, Cin * k * k).T, gmat)
    return _col2im(cols_g, xshape, k, pad)


def conv2d_grad_kernel(g, x, pad, kshape):
    B = x.shape[0]
    Cout, Cin, k, _ = kshape
    cols = _im2col(x, k, pad)
    gmat = g.reshape(B, Cout, -1)
    gw = np.einsum("bop,bcp->oc", gmat, cols)
    return gw.reshape(Cout, Cin, k, k)
