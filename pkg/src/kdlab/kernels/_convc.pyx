# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled conv2d kernels: direct-loop cross-correlation, stride 1.

Same contracts as the numpy fallback in _convnp.py; parity is enforced
by tests/test_backends.py.
"""

import numpy as np
cimport numpy as cnp

cnp.import_array()

BACKEND_NAME = "cython"


def conv2d_forward(cnp.float64_t[:, :, :, ::1] x not None,
                   cnp.float64_t[:, :, :, ::1] w not None,
                   int pad):
    cdef Py_ssize_t B = x.shape[0], Cin = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t Cout = w.shape[0], k = w.shape[2]
    cdef Py_ssize_t Ho = H + 2 * pad - k + 1, Wo = W + 2 * pad - k + 1
    out_arr = np.zeros((B, Cout, Ho, Wo), dtype=np.float64)
    cdef cnp.float64_t[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t b, co, ci, oh, ow, i, j, ih, iw
    cdef double acc
    with nogil:
        for b in range(B):
            for co in range(Cout):
                for oh in range(Ho):
                    for ow in range(Wo):
                        acc = 0.0
                        for ci in range(Cin):
                            for i in range(k):
                                ih = oh + i - pad
                                if ih < 0 or ih >= H:
                                    continue
                                for j in range(k):
                                    iw = ow + j - pad
                                    if iw < 0 or iw >= W:
                                        continue
                                    acc += x[b, ci, ih, iw] * w[co, ci, i, j]
                        out[b, co, oh, ow] = acc
    return out_arr


def conv2d_grad_input(cnp.float64_t[:, :, :, ::1] g not None,
                      cnp.float64_t[:, :, :, ::1] w not None,
                      int pad, xshape):
    cdef Py_ssize_t B = xshape[0], Cin = xshape[1], H = xshape[2], W = xshape[3]
    cdef Py_ssize_t Cout = w.shape[0], k = w.shape[2]
    cdef Py_ssize_t Ho = g.shape[2], Wo = g.shape[3]
    gx_arr = np.zeros((B, Cin, H, W), dtype=np.float64)
    cdef cnp.float64_t[:, :, :, ::1] gx = gx_arr
    cdef Py_ssize_t b, co, ci, oh, ow, i, j, ih, iw
    cdef double gv
    with nogil:
        for b in range(B):
            for co in range(Cout):
                for oh in range(Ho):
                    for ow in range(Wo):
                        gv = g[b, co, oh, ow]
                        for ci in range(Cin):
                            for i in range(k):
                                ih = oh + i - pad
                                if ih < 0 or ih >= H:
                                    continue
                                for j in range(k):
                                    iw = ow + j - pad
                                    if iw < 0 or iw >= W:
                                        continue
                                    gx[b, ci, ih, iw] += gv * w[co, ci, i, j]
    return gx_arr


def conv2d_grad_kernel(cnp.float64_t[:, :, :, ::1] g not None,
                       cnp.float64_t[:, :, :, ::1] x not None,
                       int pad, kshape):
    cdef Py_ssize_t B = x.shape[0], Cin = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t Cout = kshape[0], k = kshape[2]
    cdef Py_ssize_t Ho = g.shape[2], Wo = g.shape[3]
    gw_arr = np.zeros((Cout, Cin, k, k), dtype=np.float64)
    cdef cnp.float64_t[:, :, :, ::1] gw = gw_arr
    cdef Py_ssize_t b, co, ci, oh, ow, i, j, ih, iw
    cdef double gv
    with nogil:
        for b in range(B):
            for co in range(Cout):
                for oh in range(Ho):
                    for ow in range(Wo):
                        gv = g[b, co, oh, ow]
                        for ci in range(Cin):
                            for i in range(k):
                                ih = oh + i - pad
                                if ih < 0 or ih >= H:
                                    continue
                                for j in range(k):
                                    iw = ow + j - pad
                                    if iw < 0 or iw >= W:
                                        continue
                                    gw[co, ci, i, j] += gv * x[b, ci, ih, iw]
    return gw_arr
