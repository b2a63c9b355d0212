# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled box kernels; semantics mirror ``_kernels_py`` exactly."""

from libc.math cimport exp, INFINITY

import numpy as np
cimport numpy as cnp

cnp.import_array()

BACKEND = "compiled"

GAUSSIAN = 0
LINEAR = 1


cdef inline double _pair_iou(const double[:, ::1] boxes, const double* areas,
                             Py_ssize_t i, Py_ssize_t j) nogil:
    cdef double ix, iy, inter, union_
    ix = (boxes[i, 2] if boxes[i, 2] < boxes[j, 2] else boxes[j, 2]) \
        - (boxes[i, 0] if boxes[i, 0] > boxes[j, 0] else boxes[j, 0])
    iy = (boxes[i, 3] if boxes[i, 3] < boxes[j, 3] else boxes[j, 3]) \
        - (boxes[i, 1] if boxes[i, 1] > boxes[j, 1] else boxes[j, 1])
    if ix <= 0.0 or iy <= 0.0:
        return 0.0
    inter = ix * iy
    union_ = areas[i] + areas[j] - inter
    if inter <= 0.0 or union_ <= 0.0:
        return 0.0
    return inter / union_


def iou_matrix(a, b):
    """Pairwise IoU of two (n, 4) / (m, 4) corner-form box arrays."""
    cdef cnp.ndarray[cnp.float64_t, ndim=2] aa = np.ascontiguousarray(a, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] bb = np.ascontiguousarray(b, dtype=np.float64)
    cdef Py_ssize_t n = aa.shape[0], m = bb.shape[0], i, j
    cdef cnp.ndarray[cnp.float64_t, ndim=2] out = np.zeros((n, m), dtype=np.float64)
    if n == 0 or m == 0:
        return out
    cdef double[:, ::1] av = aa, bv = bb, ov = out
    cdef double ix, iy, inter, union_, area_i
    for i in range(n):
        area_i = (av[i, 2] - av[i, 0]) * (av[i, 3] - av[i, 1])
        for j in range(m):
            ix = (av[i, 2] if av[i, 2] < bv[j, 2] else bv[j, 2]) \
                - (av[i, 0] if av[i, 0] > bv[j, 0] else bv[j, 0])
            iy = (av[i, 3] if av[i, 3] < bv[j, 3] else bv[j, 3]) \
                - (av[i, 1] if av[i, 1] > bv[j, 1] else bv[j, 1])
            if ix <= 0.0 or iy <= 0.0:
                continue
            inter = ix * iy
            union_ = area_i + (bv[j, 2] - bv[j, 0]) * (bv[j, 3] - bv[j, 1]) - inter
            if inter > 0.0 and union_ > 0.0:
                ov[i, j] = inter / union_
    return out


def soft_nms_kernel(boxes, scores, int method, double sigma, double lin_thresh, double floor):
    """Score-decay suppression; see ``_kernels_py.soft_nms_kernel``."""
    cdef cnp.ndarray[cnp.float64_t, ndim=2] bx = np.ascontiguousarray(boxes, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] sc = np.ascontiguousarray(scores, dtype=np.float64)
    cdef Py_ssize_t n = sc.shape[0], i, j, m, nkept = 0
    cdef cnp.ndarray[cnp.float64_t, ndim=1] cur = sc.copy()
    cdef cnp.ndarray[cnp.float64_t, ndim=1] final = sc.copy()
    cdef cnp.ndarray[cnp.int64_t, ndim=1] parent = np.full(n, -1, dtype=np.int64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] parent_iou = np.zeros(n, dtype=np.float64)
    cdef cnp.ndarray[cnp.int64_t, ndim=1] keep = np.empty(n, dtype=np.int64)
    cdef cnp.ndarray[cnp.uint8_t, ndim=1] alive = np.ones(n, dtype=np.uint8)
    if n == 0:
        return keep[:0], final, parent, parent_iou

    cdef cnp.ndarray[cnp.float64_t, ndim=1] areas_arr = \
        (bx[:, 2] - bx[:, 0]) * (bx[:, 3] - bx[:, 1])
    cdef double[:, ::1] bv = bx
    cdef double[::1] curv = cur, finalv = final, piouv = parent_iou, areasv = areas_arr
    cdef cnp.int64_t[::1] parentv = parent, keepv = keep
    cdef cnp.uint8_t[::1] alivev = alive
    cdef double best, ov, factor
    cdef bint decayed

    while True:
        m = -1
        best = -INFINITY
        for i in range(n):
            if alivev[i] and curv[i] > best:
                best = curv[i]
                m = i
        if m < 0:
            break
        alivev[m] = 0
        finalv[m] = curv[m]
        keepv[nkept] = m
        nkept += 1

        for j in range(n):
            if not alivev[j]:
                continue
            ov = _pair_iou(bv, &areasv[0], m, j)
            decayed = False
            if method == 0:
                if ov > 0.0:
                    factor = exp(-(ov * ov) / sigma)
                    curv[j] *= factor
                    decayed = True
            else:
                if ov > lin_thresh:
                    curv[j] *= (1.0 - ov)
                    decayed = True
            if decayed:
                if ov > piouv[j]:
                    piouv[j] = ov
                    parentv[j] = m
                if curv[j] < floor:
                    alivev[j] = 0
                    finalv[j] = curv[j]

    return keep[:nkept].copy(), final, parent, parent_iou
