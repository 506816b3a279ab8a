# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled strided kernel loops.

Operands arrive as flat typed base arrays plus element offsets, a shared
shape, and per-operand element strides (0 allowed for broadcast dims). The
innermost dimension runs as a tight strided loop; outer dimensions advance
through an odometer, matching the fallback lane's row-major traversal.
"""

from libc.math cimport exp as c_exp, log as c_log, tanh as c_tanh, sqrt as c_sqrt

import numpy as np

ctypedef fused num_t:
    float
    double
    int
    long long
    unsigned char

DEF MAX_DIMS = 16

# Binary opcodes
DEF OP_ADD = 0
DEF OP_SUB = 1
DEF OP_MUL = 2
DEF OP_DIV = 3
DEF OP_MAX = 4

# Unary opcodes
DEF UOP_NEG = 0
DEF UOP_EXP = 1
DEF UOP_LOG = 2
DEF UOP_TANH = 3
DEF UOP_RELU = 4
DEF UOP_SQRT = 5
DEF UOP_ABS = 6


cdef inline Py_ssize_t _total(long long[::1] shape) nogil:
    cdef Py_ssize_t t = 1
    cdef Py_ssize_t d
    for d in range(shape.shape[0]):
        t *= shape[d]
    return t


def binary_kernel(int op,
                  num_t[::1] o, Py_ssize_t ooff,
                  num_t[::1] a, Py_ssize_t aoff,
                  num_t[::1] b, Py_ssize_t boff,
                  long long[::1] shape,
                  long long[::1] so, long long[::1] sa, long long[::1] sb):
    cdef Py_ssize_t ndim = shape.shape[0]
    cdef Py_ssize_t total = _total(shape)
    cdef Py_ssize_t idx[MAX_DIMS]
    cdef Py_ssize_t i, j, d, outer, inner
    cdef Py_ssize_t so_i = 0, sa_i = 0, sb_i = 0
    cdef Py_ssize_t co, ca, cb
    cdef num_t x, y
    if total == 0:
        return
    if ndim > MAX_DIMS:
        raise ValueError("too many dims for compiled kernel")
    inner = shape[ndim - 1] if ndim else 1
    if ndim:
        so_i, sa_i, sb_i = so[ndim - 1], sa[ndim - 1], sb[ndim - 1]
    outer = total // inner if inner else 0
    for d in range(ndim):
        idx[d] = 0
    with nogil:
        for i in range(outer):
            co = ooff
            ca = aoff
            cb = boff
            if op == OP_ADD:
                for j in range(inner):
                    o[co] = a[ca] + b[cb]
                    co += so_i; ca += sa_i; cb += sb_i
            elif op == OP_SUB:
                for j in range(inner):
                    o[co] = a[ca] - b[cb]
                    co += so_i; ca += sa_i; cb += sb_i
            elif op == OP_MUL:
                for j in range(inner):
                    o[co] = a[ca] * b[cb]
                    co += so_i; ca += sa_i; cb += sb_i
            elif op == OP_DIV:
                for j in range(inner):
                    o[co] = <num_t>(a[ca] / b[cb])
                    co += so_i; ca += sa_i; cb += sb_i
            else:
                for j in range(inner):
                    x = a[ca]; y = b[cb]
                    o[co] = x if x > y else y
                    co += so_i; ca += sa_i; cb += sb_i
            for d in range(ndim - 2, -1, -1):
                idx[d] += 1
                ooff += so[d]; aoff += sa[d]; boff += sb[d]
                if idx[d] < shape[d]:
                    break
                idx[d] = 0
                ooff -= so[d] * shape[d]
                aoff -= sa[d] * shape[d]
                boff -= sb[d] * shape[d]


def unary_kernel(int op,
                 num_t[::1] o, Py_ssize_t ooff,
                 num_t[::1] a, Py_ssize_t aoff,
                 long long[::1] shape,
                 long long[::1] so, long long[::1] sa):
    cdef Py_ssize_t ndim = shape.shape[0]
    cdef Py_ssize_t total = _total(shape)
    cdef Py_ssize_t idx[MAX_DIMS]
    cdef Py_ssize_t i, j, d, outer, inner
    cdef Py_ssize_t so_i = 0, sa_i = 0
    cdef Py_ssize_t co, ca
    cdef num_t x
    if total == 0:
        return
    if ndim > MAX_DIMS:
        raise ValueError("too many dims for compiled kernel")
    inner = shape[ndim - 1] if ndim else 1
    if ndim:
        so_i, sa_i = so[ndim - 1], sa[ndim - 1]
    outer = total // inner if inner else 0
    for d in range(ndim):
        idx[d] = 0
    with nogil:
        for i in range(outer):
            co = ooff
            ca = aoff
            if op == UOP_NEG:
                for j in range(inner):
                    o[co] = <num_t>(-a[ca])
                    co += so_i; ca += sa_i
            elif op == UOP_EXP:
                for j in range(inner):
                    o[co] = <num_t>c_exp(<double>a[ca])
                    co += so_i; ca += sa_i
            elif op == UOP_LOG:
                for j in range(inner):
                    o[co] = <num_t>c_log(<double>a[ca])
                    co += so_i; ca += sa_i
            elif op == UOP_TANH:
                for j in range(inner):
                    o[co] = <num_t>c_tanh(<double>a[ca])
                    co += so_i; ca += sa_i
            elif op == UOP_RELU:
                for j in range(inner):
                    x = a[ca]
                    o[co] = x if x > <num_t>0 else <num_t>0
                    co += so_i; ca += sa_i
            elif op == UOP_SQRT:
                for j in range(inner):
                    o[co] = <num_t>c_sqrt(<double>a[ca])
                    co += so_i; ca += sa_i
            else:
                for j in range(inner):
                    x = a[ca]
                    o[co] = x if x >= <num_t>0 else <num_t>(-x)
                    co += so_i; ca += sa_i
            for d in range(ndim - 2, -1, -1):
                idx[d] += 1
                ooff += so[d]; aoff += sa[d]
                if idx[d] < shape[d]:
                    break
                idx[d] = 0
                ooff -= so[d] * shape[d]
                aoff -= sa[d] * shape[d]


def copy_kernel(num_t[::1] o, Py_ssize_t ooff,
                num_t[::1] a, Py_ssize_t aoff,
                long long[::1] shape,
                long long[::1] so, long long[::1] sa):
    cdef Py_ssize_t ndim = shape.shape[0]
    cdef Py_ssize_t total = _total(shape)
    cdef Py_ssize_t idx[MAX_DIMS]
    cdef Py_ssize_t i, j, d, outer, inner
    cdef Py_ssize_t so_i = 0, sa_i = 0
    cdef Py_ssize_t co, ca
    if total == 0:
        return
    if ndim > MAX_DIMS:
        raise ValueError("too many dims for compiled kernel")
    inner = shape[ndim - 1] if ndim else 1
    if ndim:
        so_i, sa_i = so[ndim - 1], sa[ndim - 1]
    outer = total // inner if inner else 0
    for d in range(ndim):
        idx[d] = 0
    with nogil:
        for i in range(outer):
            co = ooff
            ca = aoff
            for j in range(inner):
                o[co] = a[ca]
                co += so_i; ca += sa_i
            for d in range(ndim - 2, -1, -1):
                idx[d] += 1
                ooff += so[d]; aoff += sa[d]
                if idx[d] < shape[d]:
                    break
                idx[d] = 0
                ooff -= so[d] * shape[d]
                aoff -= sa[d] * shape[d]


def fill_kernel(num_t[::1] o, Py_ssize_t ooff,
                long long[::1] shape, long long[::1] so, num_t value):
    cdef Py_ssize_t ndim = shape.shape[0]
    cdef Py_ssize_t total = _total(shape)
    cdef Py_ssize_t idx[MAX_DIMS]
    cdef Py_ssize_t i, j, d, outer, inner
    cdef Py_ssize_t so_i = 0
    cdef Py_ssize_t co
    if total == 0:
        return
    if ndim > MAX_DIMS:
        raise ValueError("too many dims for compiled kernel")
    inner = shape[ndim - 1] if ndim else 1
    if ndim:
        so_i = so[ndim - 1]
    outer = total // inner if inner else 0
    for d in range(ndim):
        idx[d] = 0
    with nogil:
        for i in range(outer):
            co = ooff
            for j in range(inner):
                o[co] = value
                co += so_i
            for d in range(ndim - 2, -1, -1):
                idx[d] += 1
                ooff += so[d]
                if idx[d] < shape[d]:
                    break
                idx[d] = 0
                ooff -= so[d] * shape[d]


def accumulate_kernel(num_t[::1] o, Py_ssize_t ooff,
                      num_t[::1] a, Py_ssize_t aoff,
                      long long[::1] shape,
                      long long[::1] so, long long[::1] sa):
    """o[...] += a[...] in row-major order (out strides 0 on reduced dims)."""
    cdef Py_ssize_t ndim = shape.shape[0]
    cdef Py_ssize_t total = _total(shape)
    cdef Py_ssize_t idx[MAX_DIMS]
    cdef Py_ssize_t i, j, d, outer, inner
    cdef Py_ssize_t so_i = 0, sa_i = 0
    cdef Py_ssize_t co, ca
    if total == 0:
        return
    if ndim > MAX_DIMS:
        raise ValueError("too many dims for compiled kernel")
    inner = shape[ndim - 1] if ndim else 1
    if ndim:
        so_i, sa_i = so[ndim - 1], sa[ndim - 1]
    outer = total // inner if inner else 0
    for d in range(ndim):
        idx[d] = 0
    with nogil:
        for i in range(outer):
            co = ooff
            ca = aoff
            for j in range(inner):
                o[co] = o[co] + a[ca]
                co += so_i; ca += sa_i
            for d in range(ndim - 2, -1, -1):
                idx[d] += 1
                ooff += so[d]; aoff += sa[d]
                if idx[d] < shape[d]:
                    break
                idx[d] = 0
                ooff -= so[d] * shape[d]
                aoff -= sa[d] * shape[d]


def adam_kernel(num_t[::1] p, Py_ssize_t poff,
                num_t[::1] g, Py_ssize_t goff,
                num_t[::1] m, Py_ssize_t moff,
                num_t[::1] v, Py_ssize_t voff,
                long long[::1] shape,
                long long[::1] sp, long long[::1] sg,
                long long[::1] sm, long long[::1] sv,
                double lr, double beta1, double beta2, double eps,
                double bias1, double bias2):
    cdef Py_ssize_t ndim = shape.shape[0]
    cdef Py_ssize_t total = _total(shape)
    cdef Py_ssize_t idx[MAX_DIMS]
    cdef Py_ssize_t i, j, d, outer, inner
    cdef Py_ssize_t sp_i = 0, sg_i = 0, sm_i = 0, sv_i = 0
    cdef Py_ssize_t cp, cg, cm, cv
    cdef double gi, mi, vi
    if total == 0:
        return
    if ndim > MAX_DIMS:
        raise ValueError("too many dims for compiled kernel")
    inner = shape[ndim - 1] if ndim else 1
    if ndim:
        sp_i, sg_i = sp[ndim - 1], sg[ndim - 1]
        sm_i, sv_i = sm[ndim - 1], sv[ndim - 1]
    outer = total // inner if inner else 0
    for d in range(ndim):
        idx[d] = 0
    with nogil:
        for i in range(outer):
            cp = poff; cg = goff; cm = moff; cv = voff
            for j in range(inner):
                gi = <double>g[cg]
                mi = beta1 * <double>m[cm] + (1.0 - beta1) * gi
                vi = beta2 * <double>v[cv] + (1.0 - beta2) * gi * gi
                m[cm] = <num_t>mi
                v[cv] = <num_t>vi
                p[cp] = <num_t>(<double>p[cp]
                                - lr * (mi / bias1) / (c_sqrt(vi / bias2) + eps))
                cp += sp_i; cg += sg_i; cm += sm_i; cv += sv_i
            for d in range(ndim - 2, -1, -1):
                idx[d] += 1
                poff += sp[d]; goff += sg[d]
                moff += sm[d]; voff += sv[d]
                if idx[d] < shape[d]:
                    break
                idx[d] = 0
                poff -= sp[d] * shape[d]
                goff -= sg[d] * shape[d]
                moff -= sm[d] * shape[d]
                voff -= sv[d] * shape[d]
