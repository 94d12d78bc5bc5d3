# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels. See ``_kernels_py`` for the reference semantics."""

import numpy as np
cimport numpy as cnp

cnp.import_array()


def tile_mainloop(const double[:, :] a, const double[:, :] b,
                  Py_ssize_t row0, Py_ssize_t row1, Py_ssize_t col0, Py_ssize_t col1):
    cdef Py_ssize_t nr = row1 - row0
    cdef Py_ssize_t nc = col1 - col0
    cdef Py_ssize_t depth = a.shape[1]
    if row0 < 0 or row1 > a.shape[0] or col0 < 0 or col1 > b.shape[1] or nr < 0 or nc < 0:
        raise IndexError("tile bounds outside operand shapes")
    if b.shape[0] != depth:
        raise ValueError("inner dimensions do not match")
    out = np.zeros((nr, nc), dtype=np.float64)
    cdef double[:, ::1] acc = out
    cdef Py_ssize_t i, j, kk
    cdef double aik
    with nogil:
        for kk in range(depth):
            for i in range(nr):
                aik = a[row0 + i, kk]
                for j in range(nc):
                    acc[i, j] = acc[i, j] + aik * b[kk, col0 + j]
    return out


cdef inline void _sift_down(double* heap, Py_ssize_t size, Py_ssize_t pos) noexcept nogil:
    cdef Py_ssize_t child
    cdef double item = heap[pos]
    while True:
        child = 2 * pos + 1
        if child >= size:
            break
        if child + 1 < size and heap[child + 1] < heap[child]:
            child += 1
        if heap[child] >= item:
            break
        heap[pos] = heap[child]
        pos = child
    heap[pos] = item


def schedule_tiles(release, duration, Py_ssize_t slots, double t0=0.0):
    cdef double[::1] rel = np.ascontiguousarray(release, dtype=np.float64)
    cdef double[::1] dur = np.ascontiguousarray(duration, dtype=np.float64)
    cdef Py_ssize_t count = rel.shape[0]
    if dur.shape[0] != count:
        raise ValueError("release and duration lengths differ")
    if slots <= 0:
        raise ValueError("slots must be positive")
    dispatch_arr = np.empty(count)
    start_arr = np.empty(count)
    end_arr = np.empty(count)
    heap_arr = np.full(slots, t0)
    cdef double[::1] dispatch = dispatch_arr
    cdef double[::1] start = start_arr
    cdef double[::1] end = end_arr
    cdef double[::1] heap = heap_arr
    cdef double last = t0
    cdef double d, s
    cdef Py_ssize_t i
    with nogil:
        for i in range(count):
            # root is the earliest free slot; replace it with the new end time
            d = heap[0]
            if last > d:
                d = last
            s = rel[i]
            if d > s:
                s = d
            dispatch[i] = d
            start[i] = s
            end[i] = s + dur[i]
            last = d
            heap[0] = end[i]
            _sift_down(&heap[0], slots, 0)
    return dispatch_arr, start_arr, end_arr


def fifo_serve(arrival, service, double latency):
    cdef double[::1] arr = np.ascontiguousarray(arrival, dtype=np.float64)
    cdef double[::1] svc = np.ascontiguousarray(service, dtype=np.float64)
    cdef Py_ssize_t count = arr.shape[0]
    if svc.shape[0] != count:
        raise ValueError("arrival and service lengths differ")
    start_arr = np.empty(count)
    end_arr = np.empty(count)
    cdef double[::1] start = start_arr
    cdef double[::1] end = end_arr
    cdef double free = -np.inf
    cdef double s
    cdef Py_ssize_t i
    with nogil:
        for i in range(count):
            s = arr[i]
            if free > s:
                s = free
            free = s + svc[i]
            start[i] = s
            end[i] = free + latency
    return start_arr, end_arr
