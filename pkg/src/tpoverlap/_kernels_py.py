"""Pure-Python/numpy versions of the hot kernels.

Every function here has the same signature and produces bit-identical results
to its counterpart in ``_kernels.pyx``.
"""

import heapq

import numpy as np


def tile_mainloop(a, b, row0, row1, col0, col1):
    """Accumulate ``a[row0:row1] @ b[:, col0:col1]`` in ascending-k order."""
    if row0 < 0 or row1 > a.shape[0] or col0 < 0 or col1 > b.shape[1] or row1 < row0 or col1 < col0:
        raise IndexError("tile bounds outside operand shapes")
    if b.shape[0] != a.shape[1]:
        raise ValueError("inner dimensions do not match")
    a_tile = a[row0:row1]
    b_tile = b[:, col0:col1]
    acc = np.zeros((row1 - row0, col1 - col0))
    for kk in range(a_tile.shape[1]):
        acc += np.multiply.outer(a_tile[:, kk], b_tile[kk])
    return acc


def schedule_tiles(release, duration, slots, t0=0.0):
    """In-order dispatch of a tile stream onto ``slots`` identical slots.

    Tile ``i`` is dispatched no earlier than tile ``i-1`` onto the slot that
    frees first, holds it while waiting for ``release[i]`` and then computes
    for ``duration[i]``. Returns ``(dispatch, start, end)`` arrays.
    """
    release = np.asarray(release, dtype=np.float64)
    duration = np.asarray(duration, dtype=np.float64)
    count = release.shape[0]
    dispatch = np.empty(count)
    start = np.empty(count)
    end = np.empty(count)
    heap = [float(t0)] * int(slots)
    last = float(t0)
    for i in range(count):
        free = heapq.heappop(heap)
        d = free if free > last else last
        s = release[i] if release[i] > d else d
        e = s + duration[i]
        dispatch[i] = d
        start[i] = s
        end[i] = e
        last = d
        heapq.heappush(heap, e)
    return dispatch, start, end


def fifo_serve(arrival, service, latency):
    """Single-server FIFO queue; requests are served in the given order.

    Returns ``(start, end)`` where ``end`` includes the fixed ``latency``
    (which does not occupy the server).
    """
    arrival = np.asarray(arrival, dtype=np.float64)
    service = np.asarray(service, dtype=np.float64)
    count = arrival.shape[0]
    start = np.empty(count)
    end = np.empty(count)
    free = -np.inf
    for i in range(count):
        s = arrival[i] if arrival[i] > free else free
        free = s + service[i]
        start[i] = s
        end[i] = free + latency
    return start, end
