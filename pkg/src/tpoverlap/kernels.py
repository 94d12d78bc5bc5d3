"""Backend selection for the hot kernels.

The compiled extension is used when it was built; otherwise the numpy
fallback is loaded. Set ``TPOVERLAP_PURE_PYTHON=1`` to force the fallback.
"""

import os

from . import _kernels_py

if os.environ.get("TPOVERLAP_PURE_PYTHON", "") not in ("", "0"):
    _impl = _kernels_py
    BACKEND = "python"
else:
    try:
        from . import _kernels as _impl
        BACKEND = "cython"
    except ImportError:
        _impl = _kernels_py
        BACKEND = "python"

tile_mainloop = _impl.tile_mainloop
schedule_tiles = _impl.schedule_tiles
fifo_serve = _impl.fifo_serve

__all__ = ["BACKEND", "tile_mainloop", "schedule_tiles", "fifo_serve"]
