"""Backend selection for the hot loops.

The compiled Cython module is used when it imports; otherwise the numpy
fallback takes over. Set ``DFCN_PURE_PYTHON=1`` to force the fallback.
"""
import logging
import os

from dfcn import _fallback

log = logging.getLogger(__name__)

MODE_SECTOR2D = _fallback.MODE_SECTOR2D
MODE_OCTANT3D = _fallback.MODE_OCTANT3D
MODE_PLAIN = _fallback.MODE_PLAIN

_compiled = None
if os.environ.get("DFCN_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from dfcn import _kernels as _compiled
    except ImportError:  # pragma: no cover - depends on the build
        log.info("compiled kernels unavailable, using numpy fallback")
        _compiled = None

BACKEND = "cython" if _compiled is not None else "numpy"
_impl = _compiled if _compiled is not None else _fallback


def get_backend(name=None):
    """Return the kernel module for ``name`` ("cython", "numpy") or the active one."""
    if name is None:
        return _impl
    if name == "numpy":
        return _fallback
    if name == "cython":
        if _compiled is not None:
            return _compiled
        from dfcn import _kernels  # raises ImportError when the extension is not built

        return _kernels
    raise ValueError(f"unknown backend {name!r}")


def sector_knn(pts, queries, n_dirs, k, radius, mode):
    return _impl.sector_knn(pts, queries, int(n_dirs), int(k), float(radius), int(mode))


def farthest_point_sampling(pts, m, start):
    return _impl.farthest_point_sampling(pts, int(m), int(start))


def knn_brute(src, dst, k):
    return _impl.knn_brute(src, dst, int(k))


def scatter_add_rows(values, index, n_out):
    return _impl.scatter_add_rows(values, index, int(n_out))
