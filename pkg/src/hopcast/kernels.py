"""Hot-loop kernels, compiled when available.

The Cython extension ``hopcast._ckernels`` is used if it imports and
``HOPCAST_PURE_PYTHON`` is unset; otherwise the numpy fallback in
``hopcast._pykernels`` is used. Both expose the same three functions.
"""
import logging
import os

from . import _pykernels as python_backend

logger = logging.getLogger(__name__)

compiled_backend = None
try:
    from . import _ckernels as compiled_backend  # type: ignore[no-redef]
except ImportError:  # pragma: no cover - depends on build environment
    logger.debug("compiled kernels unavailable, using pure-Python fallback")

if compiled_backend is not None and not os.environ.get("HOPCAST_PURE_PYTHON"):
    backend = compiled_backend
    BACKEND_NAME = "cython"
else:
    backend = python_backend
    BACKEND_NAME = "python"

integrate_grid = backend.integrate_grid
eval_rhs_batch = backend.eval_rhs_batch
sample_quantile_stats = backend.sample_quantile_stats
