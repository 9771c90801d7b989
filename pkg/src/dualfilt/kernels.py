"""Backend selection for the hot ensemble-filter kernel.

The compiled extension is preferred when importable; set
DUALFILT_PURE_PYTHON=1 to force the numpy fallback (used by the
benchmark and the backend-agreement tests).
"""

import os

from . import _wonham_np

if os.environ.get("DUALFILT_PURE_PYTHON"):
    wonham_ensemble = _wonham_np.wonham_ensemble
    BACKEND = "numpy"
else:
    try:
        from ._wonham_cy import wonham_ensemble

        BACKEND = "cython"
    except ImportError:
        wonham_ensemble = _wonham_np.wonham_ensemble
        BACKEND = "numpy"
