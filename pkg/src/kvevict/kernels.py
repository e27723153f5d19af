"""Backend selection for the hot kernels.

The compiled extension ``_ckernels`` is used when it has been built;
otherwise the numpy implementations in ``_pykernels`` are loaded. Setting
``KVEVICT_PURE_PYTHON=1`` forces the fallback.
"""

import os

from kvevict import _pykernels

if os.environ.get("KVEVICT_PURE_PYTHON", "") not in ("", "0"):
    _impl = _pykernels
else:
    try:
        from kvevict import _ckernels as _impl
    except ImportError:  # extension not built
        _impl = _pykernels

BACKEND = _impl.BACKEND

maxpool1d = _impl.maxpool1d
enumerate_min_loss = _impl.enumerate_min_loss
enumerate_min_bound = _impl.enumerate_min_bound


def available_backends():
    """Return ``{name: module}`` for every backend importable in this process."""
    found = {"python": _pykernels}
    try:
        from kvevict import _ckernels

        found["cython"] = _ckernels
    except ImportError:
        pass
    return found
