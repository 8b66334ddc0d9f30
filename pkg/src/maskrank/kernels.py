"""Kernel backend selection.

The compiled ``_ckernels`` module is used when it imports; otherwise the
numpy implementation in ``_pykernels``. Set ``MASKRANK_PURE_PYTHON=1`` to
force the fallback.
"""

import os

from . import _pykernels

if os.environ.get("MASKRANK_PURE_PYTHON", "") not in ("", "0"):
    _impl = _pykernels
else:
    try:
        from . import _ckernels as _impl
    except ImportError:
        _impl = _pykernels

BACKEND = _impl.NAME

ranking_rows = _impl.ranking_rows
ranking_full_rows = _impl.ranking_full_rows
npair_rows = _impl.npair_rows
triplet_rows = _impl.triplet_rows
ap_cmc_rows = _impl.ap_cmc_rows


def backends():
    """All importable backends keyed by name (fallback always present)."""
    found = {_pykernels.NAME: _pykernels}
    try:
        from . import _ckernels
    except ImportError:
        pass
    else:
        found[_ckernels.NAME] = _ckernels
    return found
