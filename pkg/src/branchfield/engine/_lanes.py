"""Kernel lane selection: compiled extension when available, numpy fallback.

Set ``BRANCHFIELD_DISABLE_EXTENSION=1`` to force the numpy lane (used by the
benchmark and the lane-equivalence tests).
"""

from __future__ import annotations

import os

from . import _kernel_np

if os.environ.get("BRANCHFIELD_DISABLE_EXTENSION"):
    _kernel = _kernel_np
else:
    try:
        from . import _kernel_cy as _kernel  # type: ignore[no-redef]
    except ImportError:
        _kernel = _kernel_np


def active_lane() -> str:
    return _kernel.LANE


def step_structured(*args, **kwargs):
    return _kernel.step_structured(*args, **kwargs)
