"""Kernel backend selection: compiled extension when built, pure Python otherwise.

Set MEDIALOG_PURE_KERNELS=1 to force the pure backend.
"""

import os

if os.environ.get("MEDIALOG_PURE_KERNELS") == "1":
    from . import _pure as _impl
else:
    try:
        from . import _graph_ext as _impl  # type: ignore[attr-defined]
    except ImportError:
        from . import _pure as _impl

BACKEND = _impl.BACKEND
reachable_within = _impl.reachable_within
match_spans = _impl.match_spans
