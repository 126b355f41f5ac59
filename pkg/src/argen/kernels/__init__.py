"""Hot kernels with a compiled backend and a numpy fallback.

The compiled module is used when it imports cleanly; set
``ARGEN_PURE_PYTHON=1`` to force the fallback.
"""
import os

from . import _pykernels

_compiled = None
if os.environ.get("ARGEN_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _compiled
    except ImportError:  # extension not built
        _compiled = None

_impl = _compiled if _compiled is not None else _pykernels
BACKEND = "compiled" if _compiled is not None else "python"

lstm_gates_forward = _impl.lstm_gates_forward
lstm_gates_backward = _impl.lstm_gates_backward
accumulate_scores = _impl.accumulate_scores


def available_backends():
    """Map backend name to module, for tests and benchmarks."""
    out = {"python": _pykernels}
    if _compiled is not None:
        out["compiled"] = _compiled
    else:
        try:
            from . import _ckernels
        except ImportError:
            pass
        else:
            out["compiled"] = _ckernels
    return out
