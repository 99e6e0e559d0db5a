"""Kernel backend selection.

Two interchangeable kernel sets exist: the compiled extension
(``seqcomp.kernels._native``, built from ``_native.pyx``) and the numpy
reference (``pyref``). The active backend is chosen once at import:

* ``SEQCOMP_BACKEND=python``  force the numpy fallback
* ``SEQCOMP_BACKEND=native``  require the compiled extension (ImportError
  if it was not built)
* unset / ``auto``            native if available, else python

``benchmarks/bench_kernels.py`` compares the two.
"""

import os

from . import pyref

_requested = os.environ.get("SEQCOMP_BACKEND", "auto").lower()

if _requested not in ("auto", "python", "native"):
    raise ValueError(f"SEQCOMP_BACKEND must be auto|python|native, got {_requested!r}")

if _requested == "python":
    impl = pyref
else:
    try:
        from . import _native as impl  # type: ignore[no-redef]
    except ImportError:
        if _requested == "native":
            raise
        impl = pyref

BACKEND = impl.BACKEND_NAME

gelu_fwd = impl.gelu_fwd
gelu_bwd = impl.gelu_bwd
softmax_fwd = impl.softmax_fwd
softmax_bwd = impl.softmax_bwd
layernorm_fwd = impl.layernorm_fwd
layernorm_bwd = impl.layernorm_bwd


def available_backends():
    names = ["python"]
    try:
        from . import _native  # noqa: F401
        names.append("native")
    except ImportError:
        pass
    return names
