"""seqcomp: budgeted ViT self-supervised pretraining with sequence compression.

Submodules are imported lazily so the CLI can configure thread environment
variables before numpy loads its BLAS.
"""

import importlib

__version__ = "0.1.0"

_SUBMODULES = (
    "graph", "kernels", "vit", "compression", "objectives", "costmodel",
    "analyzer", "schedule", "data", "probes", "training", "checkpoint",
    "svgplot", "config", "rngs", "cli",
)


def __getattr__(name):
    if name in _SUBMODULES:
        return importlib.import_module(f".{name}", __name__)
    raise AttributeError(f"module 'seqcomp' has no attribute '{name}'")


def __dir__():
    return sorted(list(globals()) + list(_SUBMODULES))
