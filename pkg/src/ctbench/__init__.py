"""Desk-scale CT reconstruction workbench.

Simulates FBP/MBIR slice pairs from ellipse phantoms, trains a small
2.5D encoder-decoder to map FBP images toward MBIR, and evaluates the
result with PSNR, ROI statistics, line profiles, and noise power
spectra.

Submodules are imported lazily so the command line tool can pin thread
counts through environment variables before numpy ever loads.
"""

import importlib

__version__ = "0.1.0"

_SUBMODULES = (
    "cli",
    "config",
    "core",
    "dataset",
    "evaluate",
    "fbp",
    "mbir",
    "metrics",
    "nnet",
    "phantom",
    "plots",
    "projector",
)


def __getattr__(name):
    if name in _SUBMODULES:
        return importlib.import_module(f".{name}", __name__)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")


def __dir__():
    return sorted(list(globals()) + list(_SUBMODULES))
