"""Kernel backend selection.

Two interchangeable implementations of the hot numeric kernels exist:
a compiled Cython extension (`_ckernels`) and a numpy fallback
(`_npkernels`). The compiled one is preferred when importable; the
environment variable LIGHTMOVE_KERNELS ("cy", "py", or "auto") overrides
the choice, and `use_backend` switches at runtime (used by tests and the
benchmark).

Callers must go through the module attributes (`kernels.matmul(...)`)
rather than `from ... import matmul` so backend switches take effect.
"""

import os

from . import _npkernels

try:
    from . import _ckernels
except ImportError:
    _ckernels = None

_FUNCS = (
    "matmul",
    "sigmoid",
    "sigmoid_grad",
    "tanh",
    "tanh_grad",
    "softmax_rows",
    "softmax_rows_grad",
)

BACKEND = None


def available_backends():
    names = ["py"]
    if _ckernels is not None:
        names.insert(0, "cy")
    return names


def use_backend(name):
    """Select the active kernel backend ("cy" or "py")."""
    global BACKEND
    if name == "cy":
        if _ckernels is None:
            raise RuntimeError("compiled kernels requested but the extension is not built")
        impl = _ckernels
    elif name == "py":
        impl = _npkernels
    else:
        raise ValueError(f"unknown kernel backend {name!r}; expected 'cy' or 'py'")
    for fn in _FUNCS:
        globals()[fn] = getattr(impl, fn)
    BACKEND = name
    return name


def _initial_backend():
    requested = os.environ.get("LIGHTMOVE_KERNELS", "auto")
    if requested == "auto":
        return "cy" if _ckernels is not None else "py"
    return requested


use_backend(_initial_backend())
