"""Hot-kernel dispatch: compiled Cython core when available, pure NumPy
otherwise.

Selection happens at import time and can be forced with the environment
variable ``LASP_KERNELS`` set to ``compiled`` or ``python`` (default
``auto``). :func:`use` switches backends at runtime, which the parity tests
and the kernel benchmark rely on.
"""

from __future__ import annotations

import os

import numpy as np

from . import _ref

try:
    from . import _core

    HAVE_COMPILED = True
except ImportError:
    _core = None
    HAVE_COMPILED = False


def _select(name: str):
    if name == "python":
        return _ref
    if name == "compiled":
        if not HAVE_COMPILED:
            raise RuntimeError("compiled kernels requested but the extension is not built")
        return _core
    if name == "auto":
        return _core if HAVE_COMPILED else _ref
    raise ValueError(f"unknown kernel backend {name!r}")


_active = _select(os.environ.get("LASP_KERNELS", "auto"))


def backend_name() -> str:
    return "compiled" if _active is _core else "python"


def use(name: str) -> str:
    """Switch the active backend ('auto', 'compiled', 'python'); returns the
    name of the backend now in effect."""
    global _active
    _active = _select(name)
    return backend_name()


def _mat(x, dtype=np.float64) -> np.ndarray:
    return np.ascontiguousarray(x, dtype=dtype)


def similarity_matrix(e, temperature: float) -> np.ndarray:
    return _active.similarity_matrix(_mat(e), float(temperature))


def supcon_loss_grad(e, labels, anchors, temperature: float):
    return _active.supcon_loss_grad(
        _mat(e),
        np.ascontiguousarray(labels, dtype=np.int64),
        np.ascontiguousarray(anchors, dtype=np.uint8),
        float(temperature),
    )


def ird_loss_grad(r_old, e, temperature: float):
    return _active.ird_loss_grad(_mat(r_old), _mat(e), float(temperature))


def mwp_propagate(acts, weights, p_upper) -> np.ndarray:
    return _active.mwp_propagate(_mat(acts), _mat(weights), _mat(p_upper))
