"""Hot-loop kernels with backend selection at import time.

The compiled Cython kernel is preferred; if the extension is missing
(no compiler at install time) the numpy fallback is used. Both backends
implement the same functions with identical numerics, so everything above
this layer is backend-agnostic. `use_backend` forces a choice, mainly for
parity tests and benchmarks.
"""

from . import _gru_np

try:
    from . import _gru_cy
    DEFAULT_BACKEND = "cython"
except ImportError:
    _gru_cy = None
    DEFAULT_BACKEND = "numpy"

_impls = {"numpy": _gru_np}
if _gru_cy is not None:
    _impls["cython"] = _gru_cy

_active = _impls[DEFAULT_BACKEND]
BACKEND = DEFAULT_BACKEND


def available_backends() -> list[str]:
    return sorted(_impls)


def use_backend(name: str) -> None:
    """Force a kernel backend ("cython" or "numpy")."""
    global _active, BACKEND
    if name not in _impls:
        raise ValueError(f"backend {name!r} not available; have {available_backends()}")
    _active = _impls[name]
    BACKEND = name


def gru_forward(xw, h0, wh_zr, wh_n):
    return _active.gru_forward(xw, h0, wh_zr, wh_n)


def gru_backward(d_final, h_all, zrn, wh_zr, wh_n):
    return _active.gru_backward(d_final, h_all, zrn, wh_zr, wh_n)
