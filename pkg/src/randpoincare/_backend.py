"""Selection of the return-leg backend.

The compiled core is used when it imports and supports the model; the numpy
implementation in :mod:`randpoincare.sde` is the fallback.  Setting the
environment variable ``RANDPOINCARE_BACKEND=python`` forces the fallback.
"""

import math
import os
from contextlib import contextmanager

try:
    from . import _core
except ImportError:  # extension not built
    _core = None

_state = {"name": "compiled" if _core is not None else "python"}
if os.environ.get("RANDPOINCARE_BACKEND", "").lower() == "python":
    _state["name"] = "python"


def available():
    """Names of the usable backends."""
    return ["compiled", "python"] if _core is not None else ["python"]


def current():
    return _state["name"]


def set_backend(name):
    if name not in available():
        raise ValueError(f"backend {name!r} not available; have {available()}")
    _state["name"] = name


@contextmanager
def use_backend(name):
    old = current()
    set_backend(name)
    try:
        yield
    finally:
        _state["name"] = old


def compiled_for(model):
    """The compiled core if it is active and handles ``model``, else None."""
    if _state["name"] != "compiled" or _core is None:
        return None
    spec = model.spec or {}
    if (spec.get("catalog") in ("radial", "reference")
            and spec.get("secondary_theta", math.pi) == math.pi):
        return _core
    return None
