"""Kernel engine selection: compiled extension if built, pure Python otherwise.

``impl`` is the active engine.  Set BESQFLOW_PURE=1 to force the interpreted
fallback; ``load_pure()`` always returns the interpreted module (used by the
benchmark and the engine-equality tests).
"""

import importlib.util
import os

__all__ = ["impl", "COMPILED", "load_pure"]

_SRC = os.path.join(os.path.dirname(__file__), "_impl.py")


def load_pure():
    """Import the uncompiled kernel source under a separate module name."""
    spec = importlib.util.spec_from_file_location("besqflow._kernels._impl_pure", _SRC)
    mod = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(mod)
    return mod


if os.environ.get("BESQFLOW_PURE") == "1":
    impl = load_pure()
else:
    from . import _impl as impl

COMPILED = impl.is_compiled()
