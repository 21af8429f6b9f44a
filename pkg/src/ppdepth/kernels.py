"""Hot-loop backend selection.

The compiled extension ``ppdepth._kernels`` is used when it imports; the
numpy/scipy twin in ``ppdepth._kernels_py`` is the fallback. Setting
``PPD_KERNELS=python`` forces the fallback.
"""
from __future__ import annotations

import importlib
import os
from types import ModuleType

from . import _kernels_py


def _select() -> tuple[ModuleType, str]:
    if os.environ.get("PPD_KERNELS", "").lower() in ("python", "py", "numpy"):
        return _kernels_py, "python"
    try:
        return importlib.import_module("ppdepth._kernels"), "compiled"
    except ImportError:
        return _kernels_py, "python"


_impl, BACKEND = _select()


def backend(name: str | None = None) -> ModuleType:
    """Kernel module by name ('compiled' or 'python'); default is the active one."""
    if name is None:
        return _impl
    if name == "python":
        return _kernels_py
    if name == "compiled":
        return importlib.import_module("ppdepth._kernels")
    raise ValueError(f"unknown kernel backend {name!r}")


def have_compiled() -> bool:
    try:
        importlib.import_module("ppdepth._kernels")
    except ImportError:
        return False
    return True


def __getattr__(name: str):
    return getattr(_impl, name)
