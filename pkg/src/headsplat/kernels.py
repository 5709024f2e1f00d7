"""Selects the compositing backend at import time.

The compiled ``_raster_cy`` extension is preferred; the numpy implementation in
``_raster_py`` is used when the extension is missing or when
``HEADSPLAT_BACKEND=python`` is set.
"""
import importlib
import os

from . import _raster_py

_THREADS = 1


def _load(name):
    if name == "python":
        return _raster_py
    if name == "cython":
        return importlib.import_module("headsplat._raster_cy")
    raise ValueError(f"unknown backend {name!r}; expected 'cython' or 'python'")


def available_backends() -> list[str]:
    names = ["python"]
    try:
        _load("cython")
        names.insert(0, "cython")
    except ImportError:
        pass
    return names


_requested = os.environ.get("HEADSPLAT_BACKEND", "").strip().lower()
if _requested:
    active = _load(_requested)
    BACKEND = _requested
else:
    try:
        active = _load("cython")
        BACKEND = "cython"
    except ImportError:
        active = _raster_py
        BACKEND = "python"


def set_backend(name: str) -> None:
    global active, BACKEND
    active = _load(name)
    BACKEND = name


def get_backend(name: str | None = None):
    return active if name is None else _load(name)


def set_threads(n: int) -> None:
    global _THREADS
    if n < 1:
        raise ValueError("thread count must be >= 1")
    _THREADS = int(n)


def get_threads() -> int:
    return _THREADS
