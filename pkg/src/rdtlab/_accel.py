"""Backend selection for the grid kernels.

The compiled path uses numba; the fallback is plain vectorized numpy.  The
default comes from ``RDTLAB_BACKEND`` (``numba`` or ``numpy``) and can be
switched at runtime with :func:`use_backend`.
"""
import contextlib
import os

BACKEND_ENV = "RDTLAB_BACKEND"
_VALID = ("numba", "numpy")

# TBB is often missing; workqueue is always available and quiet
os.environ.setdefault("NUMBA_THREADING_LAYER", "workqueue")

try:
    import numba as _numba
    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    _numba = None
    HAVE_NUMBA = False


def _initial_backend():
    want = os.environ.get(BACKEND_ENV, "numba").strip().lower() or "numba"
    if want not in _VALID:
        raise ValueError(f"{BACKEND_ENV} must be one of {_VALID}, got {want!r}")
    if want == "numba" and not HAVE_NUMBA:
        return "numpy"
    return want


_current = _initial_backend()


def get_backend():
    return _current


def set_backend(name):
    global _current
    if name not in _VALID:
        raise ValueError(f"unknown backend {name!r}")
    if name == "numba" and not HAVE_NUMBA:
        raise RuntimeError("numba is not importable")
    _current = name


@contextlib.contextmanager
def use_backend(name):
    prev = _current
    set_backend(name)
    try:
        yield
    finally:
        set_backend(prev)


def using_numba():
    return _current == "numba"


def njit(*args, **kwargs):
    """``numba.njit`` when numba is importable, otherwise a no-op decorator."""
    if HAVE_NUMBA:
        return _numba.njit(*args, **kwargs)
    if len(args) == 1 and callable(args[0]) and not kwargs:
        return args[0]
    return lambda f: f


if HAVE_NUMBA:
    prange = _numba.prange
else:  # pragma: no cover
    prange = range
