import os
import warnings


def _env_disabled() -> bool:
    return os.environ.get("POINTNU_DISABLE_NUMBA", "").strip().lower() in ("1", "true", "yes", "on")


USE_NUMBA = not _env_disabled()

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    if USE_NUMBA:
        warnings.warn("numba is not importable; falling back to the numpy kernels", RuntimeWarning)
    USE_NUMBA = False


def njit(*args, **kwargs):
    """``numba.njit`` when available, otherwise the undecorated python function.

    The compiled twins are only dispatched to when ``USE_NUMBA`` is set, but they
    are always defined so the benchmark can compare both paths.
    """
    if numba is None:
        if args and callable(args[0]):
            return args[0]
        return lambda f: f
    kwargs.setdefault("cache", True)
    return numba.njit(*args, **kwargs)
