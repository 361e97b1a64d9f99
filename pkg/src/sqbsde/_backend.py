"""Kernel backend selection.

Hot numeric kernels ship in two variants: numba-compiled scalar loops and
vectorized pure-numpy equivalents. The environment variable SQBSDE_BACKEND
picks one ("numba" or "numpy"); default is numba when importable, numpy
otherwise. Selection happens once at import.
"""

import os

_flag = os.environ.get("SQBSDE_BACKEND", "").strip().lower()
if _flag not in ("", "numba", "numpy"):
    raise RuntimeError(
        f"SQBSDE_BACKEND={_flag!r} not recognized (use 'numba' or 'numpy')"
    )

if _flag == "numpy":
    HAVE_NUMBA = False
else:
    try:
        import numba  # noqa: F401

        HAVE_NUMBA = True
    except ImportError:
        if _flag == "numba":
            raise RuntimeError("SQBSDE_BACKEND=numba but numba is not installed")
        HAVE_NUMBA = False

BACKEND = "numba" if HAVE_NUMBA else "numpy"


def njit(*args, **kwargs):
    """numba.njit when the numba backend is active, identity otherwise."""
    if HAVE_NUMBA:
        from numba import njit as _njit

        return _njit(*args, **kwargs)
    # identity decorator, used with and without call parentheses
    if len(args) == 1 and callable(args[0]) and not kwargs:
        return args[0]

    def wrap(fn):
        return fn

    return wrap
