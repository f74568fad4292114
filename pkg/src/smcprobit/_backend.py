"""Backend selection for the particle kernels.

Numba is used when importable unless ``SMCPROBIT_BACKEND=numpy`` (or the
legacy ``SMCPROBIT_DISABLE_NUMBA=1``) is set in the environment.
"""
import os

try:
    import numba  # noqa: F401

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a hard dependency in CI
    HAVE_NUMBA = False


def requested_backend():
    name = os.environ.get("SMCPROBIT_BACKEND", "").strip().lower()
    if os.environ.get("SMCPROBIT_DISABLE_NUMBA", "") not in ("", "0"):
        name = "numpy"
    if name in ("", "auto"):
        return "numba" if HAVE_NUMBA else "numpy"
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown SMCPROBIT_BACKEND {name!r}")
    if name == "numba" and not HAVE_NUMBA:
        raise ImportError("SMCPROBIT_BACKEND=numba but numba is not installed")
    return name
