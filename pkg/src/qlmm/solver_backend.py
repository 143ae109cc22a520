"""Backend selection for the coordinate-descent kernel.

Prefers the compiled Cython kernel; falls back to the NumPy implementation
when the extension was not built.  Both expose the same
``cd_weighted_lasso`` contract, so everything above this module is
backend-agnostic.  ``benchmarks/bench_kernels.py`` compares the two.
"""

from __future__ import annotations

try:
    from qlmm._cd_backend import cd_weighted_lasso

    BACKEND = "compiled"
except ImportError:  # extension not built; pure-Python install
    from qlmm._cd_python import cd_weighted_lasso

    BACKEND = "python"

__all__ = ["cd_weighted_lasso", "BACKEND", "get_backend"]


def get_backend(name: str | None = None):
    """Return ``(cd_weighted_lasso, backend_name)`` for an explicit choice.

    ``None`` or ``"auto"`` gives the import-time selection; ``"python"`` and
    ``"compiled"`` force a specific kernel (the latter raises if the
    extension is unavailable).
    """
    if name in (None, "auto"):
        return cd_weighted_lasso, BACKEND
    if name == "python":
        from qlmm._cd_python import cd_weighted_lasso as fn

        return fn, "python"
    if name == "compiled":
        from qlmm._cd_backend import cd_weighted_lasso as fn

        return fn, "compiled"
    raise ValueError(f"unknown solver backend {name!r}")
