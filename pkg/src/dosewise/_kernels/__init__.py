"""Hot-kernel dispatch: compiled extension when available, NumPy fallback.

Set DOSEWISE_KERNEL=numpy|cython to force a backend (default: auto).
"""

import os

import numpy as np

from . import reference

_requested = os.environ.get("DOSEWISE_KERNEL", "auto").lower()
if _requested not in ("auto", "cython", "numpy"):
    raise RuntimeError(f"DOSEWISE_KERNEL must be auto|cython|numpy, got {_requested!r}")

_impl = reference
BACKEND = "numpy"
if _requested in ("auto", "cython"):
    try:
        from . import _core as _compiled

        _impl = _compiled
        BACKEND = "cython"
    except ImportError:
        if _requested == "cython":
            raise
N_PARAMS = 13


def pack_params(model) -> np.ndarray:
    """Flatten a LeukemiaModel's constants into the kernel parameter vector."""
    r = model.rates
    return np.array([
        model.delta, model.epsilon, model.beta,
        r.k_absorb, r.k_elim_plasma, r.k_elim_metab,
        r.k_transit[0], r.k_transit[1], r.k_transit[2], r.k_transit[3],
        r.k_death, r.kappa_vol, model.dose_to_gut,
    ])


def _norm(X, U, D, TH):
    X = np.ascontiguousarray(X, dtype=float)
    K = X.shape[0]
    U = np.ascontiguousarray(np.broadcast_to(np.asarray(U, dtype=float), (K,)))
    if D is None:
        D = np.zeros_like(X)
    else:
        D = np.ascontiguousarray(np.broadcast_to(np.asarray(D, dtype=float), X.shape))
    TH = np.asarray(TH, dtype=float)
    if TH.ndim == 1:
        TH = np.broadcast_to(TH, (K, TH.shape[0]))
    TH = np.ascontiguousarray(TH)
    return X, U, D, TH


def step_batch(X, U, D, TH, params, impl=None):
    """Batched state step: X (K,8) -> (K,8)."""
    X, U, D, TH = _norm(X, U, D, TH)
    return (impl or _impl).step_batch(X, U, D, TH, np.ascontiguousarray(params, dtype=float))


def step_sens_batch(X, XI, U, D, TH, params, impl=None):
    """Batched state + sensitivity step: (K,8), (K,8,8) -> same shapes."""
    X, U, D, TH = _norm(X, U, D, TH)
    XI = np.ascontiguousarray(XI, dtype=float)
    return (impl or _impl).step_sens_batch(X, XI, U, D, TH,
                                           np.ascontiguousarray(params, dtype=float))


def backends() -> dict:
    """Importable implementations, keyed by name (for tests/benchmarks)."""
    out = {"numpy": reference}
    try:
        from . import _core as _compiled

        out["cython"] = _compiled
    except ImportError:
        pass
    return out
