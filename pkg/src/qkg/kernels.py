"""Hot inner loops over triplet arrays.

Every kernel has a numpy implementation and, when numba is importable and not
disabled, an ``@njit`` twin with the same signature and output. Callers use the
module-level names (``csr_from_keys`` etc.), which are bound to whichever
backend ``qkg._accel`` selected. ``implementations(name)`` returns both for
tests and benchmarks.

All entity references here are dense positions (0..n_entities-1), not source
indices; the store translates.
"""

from __future__ import annotations

import numpy as np

from qkg._accel import BACKEND, HAS_NUMBA, JIT_OPTIONS


def _csr_from_keys_numpy(keys, n_bins):
    order = np.argsort(keys, kind="stable").astype(np.int64)
    counts = np.bincount(keys, minlength=n_bins)
    indptr = np.zeros(n_bins + 1, dtype=np.int64)
    np.cumsum(counts, out=indptr[1:])
    return indptr, order


def _endpoint_mask_numpy(heads, tails, member):
    return member[heads] | member[tails]


def _both_endpoints_mask_numpy(heads, tails, member):
    return member[heads] & member[tails] & (heads != tails)


def _incident_ids_numpy(indptr_out, order_out, indptr_in, order_in, pos):
    out_ids = order_out[indptr_out[pos]:indptr_out[pos + 1]]
    in_ids = order_in[indptr_in[pos]:indptr_in[pos + 1]]
    # both slices are sorted (stable sort on ids), union keeps self-loops once
    return np.union1d(out_ids, in_ids).astype(np.int64)


_NUMPY = {
    "csr_from_keys": _csr_from_keys_numpy,
    "endpoint_mask": _endpoint_mask_numpy,
    "both_endpoints_mask": _both_endpoints_mask_numpy,
    "incident_ids": _incident_ids_numpy,
}

_NUMBA: dict = {}

if HAS_NUMBA:
    from numba import njit

    @njit(**JIT_OPTIONS)
    def _csr_from_keys_numba(keys, n_bins):
        n = keys.shape[0]
        indptr = np.zeros(n_bins + 1, dtype=np.int64)
        for i in range(n):
            indptr[keys[i] + 1] += 1
        for b in range(n_bins):
            indptr[b + 1] += indptr[b]
        cursor = indptr[:-1].copy()
        order = np.empty(n, dtype=np.int64)
        for i in range(n):
            k = keys[i]
            order[cursor[k]] = i
            cursor[k] += 1
        return indptr, order

    @njit(**JIT_OPTIONS)
    def _endpoint_mask_numba(heads, tails, member):
        n = heads.shape[0]
        out = np.empty(n, dtype=np.bool_)
        for i in range(n):
            out[i] = member[heads[i]] or member[tails[i]]
        return out

    @njit(**JIT_OPTIONS)
    def _both_endpoints_mask_numba(heads, tails, member):
        n = heads.shape[0]
        out = np.empty(n, dtype=np.bool_)
        for i in range(n):
            h = heads[i]
            t = tails[i]
            out[i] = h != t and member[h] and member[t]
        return out

    @njit(**JIT_OPTIONS)
    def _incident_ids_numba(indptr_out, order_out, indptr_in, order_in, pos):
        a0, a1 = indptr_out[pos], indptr_out[pos + 1]
        b0, b1 = indptr_in[pos], indptr_in[pos + 1]
        out = np.empty((a1 - a0) + (b1 - b0), dtype=np.int64)
        i, j, k = a0, b0, 0
        while i < a1 or j < b1:
            if j >= b1 or (i < a1 and order_out[i] < order_in[j]):
                v = order_out[i]
                i += 1
            elif i >= a1 or order_in[j] < order_out[i]:
                v = order_in[j]
                j += 1
            else:
                v = order_out[i]
                i += 1
                j += 1
            out[k] = v
            k += 1
        return out[:k]

    _NUMBA = {
        "csr_from_keys": _csr_from_keys_numba,
        "endpoint_mask": _endpoint_mask_numba,
        "both_endpoints_mask": _both_endpoints_mask_numba,
        "incident_ids": _incident_ids_numba,
    }


def implementations(name: str) -> dict:
    """Map backend name -> callable for kernel ``name``."""
    impls = {"numpy": _NUMPY[name]}
    if name in _NUMBA:
        impls["numba"] = _NUMBA[name]
    return impls


_ACTIVE = _NUMBA if BACKEND == "numba" else _NUMPY

csr_from_keys = _ACTIVE["csr_from_keys"]
endpoint_mask = _ACTIVE["endpoint_mask"]
both_endpoints_mask = _ACTIVE["both_endpoints_mask"]
incident_ids = _ACTIVE["incident_ids"]
