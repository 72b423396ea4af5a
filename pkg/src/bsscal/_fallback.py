"""Pure numpy implementations of the hot kernels.

These mirror ``_kernels.pyx`` one for one and are used whenever the compiled
module is unavailable (or ``BSSCAL_PURE_PYTHON=1`` is set).
"""
import numpy as np


def main_basis(u, table, n_terms):
    u = np.ascontiguousarray(u, dtype=np.float64)
    out = np.empty((u.shape[0], n_terms))
    if n_terms >= 1:
        out[:, 0] = u - 0.5
    if n_terms >= 2:
        out[:, 1] = u * u - u + 1.0 / 6.0
    if n_terms > 2:
        m = table.shape[0]
        x = u * m - 0.5
        i0 = np.floor(x)
        frac = (x - i0)[:, None]
        i0 = i0.astype(np.int64) % m
        i1 = (i0 + 1) % m
        cols = table[:, : n_terms - 2]
        out[:, 2:] = (1.0 - frac) * cols[i0] + frac * cols[i1]
    return out


def product_columns(E, idx):
    E = np.asarray(E, dtype=np.float64)
    idx = np.asarray(idx, dtype=np.int64)
    out = E[:, idx[:, 0]].copy()
    for v in range(1, idx.shape[1]):
        out *= E[:, idx[:, v]]
    return out


def row_quadform(E, Linv):
    Z = np.asarray(E, dtype=np.float64) @ np.asarray(Linv, dtype=np.float64).T
    return float(np.einsum("ij,ij->", Z, Z))
