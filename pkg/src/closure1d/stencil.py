"""Second-order finite-difference spatial derivatives up to order 3.

Central stencils everywhere on periodic grids. On Dirichlet grids the
boundary-adjacent nodes fall back to second-order one-sided stencils so
node count and data layout stay fixed (no ghost nodes).
"""

from __future__ import annotations

from functools import lru_cache
from math import factorial

import numpy as np

__all__ = ["spatial_derivative", "adjoint_divergence", "MAX_DERIV_ORDER"]

MAX_DERIV_ORDER = 3


@lru_cache(maxsize=None)
def _fd_weights(offsets: tuple, k: int) -> np.ndarray:
    """Finite-difference weights for the k-th derivative on integer offsets
    (unit spacing); divide by h**k at use sites."""
    m = len(offsets)
    a = np.vander(np.array(offsets, dtype=float), m, increasing=True).T
    b = np.zeros(m)
    b[k] = factorial(k)
    return np.linalg.solve(a, b)


# interior central stencils, offsets symmetric around 0
_CENTRAL = {
    1: (np.array([-0.5, 0.0, 0.5]), 1),
    2: (np.array([1.0, -2.0, 1.0]), 1),
    3: (np.array([-0.5, 1.0, 0.0, -1.0, 0.5]), 2),
}

# one-sided/offset stencils used near Dirichlet boundaries:
# (row offset from boundary) -> point offsets relative to that row
_ONESIDED_OFFSETS = {
    1: {0: (0, 1, 2)},
    2: {0: (0, 1, 2, 3)},
    3: {0: (0, 1, 2, 3, 4), 1: (-1, 0, 1, 2, 3)},
}


def spatial_derivative(f: np.ndarray, k: int, grid) -> np.ndarray:
    """k-th spatial derivative of nodal values along the last axis."""
    if k not in (1, 2, 3):
        raise ValueError(f"unsupported derivative order {k}")
    f = np.asarray(f, dtype=float)
    if f.shape[-1] != grid.n_nodes:
        raise ValueError(
            f"field has {f.shape[-1]} nodes, grid has {grid.n_nodes}"
        )
    h = grid.h
    w, half = _CENTRAL[k]
    scale = h**k

    if grid.bc == "periodic":
        out = np.zeros_like(f)
        for c, off in zip(w, range(-half, half + 1)):
            if c != 0.0:
                out += c * np.roll(f, -off, axis=-1)
        return out / scale

    # Dirichlet: central in the interior, one-sided near the edges
    out = np.empty_like(f)
    n = grid.n_nodes
    interior = np.zeros_like(f[..., half : n - half])
    for c, off in zip(w, range(-half, half + 1)):
        if c != 0.0:
            interior += c * f[..., half + off : n - half + off if n - half + off else None]
    out[..., half : n - half] = interior / scale

    for row, offs in _ONESIDED_OFFSETS[k].items():
        wl = _fd_weights(offs, k)
        # left edge
        idx = row
        out[..., idx] = sum(
            c * f[..., idx + o] for c, o in zip(wl, offs)
        ) / scale
        # right edge, mirrored (odd orders flip sign with the mirror)
        ridx = n - 1 - row
        sgn = -1.0 if k % 2 == 1 else 1.0
        out[..., ridx] = sgn * sum(
            c * f[..., ridx - o] for c, o in zip(wl, offs)
        ) / scale
    return out


def adjoint_divergence(v: np.ndarray, k: int, grid) -> np.ndarray:
    """Derivative of a product field appearing in the backward equations.

    Numerically identical to spatial_derivative; the caller forms the
    nodewise product first.
    """
    return spatial_derivative(v, k, grid)
