"""Pure numpy implementations of the hot kernels.

These mirror ``_kernels.pyx`` function for function and are used when the
compiled extension is unavailable (or ``IMPLICIT3D_PURE_PYTHON=1``).
"""

import numpy as np

from ._mc_tables import EDGE_AXIS, EDGE_ORIGIN, TRI_TABLE


def composite_forward(alpha, colors, background):
    """Front-to-back alpha compositing.

    alpha (R, N), colors (R, N, 3), background (3,).  Returns
    ``(color (R, 3), weights (R, N), trans (R, N), t_rem (R,))`` where
    ``trans[:, i]`` is the transmittance before sample ``i``.
    """
    alpha = np.asarray(alpha, dtype=np.float64)
    colors = np.asarray(colors, dtype=np.float64)
    background = np.asarray(background, dtype=np.float64)
    r, n = alpha.shape
    keep = np.cumprod(1.0 - alpha, axis=1)
    trans = np.empty_like(alpha)
    trans[:, 0] = 1.0
    trans[:, 1:] = keep[:, :-1]
    t_rem = keep[:, -1] if n else np.ones(r)
    weights = trans * alpha
    color = np.einsum("rn,rnc->rc", weights, colors) + t_rem[:, None] * background
    return color, weights, trans, t_rem


def composite_backward(alpha, colors, background, trans, grad_color):
    """Gradients of ``composite_forward``'s color w.r.t. alpha and colors.

    Uses the back-to-front "colour seen behind sample i" recursion so no
    division by ``1 - alpha`` is needed.
    """
    alpha = np.asarray(alpha, dtype=np.float64)
    colors = np.asarray(colors, dtype=np.float64)
    grad_color = np.asarray(grad_color, dtype=np.float64)
    r, n = alpha.shape
    behind = np.broadcast_to(np.asarray(background, dtype=np.float64), (r, 3)).copy()
    grad_alpha = np.empty((r, n))
    for i in range(n - 1, -1, -1):
        a = alpha[:, i : i + 1]
        c = colors[:, i]
        grad_alpha[:, i] = trans[:, i] * np.sum(grad_color * (c - behind), axis=1)
        behind = a * c + (1.0 - a) * behind
    grad_colors = (trans * alpha)[:, :, None] * grad_color[:, None, :]
    return grad_alpha, grad_colors


def sample_pdf(edges, weights, u):
    """Inverse-CDF draws from per-ray piecewise-constant densities.

    edges (R, N+1) increasing, weights (R, N) >= 0, u (R, M) in [0, 1).
    Rays whose weights are all zero sample uniformly.
    """
    edges = np.asarray(edges, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    r, n = w.shape
    total = w.sum(axis=1, keepdims=True)
    w = np.where(total > 0, w, 1.0)
    total = w.sum(axis=1, keepdims=True)
    cdf = np.zeros((r, n + 1))
    cdf[:, 1:] = np.cumsum(w, axis=1) / total
    cdf[:, -1] = 1.0
    # offset each ray so one flat searchsorted covers the batch
    offset = 2.0 * np.arange(r)[:, None]
    flat = (cdf + offset).ravel()
    pos = np.searchsorted(flat, (u + offset).ravel(), side="right").reshape(u.shape)
    k = pos - 1 - (n + 1) * np.arange(r)[:, None]
    k = np.clip(k, 0, n - 1)
    rows = np.arange(r)[:, None]
    c0 = cdf[rows, k]
    mass = w[rows, k] / total
    frac = np.where(mass > 0, (u - c0) / np.where(mass > 0, mass, 1.0), 0.0)
    frac = np.clip(frac, 0.0, 1.0)
    lo = edges[rows, k]
    hi = edges[rows, k + 1]
    return lo + frac * (hi - lo)


def marching_cubes(values, iso):
    """Triangulate the ``iso`` level set of a 3D lattice.

    Returns vertices in lattice-index coordinates (V, 3) and faces (F, 3).
    Vertices are numbered by global edge id; faces follow cell order.
    """
    v = np.asarray(values, dtype=np.float64)
    nx, ny, nz = v.shape
    below = v < iso
    cube = (
        below[:-1, :-1, :-1].astype(np.int64)
        | below[1:, :-1, :-1] << 1
        | below[1:, 1:, :-1] << 2
        | below[:-1, 1:, :-1] << 3
        | below[:-1, :-1, 1:] << 4
        | below[1:, :-1, 1:] << 5
        | below[1:, 1:, 1:] << 6
        | below[:-1, 1:, 1:] << 7
    )
    cells = np.flatnonzero((cube != 0) & (cube != 255))
    if cells.size == 0:
        return np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64)
    ci, cj, ck = np.unravel_index(cells, cube.shape)
    rows = TRI_TABLE[cube.ravel()[cells]].astype(np.int64)  # (C, 16)
    valid = rows >= 0
    cell_of = np.broadcast_to(np.arange(cells.size)[:, None], rows.shape)[valid]
    edge = rows[valid]
    o = EDGE_ORIGIN[edge]
    pi = ci[cell_of] + o[:, 0]
    pj = cj[cell_of] + o[:, 1]
    pk = ck[cell_of] + o[:, 2]
    gid = ((pi * ny + pj) * nz + pk) * 3 + EDGE_AXIS[edge]

    uniq, inverse = np.unique(gid, return_inverse=True)
    axis = uniq % 3
    base = uniq // 3
    a_k = base % nz
    a_j = (base // nz) % ny
    a_i = base // (nz * ny)
    start = np.stack([a_i, a_j, a_k], axis=1)
    end = start.copy()
    end[np.arange(len(uniq)), axis] += 1
    va = v[start[:, 0], start[:, 1], start[:, 2]]
    vb = v[end[:, 0], end[:, 1], end[:, 2]]
    denom = vb - va
    t = np.where(denom != 0, (iso - va) / np.where(denom != 0, denom, 1.0), 0.5)
    verts = start + t[:, None] * (end - start)
    faces = inverse.reshape(-1, 3).astype(np.int64)
    return verts, faces
