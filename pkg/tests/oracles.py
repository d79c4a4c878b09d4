"""Slow, direct reference implementations used as test oracles."""

import numpy as np
import scipy.sparse as sp

from avatarfit.raster import NEAR_PLANE, screen_coordinates


def brute_force_raster(mesh, pose, intr, width, height, chunk=256):
    """Per-pixel loop over all faces: closed point-in-triangle plus nearest depth.

    Returns ``(covered, face_id, margin)``; ``margin`` is the depth gap to the
    runner-up face (inf when only one face covers the pixel).
    """
    sx, sy, z = screen_coordinates(mesh, pose, intr)
    faces = mesh.faces[np.all(z[mesh.faces] >= NEAR_PLANE, axis=1)]
    ids = np.nonzero(np.all(z[mesh.faces] >= NEAR_PLANE, axis=1))[0]
    ax, ay = sx[faces[:, 0]], sy[faces[:, 0]]
    bx, by = sx[faces[:, 1]], sy[faces[:, 1]]
    cx, cy = sx[faces[:, 2]], sy[faces[:, 2]]
    area = (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)
    keep = area != 0
    px, py = np.meshgrid(np.arange(width) + 0.5, np.arange(height) + 0.5)
    px, py = px.ravel(), py.ravel()
    best = np.full(px.shape, np.inf)
    second = np.full(px.shape, np.inf)
    face_id = np.full(px.shape, -1)
    for s in range(0, len(px), chunk):
        X, Y = px[s : s + chunk, None], py[s : s + chunk, None]
        w0 = (cx - bx) * (Y - by) - (cy - by) * (X - bx)
        w1 = (ax - cx) * (Y - cy) - (ay - cy) * (X - cx)
        w2 = (bx - ax) * (Y - ay) - (by - ay) * (X - ax)
        inside = keep & (((w0 >= 0) & (w1 >= 0) & (w2 >= 0)) | ((w0 <= 0) & (w1 <= 0) & (w2 <= 0)))
        b = np.stack([w0, w1, w2], axis=-1) / area[:, None]
        inv = (b / z[faces]).sum(axis=-1)
        d = np.where(inside, 1.0 / np.where(inside, inv, 1.0), np.inf)
        order = np.argsort(d, axis=1, kind="stable")
        rows = np.arange(len(X))
        first = d[rows, order[:, 0]]
        best[s : s + chunk] = first
        second[s : s + chunk] = d[rows, order[:, 1]] if d.shape[1] > 1 else np.inf
        face_id[s : s + chunk] = np.where(np.isfinite(first), ids[order[:, 0]], -1)
    covered = np.isfinite(best).reshape(height, width)
    with np.errstate(invalid="ignore"):
        margin = np.where(np.isinf(second), np.inf, second - best)
    return covered, face_id.reshape(height, width), margin.reshape(height, width)


def dense_poisson(source, target, mask):
    """Direct dense solve of the masked 5-point Poisson system, channel by channel."""
    ys, xs = np.nonzero(mask)
    n = len(ys)
    index = -np.ones(mask.shape, dtype=int)
    index[ys, xs] = np.arange(n)
    A = np.zeros((n, n))
    out = np.array(target, dtype=np.float64, copy=True)
    src = source[..., None] if source.ndim == 2 else source
    tgt = target[..., None] if target.ndim == 2 else target
    res = out[..., None] if out.ndim == 2 else out
    for k, (y, x) in enumerate(zip(ys, xs)):
        A[k, k] = 4.0
        for dy, dx in ((-1, 0), (1, 0), (0, -1), (0, 1)):
            j = index[y + dy, x + dx]
            if j >= 0:
                A[k, j] = -1.0
    for c in range(src.shape[2]):
        b = np.zeros(n)
        for k, (y, x) in enumerate(zip(ys, xs)):
            for dy, dx in ((-1, 0), (1, 0), (0, -1), (0, 1)):
                b[k] += src[y, x, c] - src[y + dy, x + dx, c]
                if index[y + dy, x + dx] < 0:
                    b[k] += tgt[y + dy, x + dx, c]
        res[ys, xs, c] = np.linalg.solve(A, b)
    return out


def dense_render_matrix(buffer, tex_h, tex_w):
    """Render map as a dense matrix, built one texel basis image at a time."""
    from avatarfit.raster import render

    cov = buffer.coverage
    cols = []
    for t in range(tex_h * tex_w):
        e = np.zeros((tex_h * tex_w, 1))
        e[t] = 1.0
        cols.append(render(buffer, e.reshape(tex_h, tex_w, 1))[cov][:, 0])
    return sp.csr_matrix(np.stack(cols, axis=1)).toarray()
