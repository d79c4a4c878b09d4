"""Deterministic software rasterizer and texture-lookup rendering.

Rendering is split in two: :func:`rasterize` resolves visibility once for a
fixed mesh and camera, after which :func:`render` is a linear map from
texel values to pixel colours (a sparse matrix, see :class:`RenderOperator`).
Only derivatives with respect to the texture are provided.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .meshcore import CameraPose, HeadMesh, Intrinsics

logger = logging.getLogger(__name__)

NEAR_PLANE = 1e-4


@dataclass
class RasterBuffer:
    face_id: np.ndarray  # (H, W) int, -1 where empty
    barycentric: np.ndarray  # (H, W, 3) perspective-correct
    uv: np.ndarray  # (H, W, 2)
    depth: np.ndarray  # (H, W), inf where empty

    @property
    def height(self) -> int:
        return self.face_id.shape[0]

    @property
    def width(self) -> int:
        return self.face_id.shape[1]

    @property
    def coverage(self) -> np.ndarray:
        return self.face_id >= 0

    def dump(self, path) -> None:
        """Covered pixels as tab-separated records (debugging aid)."""
        ys, xs = np.nonzero(self.coverage)
        with open(path, "w") as fh:
            fh.write("x\ty\tface\tb0\tb1\tb2\tu\tv\tdepth\n")
            for y, x in zip(ys.tolist(), xs.tolist()):
                b = self.barycentric[y, x]
                uv = self.uv[y, x]
                fh.write(
                    f"{x}\t{y}\t{self.face_id[y, x]}\t{b[0]!r}\t{b[1]!r}\t{b[2]!r}\t{uv[0]!r}\t{uv[1]!r}\t{self.depth[y, x]!r}\n"
                )


def screen_coordinates(mesh: HeadMesh, pose: CameraPose, intr: Intrinsics):
    """Pixel-space x, y and camera depth of every vertex."""
    P = pose.to_camera(mesh.vertices)
    z = P[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        sx = intr.fx * P[:, 0] / z + intr.cx
        sy = -intr.fy * P[:, 1] / z + intr.cy
    return sx, sy, z


def _edge(ax, ay, bx, by, px, py):
    return (bx - ax) * (py - ay) - (by - ay) * (px - ax)


def triangle_coverage(idx, sx, sy, width, height):
    """Pixels whose centres a screen triangle covers under the top-left rule.

    ``idx`` are the three global vertex indices; edge functions are always
    evaluated with the lower-index endpoint first, so a pixel centre lying
    exactly on an edge shared by two faces sees bitwise-negated values and
    is claimed by exactly one of them.

    Returns ``(ys, xs, b)`` with ``b`` the (M, 3) screen-space barycentrics,
    or ``None`` if the triangle covers nothing.
    """
    i0, i1, i2 = (int(i) for i in idx)
    xs_v = (sx[i0], sx[i1], sx[i2])
    ys_v = (sy[i0], sy[i1], sy[i2])
    x_lo = max(int(np.ceil(min(xs_v) - 0.5)), 0)
    x_hi = min(int(np.floor(max(xs_v) - 0.5)), width - 1)
    y_lo = max(int(np.ceil(min(ys_v) - 0.5)), 0)
    y_hi = min(int(np.floor(max(ys_v) - 0.5)), height - 1)
    if x_lo > x_hi or y_lo > y_hi:
        return None
    px = np.arange(x_lo, x_hi + 1, dtype=np.float64) + 0.5
    py = np.arange(y_lo, y_hi + 1, dtype=np.float64) + 0.5
    PX, PY = np.meshgrid(px, py)

    ws, normals = [], []
    for a, b in ((i1, i2), (i2, i0), (i0, i1)):
        s = 1.0
        if a > b:
            a, b, s = b, a, -1.0
        w = _edge(sx[a], sy[a], sx[b], sy[b], PX, PY)
        ws.append(w if s > 0 else -w)
        normals.append((-s * (sy[b] - sy[a]), s * (sx[b] - sx[a])))
    area2 = _edge(sx[i0], sy[i0], sx[i1], sy[i1], sx[i2], sy[i2])
    if not np.isfinite(area2) or area2 == 0.0:
        return None
    orient = 1.0 if area2 > 0 else -1.0
    inside = np.ones(PX.shape, dtype=bool)
    for w, (nx, ny) in zip(ws, normals):
        nx, ny = orient * nx, orient * ny
        top_left = nx > 0 or (nx == 0 and ny > 0)
        ww = orient * w
        inside &= (ww > 0) | ((ww == 0) & top_left)
    if not inside.any():
        return None
    yy, xx = np.nonzero(inside)
    b = np.stack([w[yy, xx] for w in ws], axis=1) / area2
    return yy + y_lo, xx + x_lo, b


def rasterize(mesh: HeadMesh, pose: CameraPose, intr: Intrinsics, width: int, height: int) -> RasterBuffer:
    sx, sy, z = screen_coordinates(mesh, pose, intr)
    face_id = np.full((height, width), -1, dtype=np.int64)
    depth = np.full((height, width), np.inf)
    bary = np.zeros((height, width, 3))
    faces = mesh.faces
    usable = np.all(z[faces] >= NEAR_PLANE, axis=1)
    for f in np.nonzero(usable)[0]:
        tri = faces[f]
        cov = triangle_coverage(tri, sx, sy, width, height)
        if cov is None:
            continue
        ys, xs, b = cov
        b = np.clip(b, 0.0, 1.0)
        zt = z[tri]
        q = b / zt
        lam = q / q.sum(axis=1, keepdims=True)
        d = lam @ zt
        closer = d < depth[ys, xs]
        if not closer.any():
            continue
        ys, xs = ys[closer], xs[closer]
        depth[ys, xs] = d[closer]
        face_id[ys, xs] = f
        bary[ys, xs] = lam[closer]
    covered = face_id >= 0
    if not covered.any():
        warnings.warn("rasterization covered no pixels", stacklevel=2)
    uv = np.zeros((height, width, 2))
    fc = face_id[covered]
    uv[covered] = np.einsum("pk,pkc->pc", bary[covered], mesh.uvs[faces[fc]])
    return RasterBuffer(face_id, bary, uv, depth)


# ------------------------------------------------------------------ sampling


def bilinear_weights(uv, tex_height: int, tex_width: int):
    """Texel indices and weights for bilinear lookups.

    Texel centres sit at half-integer positions; out-of-range lookups clamp
    to the edge.  Returns flat indices (M, 4) into a row-major
    ``(tex_height, tex_width)`` grid and matching weights (M, 4).
    """
    uv = np.atleast_2d(np.asarray(uv, dtype=np.float64))
    x = uv[:, 0] * tex_width - 0.5
    y = (1.0 - uv[:, 1]) * tex_height - 0.5
    x0 = np.floor(x)
    y0 = np.floor(y)
    ax = x - x0
    ay = y - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    xa = np.clip(x0, 0, tex_width - 1)
    xb = np.clip(x0 + 1, 0, tex_width - 1)
    ya = np.clip(y0, 0, tex_height - 1)
    yb = np.clip(y0 + 1, 0, tex_height - 1)
    idx = np.stack([ya * tex_width + xa, ya * tex_width + xb, yb * tex_width + xa, yb * tex_width + xb], axis=1)
    w = np.stack([(1 - ax) * (1 - ay), ax * (1 - ay), (1 - ax) * ay, ax * ay], axis=1)
    return idx, w


def sample_bilinear(texture: np.ndarray, uv):
    """Colour at one ``uv`` plus the four (texel index, weight) pairs behind it.

    Texel indices are (row, col) pairs.
    """
    h, w = texture.shape[:2]
    idx, wt = bilinear_weights(uv, h, w)
    idx, wt = idx[0], wt[0]
    color = (wt[:, None] * texture.reshape(h * w, -1)[idx]).sum(axis=0)
    rows, cols = np.divmod(idx, w)
    return color, (np.stack([rows, cols], axis=1), wt)


class RenderOperator:
    """Sparse linear map from a (H_t, W_t, 3) texture to covered pixel colours."""

    def __init__(self, buffer: RasterBuffer, tex_height: int, tex_width: int):
        self.buffer = buffer
        self.tex_shape = (tex_height, tex_width)
        self.pixel_rows, self.pixel_cols = np.nonzero(buffer.coverage)
        uv = buffer.uv[self.pixel_rows, self.pixel_cols]
        idx, w = bilinear_weights(uv, tex_height, tex_width)
        n_pix = len(uv)
        rows = np.repeat(np.arange(n_pix), 4)
        mat = sp.coo_matrix((w.ravel(), (rows, idx.ravel())), shape=(n_pix, tex_height * tex_width))
        self.matrix = mat.tocsr()
        self.matrix.sum_duplicates()
        self.matrix_t = self.matrix.T.tocsr()

    @property
    def n_pixels(self) -> int:
        return len(self.pixel_rows)

    def apply(self, texture: np.ndarray) -> np.ndarray:
        """(n_pixels, 3) colours of covered pixels."""
        return self.matrix @ texture.reshape(-1, texture.shape[-1])

    def adjoint(self, pixel_grad: np.ndarray) -> np.ndarray:
        """Pull a (n_pixels, 3) pixel gradient back onto the texture grid."""
        g = self.matrix_t @ pixel_grad
        return g.reshape(*self.tex_shape, pixel_grad.shape[-1])

    def texel_weight(self) -> np.ndarray:
        """Total bilinear weight each texel receives from covered pixels."""
        return np.asarray(self.matrix.sum(axis=0)).reshape(self.tex_shape)

    def to_image(self, colors: np.ndarray, background=0.0) -> np.ndarray:
        img = np.full((self.buffer.height, self.buffer.width, colors.shape[-1]), background, dtype=np.float64)
        img[self.pixel_rows, self.pixel_cols] = colors
        return img


def render(buffer: RasterBuffer, texture: np.ndarray) -> np.ndarray:
    """Unlit textured image; uncovered pixels are black."""
    op = RenderOperator(buffer, texture.shape[0], texture.shape[1])
    return op.to_image(op.apply(texture))
