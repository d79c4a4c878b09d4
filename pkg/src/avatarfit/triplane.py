"""Mesh <-> UV-space position image conversion and its regularizers.

A triplane here is an R x R x 3 image whose channels hold the X, Y and Z
coordinates of the vertex stored at each texel.  Vertex ``k`` lives at
``values[row_k, col_k]`` with ``col = round(u * (R - 1))`` and
``row = round((1 - v) * (R - 1))``.
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .meshcore import HeadMesh

logger = logging.getLogger(__name__)

DEFAULT_RESOLUTION = 256


class TexelCollisionError(ValueError):
    pass


@dataclass
class TriplaneMap:
    values: np.ndarray  # (R, R, 3)
    valid_mask: np.ndarray  # (R, R) bool
    rows: np.ndarray  # (N,) texel row of each vertex
    cols: np.ndarray  # (N,) texel column of each vertex

    @property
    def resolution(self) -> int:
        return self.values.shape[0]

    def texel_to_vertex(self) -> np.ndarray:
        """(R, R) int map, -1 on invalid texels."""
        out = np.full(self.valid_mask.shape, -1, dtype=np.int64)
        out[self.rows, self.cols] = np.arange(len(self.rows))
        return out

    def vertex_positions(self) -> np.ndarray:
        return self.values[self.rows, self.cols]

    def copy_with(self, values: np.ndarray) -> "TriplaneMap":
        values = np.where(self.valid_mask[..., None], values, 0.0)
        return TriplaneMap(values, self.valid_mask, self.rows, self.cols)

    def save(self, path) -> None:
        """Float image as ``.npy`` plus a JSON sidecar with the texel map."""
        path = Path(path)
        np.save(path.with_suffix(".npy"), self.values.astype(np.float32))
        side = {"resolution": self.resolution, "rows": self.rows.tolist(), "cols": self.cols.tolist()}
        path.with_suffix(".json").write_text(json.dumps(side))


def texel_indices(uvs: np.ndarray, resolution: int) -> tuple[np.ndarray, np.ndarray]:
    uvs = np.asarray(uvs, dtype=np.float64)
    cols = np.rint(uvs[:, 0] * (resolution - 1)).astype(np.int64)
    rows = np.rint((1.0 - uvs[:, 1]) * (resolution - 1)).astype(np.int64)
    return rows, cols


def min_collision_free_resolution(uvs: np.ndarray, start: int = 2, limit: int = 1 << 14) -> int:
    res = max(start, 2)
    while res <= limit:
        rows, cols = texel_indices(uvs, res)
        if len(np.unique(rows * res + cols)) == len(uvs):
            return res
        res += 1
    raise TexelCollisionError("no collision-free resolution below %d" % limit)


def mesh_to_triplane(mesh: HeadMesh, resolution: int = DEFAULT_RESOLUTION) -> TriplaneMap:
    if resolution < 1:
        raise ValueError("resolution must be positive")
    rows, cols = texel_indices(mesh.uvs, resolution)
    keys = rows * resolution + cols
    order = np.argsort(keys, kind="stable")
    dup = np.nonzero(keys[order][1:] == keys[order][:-1])[0]
    if len(dup):
        a, b = int(order[dup[0]]), int(order[dup[0] + 1])
        try:
            need = min_collision_free_resolution(mesh.uvs, resolution + 1)
            hint = f"; resolution >= {need} is collision-free"
        except TexelCollisionError:
            hint = "; the UVs coincide, no resolution separates them"
        raise TexelCollisionError(
            f"vertices {a} and {b} share texel ({rows[a]}, {cols[a]}) at resolution {resolution}{hint}"
        )
    values = np.zeros((resolution, resolution, 3))
    values[rows, cols] = mesh.vertices
    mask = np.zeros((resolution, resolution), dtype=bool)
    mask[rows, cols] = True

    mirror = mask[:, ::-1]
    agreement = (mask & mirror).sum() / mask.sum()
    if agreement < 0.95:
        warnings.warn(
            f"triplane valid mask is only {agreement:.1%} mirror-symmetric; symmetry loss assumes a mirrored UV atlas",
            stacklevel=2,
        )
    return TriplaneMap(values, mask, rows, cols)


def triplane_to_mesh(triplane: TriplaneMap, topology: HeadMesh) -> HeadMesh:
    rows, cols = texel_indices(topology.uvs, triplane.resolution)
    if not np.all(triplane.valid_mask[rows, cols]):
        missing = int(np.nonzero(~triplane.valid_mask[rows, cols])[0][0])
        raise ValueError(f"vertex {missing} has no valid texel in the triplane")
    return topology.with_vertices(triplane.values[rows, cols])


def masked_tv(x: np.ndarray, mask: np.ndarray) -> tuple[float, np.ndarray]:
    """Anisotropic TV of an (H, W, C) image over 4-neighbour pairs inside ``mask``.

    Returns the value and a subgradient (sign(0) = 0); texels outside the
    mask get zero gradient.
    """
    grad = np.zeros_like(x)
    total = 0.0
    for axis in (0, 1):
        lo = [slice(None), slice(None)]
        hi = [slice(None), slice(None)]
        lo[axis] = slice(None, -1)
        hi[axis] = slice(1, None)
        lo, hi = tuple(lo), tuple(hi)
        pair = (mask[lo] & mask[hi])[..., None]
        d = np.where(pair, x[hi] - x[lo], 0.0)
        total += float(np.abs(d).sum())
        s = np.sign(d)
        grad[hi] += s
        grad[lo] -= s
    return total, grad


def tv_loss(triplane: TriplaneMap) -> tuple[float, np.ndarray]:
    """Anisotropic TV over valid-valid 4-neighbour pairs, with subgradient."""
    return masked_tv(triplane.values, triplane.valid_mask)


def _mirror_pairs(mask: np.ndarray) -> np.ndarray:
    return mask & mask[:, ::-1]


def symmetry_loss(triplane: TriplaneMap) -> tuple[float, np.ndarray]:
    """Left-right mirror symmetry: X antisymmetric, Y and Z symmetric.

    Each channel contributes the Euclidean norm of its residual image
    ``ch +/- flip(ch)`` taken over texels whose mirror is also valid; every
    mirrored pair is therefore counted twice (once from each side).
    """
    x = triplane.values
    both = _mirror_pairs(triplane.valid_mask)
    flipped = x[:, ::-1]
    signs = np.array([1.0, -1.0, -1.0])
    residual = np.where(both[..., None], x + signs * flipped, 0.0)
    grad = np.zeros_like(x)
    total = 0.0
    for c in range(3):
        r = residual[..., c]
        n = float(np.sqrt((r * r).sum()))
        total += n
        if n > 0.0:
            g = r / n
            # d/dx of r[i,j] = x[i,j] + s*x[i,R-1-j] reaches x[i,j] directly and through the mirror
            grad[..., c] = g + signs[c] * g[:, ::-1]
    return total, grad


def mirror_transform(triplane: TriplaneMap) -> TriplaneMap:
    """Reflect the image left-right and negate X."""
    values = triplane.values[:, ::-1] * np.array([-1.0, 1.0, 1.0])
    return triplane.copy_with(values)
