"""Texture correction and completion against a template albedo.

Error-prone feature regions (eyes, mouth, nostrils) of a fitted texture are
replaced by template structure via Poisson blending, mouth and eyebrow tones
are transferred from the portrait, and the facial region is blended into
the template so ears, neck and the back of the head are inherited.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import pyamg
import scipy.sparse as sp
from scipy import ndimage
from scipy.sparse.linalg import LinearOperator, cg

from .imageio import LABEL_IDS

logger = logging.getLogger(__name__)

REPLACED_REGIONS = ("left_eye", "right_eye", "mouth", "nostrils")
TRANSFER_REGIONS = ("mouth", "eyebrows")
FACE_REGIONS = ("skin", "left_eye", "right_eye", "mouth", "nostrils", "eyebrows")
REFERENCE_RESOLUTION = 1024


class PoissonError(ValueError):
    pass


class MissingLabelsError(ValueError):
    def __init__(self, missing, where="label map"):
        self.missing = list(missing)
        super().__init__(f"{where} lacks required labels: {', '.join(self.missing)}")


@dataclass
class CompleteConfig:
    # disc radius in texels at REFERENCE_RESOLUTION, scaled with the texture size
    dilation_radius: float = 4.0
    color_transfer: bool = True
    ratio_limits: tuple = (0.25, 4.0)
    tolerance: float = 1e-10
    preconditioner: str = "amg"
    # optional (H, W, 4) RGBA layer composited last; None disables it
    makeup_overlay: np.ndarray | None = None

    def __post_init__(self):
        if self.dilation_radius < 0:
            raise ValueError("dilation_radius must be non-negative")
        lo, hi = self.ratio_limits
        if not 0 < lo <= 1 <= hi:
            raise ValueError("ratio_limits must satisfy 0 < lo <= 1 <= hi")


def disc(radius: float) -> np.ndarray:
    r = int(np.floor(radius))
    y, x = np.mgrid[-r : r + 1, -r : r + 1]
    return x * x + y * y <= radius * radius


def dilate(mask: np.ndarray, radius: float) -> np.ndarray:
    """Binary dilation with a Euclidean disc of ``radius`` texels."""
    if radius < 0:
        raise ValueError("radius must be non-negative")
    mask = np.asarray(mask, dtype=bool)
    if radius < 1:
        return mask.copy()
    return ndimage.binary_dilation(mask, structure=disc(radius))


def _poisson_system(mask: np.ndarray):
    """5-point Laplacian over masked texels plus neighbour bookkeeping."""
    ys, xs = np.nonzero(mask)
    n = len(ys)
    index = np.full(mask.shape, -1, dtype=np.int64)
    index[ys, xs] = np.arange(n)
    rows, cols = [], []
    nbrs = []
    for dy, dx in ((-1, 0), (1, 0), (0, -1), (0, 1)):
        ny, nx = ys + dy, xs + dx
        j = index[ny, nx]
        inside = j >= 0
        rows.append(np.arange(n)[inside])
        cols.append(j[inside])
        nbrs.append((ny, nx))
    r = np.concatenate(rows)
    c = np.concatenate(cols)
    off = sp.csr_matrix((-np.ones(len(r)), (r, c)), shape=(n, n))
    A = (sp.identity(n, format="csr") * 4.0 + off).tocsr()
    return A, (ys, xs), nbrs, index


def poisson_blend(
    source: np.ndarray,
    target: np.ndarray,
    mask: np.ndarray,
    tolerance: float = 1e-10,
    preconditioner: str = "amg",
) -> np.ndarray:
    """Seamless cloning of ``source`` into ``target`` over ``mask``.

    Masked texels solve ``4 x_p - sum_{q in mask} x_q = sum_q (s_p - s_q) +
    sum_{q not in mask} t_q`` over the 4-neighbourhood by preconditioned
    conjugate gradients until the residual 2-norm is below ``tolerance``;
    the result outside the mask is ``target`` unchanged.

    ``preconditioner`` is ``"amg"`` (classical algebraic multigrid V-cycle,
    a handful of iterations even for ~10^6 unknowns) or ``"jacobi"``
    (diagonal scaling; thousands of iterations on large masks).

    Raises
    ------
    PoissonError
        If the mask is empty or touches the image border.
    """
    source = np.asarray(source, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if source.shape != target.shape or source.shape[:2] != mask.shape:
        raise ValueError(f"shape mismatch: source {source.shape}, target {target.shape}, mask {mask.shape}")
    if not mask.any():
        raise PoissonError("mask has an empty interior")
    if mask[0].any() or mask[-1].any() or mask[:, 0].any() or mask[:, -1].any():
        raise PoissonError("mask touches the image border; a guard band of at least one texel is required")
    squeeze = source.ndim == 2
    src = source[..., None] if squeeze else source
    tgt = target[..., None] if squeeze else target

    A, (ys, xs), nbrs, index = _poisson_system(mask)
    if preconditioner == "amg":
        precond = pyamg.ruge_stuben_solver(A).aspreconditioner(cycle="V")
    elif preconditioner == "jacobi":
        diag = A.diagonal()
        precond = LinearOperator(A.shape, matvec=lambda x: x / diag, dtype=np.float64)
    else:
        raise ValueError(f"unknown preconditioner {preconditioner!r}")
    out = tgt.copy()
    n = len(ys)
    for ch in range(src.shape[2]):
        s, t = src[..., ch], tgt[..., ch]
        b = np.zeros(n)
        for ny, nx in nbrs:
            b += s[ys, xs] - s[ny, nx]
            outside = index[ny, nx] < 0
            b[outside] += t[ny[outside], nx[outside]]
        x, info = cg(A, b, x0=s[ys, xs].copy(), rtol=0.0, atol=tolerance, maxiter=10 * n, M=precond)
        if info != 0:
            raise PoissonError(f"conjugate gradients did not converge in {10 * n} iterations")
        out[ys, xs, ch] = x
    return out[..., 0] if squeeze else out


def poisson_residual(result: np.ndarray, source: np.ndarray, target: np.ndarray, mask: np.ndarray) -> float:
    """Max-norm residual of the discrete Poisson equation over the mask."""
    x = np.asarray(result, dtype=np.float64)
    s = np.asarray(source, dtype=np.float64)
    ys, xs = np.nonzero(mask)
    res = 4.0 * x[ys, xs] - 4.0 * s[ys, xs]
    for dy, dx in ((-1, 0), (1, 0), (0, -1), (0, 1)):
        res -= x[ys + dy, xs + dx] - s[ys + dy, xs + dx]
    return float(np.abs(res).max())


@dataclass(frozen=True)
class ColorTransform:
    """Per-channel affine map ``y = ratio * x + offset``."""

    ratio: np.ndarray
    offset: np.ndarray

    def __call__(self, pixels):
        return np.asarray(pixels, dtype=np.float64) * self.ratio + self.offset


def color_transfer(source_region, destination_region, ratio_limits=(0.25, 4.0)) -> ColorTransform:
    """Affine map giving ``destination_region`` the mean and std of ``source_region``.

    The std ratio is clamped to ``ratio_limits``; a constant destination
    channel keeps ratio 1 and is only shifted.  Regions are (N, C) pixel
    arrays or 1-D arrays of single-channel values.
    """
    src = np.asarray(source_region, dtype=np.float64)
    dst = np.asarray(destination_region, dtype=np.float64)
    channels = src.shape[-1] if src.ndim > 1 else 1
    src, dst = src.reshape(-1, channels), dst.reshape(-1, channels)
    if not len(src) or not len(dst):
        raise ValueError("color transfer needs non-empty source and destination regions")
    mu_s, sd_s = src.mean(axis=0), src.std(axis=0)
    mu_d, sd_d = dst.mean(axis=0), dst.std(axis=0)
    ratio = np.ones_like(sd_d)
    nz = sd_d > 0
    ratio[nz] = np.clip(sd_s[nz] / sd_d[nz], *ratio_limits)
    return ColorTransform(ratio, mu_s - ratio * mu_d)


def label_mask(labels: np.ndarray, names) -> np.ndarray:
    ids = [LABEL_IDS[n] for n in names]
    return np.isin(labels, ids)


def _require(labels, names, where):
    missing = [n for n in names if not np.any(labels == LABEL_IDS[n])]
    if missing:
        raise MissingLabelsError(missing, where)


def complete_texture(
    fitted: np.ndarray,
    labels: np.ndarray,
    template: np.ndarray,
    portrait: np.ndarray | None = None,
    portrait_labels: np.ndarray | None = None,
    config: CompleteConfig | None = None,
) -> np.ndarray:
    """Correct and complete a fitted albedo.

    Steps: dilate the eye, mouth and nostril masks and Poisson-blend the
    template into the fitted texture there; Poisson-blend the whole face
    (skin and features) of that result into the template; finally give the
    mouth and eyebrow regions the colour statistics of the same regions of
    the portrait.  The colour step runs last so that applying the function
    to its own output changes nothing beyond solver tolerance.

    Raises
    ------
    MissingLabelsError
        If a region used by any step is absent from ``labels`` (or, with
        colour transfer on, from ``portrait_labels``).
    """
    config = config or CompleteConfig()
    fitted = np.asarray(fitted, dtype=np.float64)
    template = np.asarray(template, dtype=np.float64)
    labels = np.asarray(labels)
    if fitted.shape != template.shape or fitted.shape[:2] != labels.shape:
        raise ValueError(f"shape mismatch: fitted {fitted.shape}, template {template.shape}, labels {labels.shape}")
    needed = sorted(set(REPLACED_REGIONS + FACE_REGIONS + (TRANSFER_REGIONS if config.color_transfer else ())),
                    key=list(LABEL_IDS).index)
    _require(labels, needed, "texture label map")
    if config.color_transfer:
        if portrait is None or portrait_labels is None:
            raise ValueError("colour transfer needs the portrait and its label map")
        portrait_labels = np.asarray(portrait_labels)
        if portrait_labels.shape != np.shape(portrait)[:2]:
            raise ValueError("portrait and portrait labels differ in size")
        _require(portrait_labels, TRANSFER_REGIONS, "portrait label map")

    radius = config.dilation_radius * fitted.shape[0] / REFERENCE_RESOLUTION
    features = dilate(label_mask(labels, REPLACED_REGIONS), radius)
    out = poisson_blend(template, fitted, features, config.tolerance, config.preconditioner)
    face = label_mask(labels, FACE_REGIONS) | features
    out = poisson_blend(out, template, face, config.tolerance, config.preconditioner)

    if config.color_transfer:
        portrait = np.asarray(portrait, dtype=np.float64)[..., :3]
        for name in TRANSFER_REGIONS:
            dst = labels == LABEL_IDS[name]
            src = portrait[portrait_labels == LABEL_IDS[name]]
            out[dst] = color_transfer(src, out[dst], config.ratio_limits)(out[dst])
    if config.makeup_overlay is not None:
        layer = np.asarray(config.makeup_overlay, dtype=np.float64)
        if layer.shape[:2] != out.shape[:2] or layer.shape[2] != 4:
            raise ValueError("makeup overlay must be an RGBA image of the texture size")
        a = layer[..., 3:]
        out = out * (1.0 - a) + layer[..., :3] * a
    return out
