"""Coarse-to-fine texture recovery through the frozen rasterization."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .meshcore import CameraPose, HeadMesh, Intrinsics
from .optim import AdamState, adam_direction, cosine_schedule
from .raster import RenderOperator, rasterize
from .triplane import masked_tv

logger = logging.getLogger(__name__)


class TextureFitDivergedError(RuntimeError):
    def __init__(self, message, texture=None, report=None):
        super().__init__(message)
        self.texture = texture
        self.report = report


@dataclass
class TexFitConfig:
    hierarchy: tuple = (32, 128, 512, 1024)
    alpha: float = 0.01
    iterations_per_level: int = 200
    learning_rate: float = 5e-2
    squared_data: bool = False
    # cosine decay per level down to this fraction of the learning rate
    lr_final_factor: float = 0.01
    # reject steps that raise the loss: the step fraction halves up to
    # max_backtracks times per iteration, then the step is skipped
    monotone: bool = True
    max_backtracks: int = 4

    def __post_init__(self):
        self.hierarchy = tuple(int(r) for r in self.hierarchy)
        if not self.hierarchy or any(b <= a for a, b in zip(self.hierarchy, self.hierarchy[1:])):
            raise ValueError("hierarchy must be a non-empty strictly increasing list")
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")
        if self.iterations_per_level < 1 or self.learning_rate <= 0:
            raise ValueError("iterations_per_level and learning_rate must be positive")


@dataclass
class TexFitReport:
    levels: list = field(default_factory=list)
    losses: list = field(default_factory=list)  # one list per level

    def save_trace(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["level_resolution", "iteration", "loss"])
            for res, trace in zip(self.levels, self.losses):
                for i, v in enumerate(trace):
                    w.writerow([res, i, repr(v)])


def texture_loss(rendered, target, coverage, alpha, squared=False):
    """Masked data term plus ``alpha`` times the TV of the rendered image.

    The data term is the Frobenius norm of the residual over covered pixels
    (squared when ``squared``).  Returns ``(loss, grad)`` with ``grad`` of
    the rendered image's shape.
    """
    rendered = np.asarray(rendered, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if rendered.shape != target.shape or rendered.shape[:2] != coverage.shape:
        raise ValueError(f"shape mismatch: rendered {rendered.shape}, target {target.shape}, coverage {coverage.shape}")
    cov = coverage[..., None]
    r = np.where(cov, rendered - target, 0.0)
    sq = float((r * r).sum())
    if squared:
        data, g = sq, 2.0 * r
    else:
        data = np.sqrt(sq)
        g = r / data if data > 0 else np.zeros_like(r)
    tv, g_tv = masked_tv(rendered, coverage)
    return data + alpha * tv, g + alpha * g_tv


def _neighbour_pairs(coverage: np.ndarray):
    """Index pairs (into covered-pixel order) of 4-adjacent covered pixels."""
    index = np.full(coverage.shape, -1, dtype=np.int64)
    ys, xs = np.nonzero(coverage)
    index[ys, xs] = np.arange(len(ys))
    a = [index[:-1, :], index[:, :-1]]
    b = [index[1:, :], index[:, 1:]]
    lo = np.concatenate([x.ravel() for x in a])
    hi = np.concatenate([x.ravel() for x in b])
    keep = (lo >= 0) & (hi >= 0)
    return lo[keep], hi[keep]


class _PixelObjective:
    """texture_loss as a function of the active texels only (same value and gradient).

    ``params`` is (n_active, 3) in row-major texel order of ``active``.
    """

    def __init__(self, op: RenderOperator, active: np.ndarray, target_pixels, alpha, squared):
        self.target = target_pixels
        self.alpha = alpha
        self.squared = squared
        cols = np.flatnonzero(active)
        self.matrix = op.matrix[:, cols].tocsr()
        self.matrix_t = self.matrix.T.tocsr()
        lo, hi = _neighbour_pairs(op.buffer.coverage)
        m = len(lo)
        # rows: pixel pairs, entries -1 at lo and +1 at hi
        self.diff = sp.csr_matrix(
            (np.repeat([[-1.0, 1.0]], m, axis=0).ravel(), (np.repeat(np.arange(m), 2), np.stack([lo, hi], 1).ravel())),
            shape=(m, op.n_pixels),
        )
        self.diff_t = self.diff.T.tocsr()

    def __call__(self, params):
        pix = self.matrix @ params
        r = pix - self.target
        sq = float((r * r).sum())
        if self.squared:
            data, g = sq, 2.0 * r
        else:
            data = np.sqrt(sq)
            g = r / data if data > 0 else np.zeros_like(r)
        d = self.diff @ pix
        tv = float(np.abs(d).sum())
        if self.alpha:
            g = g + self.alpha * (self.diff_t @ np.sign(d))
        return data + self.alpha * tv, self.matrix_t @ g


def upsample(texture: np.ndarray, new_resolution: int) -> np.ndarray:
    """Half-texel-aligned bilinear upsampling of a square texture."""
    res = texture.shape[0]
    if new_resolution < res:
        raise ValueError(f"cannot downsample {res} -> {new_resolution}")
    if new_resolution == res:
        return texture.copy()
    t = _resample_axis(texture, new_resolution, axis=0)
    return _resample_axis(t, new_resolution, axis=1)


def _resample_axis(t, n_new, axis):
    n_old = t.shape[axis]
    x = (np.arange(n_new) + 0.5) * (n_old / n_new) - 0.5
    x0 = np.floor(x).astype(np.int64)
    frac = x - x0
    a = np.take(t, np.clip(x0, 0, n_old - 1), axis=axis)
    b = np.take(t, np.clip(x0 + 1, 0, n_old - 1), axis=axis)
    shape = [1] * t.ndim
    shape[axis] = n_new
    # a + f * (b - a) keeps constant regions bit-exact
    return a + frac.reshape(shape) * (b - a)


def fit_texture_buffer(buffer, target: np.ndarray, config: TexFitConfig, init=None):
    """Texture fit against a precomputed raster buffer.

    ``init`` optionally seeds the first level (its resolution must equal the
    first hierarchy entry); otherwise the covered-pixel mean of the target
    is used.
    """
    coverage = buffer.coverage
    if target.shape[:2] != coverage.shape:
        raise ValueError(f"target {target.shape[:2]} does not match raster size {coverage.shape}")
    target = np.asarray(target, dtype=np.float64)[..., :3]
    target_pixels = target[coverage]
    if not len(target_pixels):
        raise ValueError("no covered pixels to fit")
    report = TexFitReport()
    tex = None
    for level, res in enumerate(config.hierarchy):
        if tex is None:
            if init is not None:
                tex = np.array(init, dtype=np.float64)
            else:
                tex = np.broadcast_to(target_pixels.mean(axis=0), (res, res, 3)).copy()
        else:
            tex = upsample(tex, res)
        op = RenderOperator(buffer, res, res)
        active = op.texel_weight() > 0
        objective = _PixelObjective(op, active, target_pixels, config.alpha, config.squared_data)
        params = tex[active]
        state = AdamState.zeros_like(params)
        trace = []
        n = config.iterations_per_level
        scale = 1.0  # step fraction; halves on rejection, doubles back after acceptance
        loss, grad = objective(params)
        last_finite = params
        for it in range(n):
            if not np.isfinite(loss):
                tex[active] = last_finite
                report.levels.append(res)
                report.losses.append(trace)
                raise TextureFitDivergedError(f"texture fit diverged at level {res}, iteration {it}", tex, report)
            last_finite = params
            trace.append(float(loss))
            if it == n - 1:
                break
            direction, state = adam_direction(grad, state)
            direction *= cosine_schedule(config.learning_rate, it, n - 1, config.lr_final_factor)
            if not config.monotone:
                params = params - direction
                loss, grad = objective(params)
                continue
            for _ in range(config.max_backtracks + 1):
                trial = params - scale * direction
                t_loss, t_grad = objective(trial)
                if t_loss <= loss:
                    params, loss, grad = trial, t_loss, t_grad
                    scale = min(1.0, 2.0 * scale)
                    break
                scale *= 0.5
            else:
                # skip the step; restart momentum so the next proposal follows the gradient
                state = AdamState(np.zeros_like(state.m), state.v, state.step)
        tex[active] = params
        report.levels.append(res)
        report.losses.append(trace)
        logger.info("texture level %d: loss %.6g -> %.6g", res, trace[0], trace[-1])
    return tex, report


def fit_texture(mesh: HeadMesh, pose: CameraPose, intr: Intrinsics, target: np.ndarray, config=None):
    """Recover a texture so that rendering ``mesh`` from ``pose`` reproduces ``target``.

    Returns ``(texture, report)``; the texture has shape (R, R, 3) for the
    last hierarchy level.
    """
    config = config or TexFitConfig()
    buffer = rasterize(mesh, pose, intr, target.shape[1], target.shape[0])
    return fit_texture_buffer(buffer, target, config)
