"""Landmark-driven fitting of triplane geometry and camera pose."""

from __future__ import annotations

import csv
import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .meshcore import CameraPose, HeadMesh, Intrinsics, LandmarkSet, rotation_matrix_and_jacobian
from .optim import AdamState, adam_direction, cosine_schedule, optimizer_step  # noqa: F401  (public via geomfit)
from .triplane import TriplaneMap, mesh_to_triplane, symmetry_loss, triplane_to_mesh, tv_loss

logger = logging.getLogger(__name__)

MIN_DEPTH = 1e-6


class ProjectionError(ValueError):
    pass


class FitDivergedError(RuntimeError):
    """Loss went non-finite; carries the last finite state."""

    def __init__(self, message, mesh=None, pose=None, report=None):
        super().__init__(message)
        self.mesh = mesh
        self.pose = pose
        self.report = report


@dataclass
class GeomFitConfig:
    lambda_tv: float = 1.0
    lambda_sym: float = 0.1
    iterations: int = 500
    learning_rate_triplane: float = 1e-3
    learning_rate_camera: float = 1e-2
    optimizer_betas: tuple = (0.9, 0.999)
    epsilon: float = 1e-8
    triplane_resolution: int = 256
    squared_lmk: bool = False
    optimize_triplane: bool = True
    optimize_camera: bool = True
    # cosine decay of both learning rates down to this fraction
    lr_final_factor: float = 0.01
    monotone: bool = True
    per_vertex_moments: bool = True
    max_backtracks: int = 4

    def __post_init__(self):
        self.optimizer_betas = tuple(self.optimizer_betas)
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.lambda_tv < 0 or self.lambda_sym < 0:
            raise ValueError("loss weights must be non-negative")
        for b in self.optimizer_betas:
            if not 0.0 <= b < 1.0:
                raise ValueError("betas must lie in [0, 1)")
        if self.learning_rate_triplane <= 0 or self.learning_rate_camera <= 0 or self.epsilon <= 0:
            raise ValueError("learning rates and epsilon must be positive")


@dataclass
class FitReport:
    total: list = field(default_factory=list)
    lmk: list = field(default_factory=list)
    tv: list = field(default_factory=list)
    sym: list = field(default_factory=list)
    final_rmse_px: float = float("nan")
    iterations: int = 0

    def record(self, parts: dict) -> None:
        for key in ("total", "lmk", "tv", "sym"):
            getattr(self, key).append(float(parts[key]))
        self.iterations += 1

    def save(self, path, trace_path=None) -> None:
        doc = {
            "iterations": self.iterations,
            "final_rmse_px": self.final_rmse_px,
            "final_loss": {k: (getattr(self, k)[-1] if getattr(self, k) else None) for k in ("total", "lmk", "tv", "sym")},
        }
        Path(path).write_text(json.dumps(doc, indent=1))
        if trace_path is not None:
            with open(trace_path, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["iteration", "total", "lmk", "tv", "sym"])
                for i, row in enumerate(zip(self.total, self.lmk, self.tv, self.sym)):
                    w.writerow([i, *(repr(x) for x in row)])


# ---------------------------------------------------------------- projection


def project_points(points, pose: CameraPose, intr: Intrinsics) -> np.ndarray:
    """Pinhole projection of (K, 3) world points to (K, 2) pixels."""
    p = pose.to_camera(np.atleast_2d(points))
    z = p[:, 2]
    bad = np.nonzero(z <= MIN_DEPTH)[0]
    if len(bad):
        raise ProjectionError(f"point {int(bad[0])} is at or behind the camera plane (depth {z[bad[0]]:.3g})")
    return np.stack([intr.fx * p[:, 0] / z + intr.cx, intr.fy * (-p[:, 1]) / z + intr.cy], axis=1)


def project(point, pose: CameraPose, intr: Intrinsics) -> np.ndarray:
    return project_points(np.asarray(point, dtype=np.float64).reshape(1, 3), pose, intr)[0]


# -------------------------------------------------------------------- losses


def _landmark_terms(triplane: TriplaneMap, landmarks: LandmarkSet, pose: CameraPose, intr: Intrinsics):
    ids = landmarks.vertex_ids
    rows, cols = triplane.rows[ids], triplane.cols[ids]
    if not np.all(triplane.valid_mask[rows, cols]):
        raise ValueError("landmark vertex without a valid texel")
    V = triplane.values[rows, cols]
    R, dR = rotation_matrix_and_jacobian(pose.rotation)
    P = V @ R.T + pose.translation
    z = P[:, 2]
    front = z > MIN_DEPTH
    if not np.all(front):
        behind = np.nonzero(~front)[0]
        warnings.warn(f"{len(behind)} landmark(s) behind the camera excluded, first index {int(behind[0])}", stacklevel=3)
    zs = np.where(front, z, 1.0)
    proj = np.stack([intr.fx * P[:, 0] / zs + intr.cx, -intr.fy * P[:, 1] / zs + intr.cy], axis=1)
    resid = np.where(front[:, None], proj - landmarks.pixels, 0.0)
    return V, R, dR, P, zs, resid, front, rows, cols


def landmark_residuals(triplane, landmarks, pose, intr) -> np.ndarray:
    """Per-landmark pixel residual (projection minus target); NaN rows for excluded landmarks."""
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        *_, resid, front, _, _ = _landmark_terms(triplane, landmarks, pose, intr)
    return np.where(front[:, None], resid, np.nan)


def landmark_loss(triplane: TriplaneMap, landmarks: LandmarkSet, pose: CameraPose, intr: Intrinsics, squared=False):
    """Sum of landmark pixel distances and its gradients.

    Returns ``(loss, grad_values, grad_pose)`` where ``grad_values`` has the
    triplane image shape and ``grad_pose`` is ordered (rotation, translation).
    """
    V, R, dR, P, z, resid, front, rows, cols = _landmark_terms(triplane, landmarks, pose, intr)
    norms = np.sqrt((resid * resid).sum(axis=1))
    if squared:
        loss = float((norms * norms).sum())
        dres = 2.0 * resid
    else:
        loss = float(norms.sum())
        dres = np.divide(resid, norms[:, None], out=np.zeros_like(resid), where=norms[:, None] > 0)
    # d proj / d P for each landmark, contracted with dres
    fx, fy = intr.fx, intr.fy
    gP = np.empty_like(P)
    gP[:, 0] = dres[:, 0] * fx / z
    gP[:, 1] = -dres[:, 1] * fy / z
    gP[:, 2] = -(dres[:, 0] * fx * P[:, 0] - dres[:, 1] * fy * P[:, 1]) / (z * z)
    gP[~front] = 0.0
    gV = gP @ R
    grad_values = np.zeros_like(triplane.values)
    np.add.at(grad_values, (rows, cols), gV)
    grad_rot = np.einsum("kj,ijl,kl->i", gP, dR, V)
    grad_pose = np.concatenate([grad_rot, gP.sum(axis=0)])
    return loss, grad_values, grad_pose


def total_loss(triplane, landmarks, pose, intr, config: GeomFitConfig):
    """Weighted geometry objective.

    Returns ``(loss, grad_values, grad_pose, parts)`` with ``parts`` holding
    the unweighted component values.
    """
    lmk, g_lmk, g_pose = landmark_loss(triplane, landmarks, pose, intr, squared=config.squared_lmk)
    tv, g_tv = tv_loss(triplane)
    sym, g_sym = symmetry_loss(triplane)
    total = lmk + config.lambda_tv * tv + config.lambda_sym * sym
    grad = g_lmk + config.lambda_tv * g_tv + config.lambda_sym * g_sym
    grad = np.where(triplane.valid_mask[..., None], grad, 0.0)
    return total, grad, g_pose, {"total": total, "lmk": lmk, "tv": tv, "sym": sym}


def landmark_rmse(triplane, landmarks, pose, intr) -> float:
    r = landmark_residuals(triplane, landmarks, pose, intr)
    r = r[np.all(np.isfinite(r), axis=1)]
    return float(np.sqrt((r * r).sum(axis=1).mean())) if len(r) else float("nan")


# ------------------------------------------------------------------- fitting


def fit_geometry(mesh: HeadMesh, landmarks: LandmarkSet, intr: Intrinsics, init_pose: CameraPose, config=None):
    """Jointly optimise triplane texel values and camera pose with Adam.

    With ``config.monotone`` a step that would raise the objective is retried
    at half the step size up to ``config.max_backtracks`` times, then for the
    triplane and the camera alone, and skipped if nothing descends (the
    moment estimates are kept either way).

    Returns ``(fitted_mesh, pose, report)``.
    """
    config = config or GeomFitConfig()
    landmarks.check_mesh(mesh)
    if len(landmarks) < 6:
        raise ValueError(f"need at least 6 landmarks, got {len(landmarks)}")
    tp = mesh_to_triplane(mesh, config.triplane_resolution)
    rows, cols = tp.rows, tp.cols
    betas, eps = config.optimizer_betas, config.epsilon

    def as_triplane(verts):
        values = np.zeros_like(tp.values)
        values[rows, cols] = verts
        return TriplaneMap(values, tp.valid_mask, rows, cols)

    def evaluate(verts, pose_params):
        cur = as_triplane(verts)
        pose = CameraPose.from_params(pose_params)
        # trial steps that get rejected should not warn; accepted ones honour the caller's filters
        with warnings.catch_warnings():
            if attempt_mode[0]:
                warnings.simplefilter("ignore")
            loss, g_values, g_pose, parts = total_loss(cur, landmarks, pose, intr, config)
        finite = np.isfinite(loss) and np.all(np.isfinite(g_values)) and np.all(np.isfinite(g_pose))
        return finite, loss, g_values[rows, cols], g_pose, parts

    attempt_mode = [False]
    verts = tp.values[rows, cols].copy()
    pose_params = init_pose.params()
    v_state = AdamState.zeros_like(verts)
    p_state = AdamState.zeros_like(pose_params)
    report = FitReport()
    n = config.iterations

    finite, loss, g_verts, g_pose, parts = evaluate(verts, pose_params)
    last_finite = (verts, pose_params)
    for it in range(n):
        if not finite:
            cur = as_triplane(last_finite[0])
            pose = CameraPose.from_params(last_finite[1])
            report.final_rmse_px = landmark_rmse(cur, landmarks, pose, intr)
            raise FitDivergedError(f"geometry fit diverged at iteration {it}", triplane_to_mesh(cur, mesh), pose, report)
        last_finite = (verts, pose_params)
        report.record(parts)
        if it == n - 1:
            break
        d_verts = np.zeros_like(verts)
        d_pose = np.zeros_like(pose_params)
        if config.optimize_triplane:
            d_verts, v_state = adam_direction(g_verts, v_state, betas, eps, 1 if config.per_vertex_moments else None)
            d_verts *= cosine_schedule(config.learning_rate_triplane, it, n - 1, config.lr_final_factor)
        if config.optimize_camera:
            d_pose, p_state = adam_direction(g_pose, p_state, betas, eps)
            d_pose *= cosine_schedule(config.learning_rate_camera, it, n - 1, config.lr_final_factor)
        attempt_mode[0] = config.monotone
        if config.monotone:
            # joint step first, then each block alone: at zero-residual kinks a
            # joint move can increase the loss at any step size
            blocks = [(1.0, 1.0), (1.0, 0.0), (0.0, 1.0)]
            trials = [(bv * 0.5**k, bp * 0.5**k) for bv, bp in blocks for k in range(config.max_backtracks + 1)]
        else:
            trials = [(1.0, 1.0)]
        for sv, sp in trials:
            if (sv and not d_verts.any()) and not sp:
                continue
            trial = evaluate(verts - sv * d_verts, pose_params - sp * d_pose)
            if not config.monotone or (trial[0] and trial[1] <= loss):
                verts = verts - sv * d_verts
                pose_params = pose_params - sp * d_pose
                finite, loss, g_verts, g_pose, parts = trial
                break
        attempt_mode[0] = False

    cur = as_triplane(verts)
    pose = CameraPose.from_params(pose_params)
    report.final_rmse_px = landmark_rmse(cur, landmarks, pose, intr)
    logger.info("geometry fit: %d iterations, landmark RMSE %.4f px", report.iterations, report.final_rmse_px)
    return triplane_to_mesh(cur, mesh), pose, report
