"""Acceptance criteria, one test each; every test records a pass/fail line for the summary."""

import time

import numpy as np
import pytest
from conftest import ACCEPTANCE_LINES
from oracles import brute_force_raster, dense_poisson
from scipy.spatial.transform import Rotation

from avatarfit import fixture
from avatarfit.assetmatch import CATEGORIES, AssetCatalog, AssetEntry, match_asset
from avatarfit.geomfit import GeomFitConfig, fit_geometry, landmark_loss
from avatarfit.meshcore import CameraPose, load_camera, load_landmarks, load_mesh, rotation_angle_between, rotation_matrix
from avatarfit.pipeline import PipelineConfig, run_pipeline
from avatarfit.raster import RenderOperator, rasterize, render, sample_bilinear, triangle_coverage
from avatarfit.texcomplete import dilate, poisson_blend, poisson_residual
from avatarfit.texfit import TexFitConfig, _PixelObjective, fit_texture_buffer
from avatarfit.triplane import mesh_to_triplane, symmetry_loss, tv_loss

SEEDS = (0, 1, 2)


def record(number, title, passed, detail):
    ACCEPTANCE_LINES.append(f"[{'PASS' if passed else 'FAIL'}] {number:2d}. {title}: {detail}")
    assert passed, detail


def fd_error(f, grad, x, d, h):
    """Relative error between <grad, d> and the central difference of ``f`` along ``d``."""
    fd = (f(x + h * d) - f(x - h * d)) / (2 * h)
    an = float(np.sum(grad * d))
    return abs(an - fd) / max(abs(an), abs(fd), 1e-8)


def tv_stencil_is_smooth(values, mask, d, h):
    """True when no valid neighbour pair changes sign of its difference within x +- h d."""
    for ax in (0, 1):
        n = mask.shape[ax]
        lo, hi = np.arange(n - 1), np.arange(1, n)
        both = np.take(mask, lo, axis=ax) & np.take(mask, hi, axis=ax)
        diff = np.take(values, hi, axis=ax) - np.take(values, lo, axis=ax)
        step = h * np.abs(np.take(d, hi, axis=ax) - np.take(d, lo, axis=ax))
        if np.any((np.abs(diff) <= step)[both]):
            return False
    return True


def unit(rng, shape, mask=None):
    d = rng.normal(size=shape)
    if mask is not None:
        d = np.where(mask[..., None], d, 0.0)
    return d / np.linalg.norm(d)


# ---------------------------------------------------------------- 1


def test_01_gradient_suite():
    t0 = time.perf_counter()
    worst = {"landmark": 0.0, "tv": 0.0, "symmetry": 0.0, "texture": 0.0, "sampling": 0.0}
    n_points, redrawn = 100, 0
    for seed in SEEDS:
        fx = fixture.generate(seed, texture_size=64)
        rng = np.random.default_rng(seed)
        tp = mesh_to_triplane(fx.gt_mesh, fixture.GRID)
        mask = tp.valid_mask
        buf = rasterize(fx.gt_mesh, fx.gt_pose, fx.intrinsics, 512, 512)
        op = RenderOperator(buf, 64, 64)
        active = op.texel_weight() > 0
        obj = _PixelObjective(op, active, fx.portrait[buf.coverage], 0.01, False)
        for _ in range(n_points):
            # a random evaluation point near the fixture's state
            values = tp.values + np.where(mask[..., None], rng.normal(scale=0.01, size=tp.values.shape), 0.0)
            point = tp.copy_with(values)
            pose = CameraPose.from_params(fx.gt_pose.params() + rng.normal(scale=0.01, size=6))

            _, g_val, g_pose = landmark_loss(point, fx.landmarks, pose, fx.intrinsics)
            f = lambda v: landmark_loss(tp.copy_with(v), fx.landmarks, pose, fx.intrinsics)[0]  # noqa: E731
            e1 = fd_error(f, g_val, values, unit(rng, values.shape, mask), 1e-6)
            f = lambda p: landmark_loss(point, fx.landmarks, CameraPose.from_params(p), fx.intrinsics)[0]  # noqa: E731
            e2 = fd_error(f, g_pose, pose.params(), unit(rng, 6), 1e-6)
            worst["landmark"] = max(worst["landmark"], e1, e2)

            # TV is piecewise linear: directions whose stencil crosses a kink are redrawn
            _, g = tv_loss(point)
            f = lambda v: tv_loss(tp.copy_with(v))[0]  # noqa: E731
            d = unit(rng, values.shape, mask)
            while not tv_stencil_is_smooth(values, mask, d, 1e-6):
                redrawn += 1
                d = unit(rng, values.shape, mask)
            worst["tv"] = max(worst["tv"], fd_error(f, g, values, d, 1e-6))

            _, g = symmetry_loss(point)
            f = lambda v: symmetry_loss(tp.copy_with(v))[0]  # noqa: E731
            worst["symmetry"] = max(worst["symmetry"], fd_error(f, g, values, unit(rng, values.shape, mask), 1e-6))

            params = rng.uniform(size=(int(active.sum()), 3))
            _, g = obj(params)
            f = lambda p: obj(p)[0]  # noqa: E731
            worst["texture"] = max(worst["texture"], fd_error(f, g, params, unit(rng, params.shape), 1e-6))

            # bilinear sampling is linear in the texture; its weights are the gradient
            tex = rng.uniform(size=(64, 64, 3))
            uv = rng.uniform(size=2)
            _, (rc, w) = sample_bilinear(tex, uv)
            g = np.zeros((64, 64))
            np.add.at(g, (rc[:, 0], rc[:, 1]), w)
            c = int(rng.integers(3))
            f = lambda t: sample_bilinear(t, uv)[0][c]  # noqa: E731
            d = unit(rng, tex.shape)
            worst["sampling"] = max(worst["sampling"], fd_error(f, g[..., None] * (np.arange(3) == c), tex, d, 1e-6))
    seconds = time.perf_counter() - t0
    ok = max(worst.values()) < 1e-4 and seconds < 30
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    record(1, "gradient suite", ok, f"max rel err {detail} ({n_points} points x {len(SEEDS)} fixtures, {redrawn} TV directions redrawn at kinks, {seconds:.1f} s)")


# ---------------------------------------------------------------- 2


@pytest.mark.parametrize("seed", SEEDS)
def test_02_geometry_round_trip(seed, tmp_path):
    fixture.make_fixture(seed, tmp_path)
    config = PipelineConfig.load(tmp_path / "config.json")
    template = load_mesh(tmp_path / "template.obj")
    landmarks = load_landmarks(tmp_path / "landmarks.json")
    intr, init = load_camera(tmp_path / "camera.json")
    gt = load_mesh(tmp_path / "ground_truth" / "mesh.obj")
    displaced = np.load(tmp_path / "ground_truth" / "displaced.npy")
    t0 = time.perf_counter()
    mesh, _, report = fit_geometry(template, landmarks, intr, init, config.geometry)
    seconds = time.perf_counter() - t0
    ids = np.unique(landmarks.vertex_ids)
    ids = ids[displaced[ids]]
    diag = gt.bbox_diagonal()
    err = np.linalg.norm(mesh.vertices[ids] - gt.vertices[ids], axis=1).max() / diag
    ok = report.final_rmse_px < 0.5 and err < 0.01 and seconds < 60
    detail = f"seed {seed}: RMSE {report.final_rmse_px:.2e} px, displaced landmark vertices <= {100 * err:.3f}% of diag ({len(ids)} vertices), {seconds:.1f} s"
    record(2, "geometry round trip", ok, detail)


# ---------------------------------------------------------------- 3


@pytest.mark.parametrize("seed", SEEDS)
def test_03_camera_recovery(seed):
    fx = fixture.generate(seed, texture_size=64)
    rng = np.random.default_rng(100 + seed)
    diag = fx.gt_mesh.bbox_diagonal()
    shift = rng.normal(size=3)
    shift *= 0.05 * diag / np.linalg.norm(shift)
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    rot = Rotation.from_rotvec(np.deg2rad(5.0) * axis) * Rotation.from_rotvec(np.array(fx.gt_pose.rotation))
    init = CameraPose(rot.as_rotvec(), fx.gt_pose.translation + shift)
    config = GeomFitConfig(triplane_resolution=fixture.GRID, optimize_triplane=False)
    t0 = time.perf_counter()
    _, pose, _ = fit_geometry(fx.gt_mesh, fx.landmarks, fx.intrinsics, init, config)
    seconds = time.perf_counter() - t0
    d_t = np.linalg.norm(pose.translation - fx.gt_pose.translation)
    d_r = np.degrees(rotation_angle_between(rotation_matrix(pose), rotation_matrix(fx.gt_pose)))
    ok = d_t < 1e-3 and d_r < 0.1 and seconds < 20
    record(3, "camera recovery", ok, f"seed {seed}: translation error {d_t:.1e}, rotation error {d_r:.4f} deg, {seconds:.1f} s")


# ---------------------------------------------------------------- 4


def test_04_texture_recovery(texture_fit0, fx0):
    buf, texture, report, seconds = texture_fit0
    weight = RenderOperator(buf, *texture.shape[:2]).texel_weight()
    seen = weight > 0.05
    mse = np.mean((texture[seen] - fx0.gt_texture[seen]) ** 2)
    psnr = 10 * np.log10(1.0 / mse)
    ok = psnr > 35 and seconds < 60 and report.levels == [32, 128, 512, 1024]
    record(4, "texture recovery", ok, f"PSNR {psnr:.1f} dB on {seen.sum()} texels, {seconds:.1f} s")


# ---------------------------------------------------------------- 5


def test_05_least_squares_oracle(fx0):
    buf = rasterize(fx0.gt_mesh, fx0.gt_pose, fixture.default_intrinsics(128), 128, 128)
    target = render(buf, fx0.gt_texture)
    A = RenderOperator(buf, 32, 32).matrix.toarray()
    b = target[buf.coverage]
    active = A.any(axis=0)
    x_ls = np.zeros((32 * 32, 3))
    # minimum-norm solution of the normal equations (a few texel columns are nearly dependent)
    x_ls[active] = np.linalg.lstsq(A[:, active], b, rcond=None)[0]
    loss_ls = np.linalg.norm(A @ x_ls - b)
    tex, _ = fit_texture_buffer(buf, target, TexFitConfig(hierarchy=(32,), alpha=0.0, iterations_per_level=1000))
    r = A @ tex.reshape(-1, 3) - b
    ratio = np.linalg.norm(r) / loss_ls
    orth = np.abs(A.T @ r).max()
    ok = ratio <= 1.01 and orth < 1e-4
    record(5, "least-squares oracle", ok, f"loss / normal-equations loss {ratio:.6f}, |A^T r|_inf {orth:.1e}")


# ---------------------------------------------------------------- 6


def test_06_rasterizer_oracle():
    size, mismatches, worst_claims, visible = 128, 0, 0, 0
    for seed in SEEDS:
        fx = fixture.generate(seed, texture_size=64)
        intr = fixture.default_intrinsics(size)
        buf = rasterize(fx.gt_mesh, fx.gt_pose, intr, size, size)
        covered, face_id, margin = brute_force_raster(fx.gt_mesh, fx.gt_pose, intr, size, size)
        mismatches += int((buf.coverage != covered).sum())
        clear = covered & (margin > 1e-9)
        mismatches += int((buf.face_id[clear] != face_id[clear]).sum())
        visible += int(covered.sum())
        # the UV layout is a flat triangulation of the unit square with every edge shared
        mesh = fx.gt_mesh
        sx, sy = mesh.uvs[:, 0] * size, (1 - mesh.uvs[:, 1]) * size
        claims = np.zeros((size, size), dtype=int)
        for face in mesh.faces:
            cov = triangle_coverage(face, sx, sy, size, size)
            if cov is not None:
                np.add.at(claims, (cov[0], cov[1]), 1)
        worst_claims = max(worst_claims, int(claims.max()))
    ok = mismatches == 0 and worst_claims == 1
    detail = f"{mismatches} mismatched pixels of {visible} covered, max claims per pixel on shared edges {worst_claims}"
    record(6, "rasterizer oracle", ok, detail)


# ---------------------------------------------------------------- 7


def test_07_poisson_oracle():
    rng = np.random.default_rng(7)
    source, target = rng.uniform(size=(2, 64, 64, 3))
    mask = dilate(rng.uniform(size=(64, 64)) < 0.01, 6)
    mask[:2], mask[-2:], mask[:, :2], mask[:, -2:] = False, False, False, False
    out = poisson_blend(source, target, mask)
    dense_err = np.abs(out - dense_poisson(source, target, mask)).max()
    residual = max(poisson_residual(out[..., c], source[..., c], target[..., c], mask) for c in range(3))
    flat = poisson_blend(np.zeros((64, 64)), target[..., 0], mask)
    ys, xs = np.nonzero(mask)
    harmonic = np.abs(flat[ys, xs] - (flat[ys - 1, xs] + flat[ys + 1, xs] + flat[ys, xs - 1] + flat[ys, xs + 1]) / 4).max()
    outside = bool(np.array_equal(out[~mask], target[~mask]))
    ok = dense_err < 1e-6 and residual < 1e-8 and harmonic < 1e-8 and outside
    detail = f"dense-solve diff {dense_err:.1e}, residual {residual:.1e}, harmonic defect {harmonic:.1e} ({mask.sum()} texels)"
    record(7, "Poisson oracle", ok, detail)


# ---------------------------------------------------------------- 8


def test_08_asset_matching():
    rng = np.random.default_rng(8)
    dim = 16
    entries = [AssetEntry(f"asset{i:03d}", CATEGORIES[rng.integers(len(CATEGORIES))], "", rng.normal(size=dim)) for i in range(100)]
    catalog = AssetCatalog(entries)
    present = sorted({e.category for e in entries})
    by_cat = {c: [e for e in entries if e.category == c] for c in present}
    unit_emb = {c: np.stack([e.embedding / np.linalg.norm(e.embedding) for e in by_cat[c]]) for c in present}
    wrong = scale_flips = 0
    for _ in range(1000):
        cat = present[rng.integers(len(present))]
        q = rng.normal(size=dim)
        sims = unit_emb[cat] @ (q / np.linalg.norm(q))
        expected = min(e.id for e, s in zip(by_cat[cat], sims) if s == sims.max())
        got = match_asset(q, catalog, cat).id
        wrong += got != expected
        scale = 10.0 ** rng.uniform(-6, 6)
        scale_flips += match_asset(scale * q, catalog, cat).id != got
    ok = wrong == 0 and scale_flips == 0
    record(8, "asset matching", ok, f"{wrong} disagreements with exhaustive scan, {scale_flips} scaling flips in 1000 queries")


# ---------------------------------------------------------------- 9 / 10


def test_09_end_to_end_budget(pipeline_run):
    _, result, seconds = pipeline_run
    stages = ", ".join(f"{k} {v:.1f}" for k, v in result.timings["stages"].items())
    record(9, "end-to-end budget", seconds < 120, f"{seconds:.1f} s on one thread ({stages})")


def test_10_determinism(pipeline_run, bundle):
    out_a, _, _ = pipeline_run
    out_b = bundle / "run_b"
    run_pipeline(PipelineConfig.load(bundle / "config.json"), out_b)
    compared, differing = 0, []
    for path in sorted(out_a.iterdir()):
        if path.name == "timings.json":
            continue
        compared += 1
        if path.read_bytes() != (out_b / path.name).read_bytes():
            differing.append(path.name)
    ok = compared > 0 and not differing
    record(10, "determinism", ok, f"{compared} artifacts compared, differing: {differing or 'none'}")
