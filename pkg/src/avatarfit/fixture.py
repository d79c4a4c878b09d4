"""Deterministic synthetic head fixtures with known ground truth.

The template is a UV-unwrapped partial ellipsoid (front of a head) whose
atlas is mirror-symmetric: ``u -> 1 - u`` maps ``x -> -x``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .assetmatch import CATEGORIES, AssetCatalog, AssetEntry
from .geomfit import project_points
from .imageio import LABEL_IDS, save_float, save_labels, save_png
from .meshcore import CameraPose, HeadMesh, Intrinsics, LandmarkSet, save_camera, save_landmarks, save_mesh
from .raster import rasterize, render

GRID = 64
AZIMUTH_SPAN = np.deg2rad(200.0)
ELEVATION_RANGE = (np.deg2rad(-60.0), np.deg2rad(75.0))
RADII = (0.78, 1.0, 0.92)
IMAGE_SIZE = 512
TEXTURE_SIZE = 1024
N_LANDMARKS = 431

# (u, v, radius_u, radius_v) of facial features in the UV atlas
FEATURES = {
    "left_eye": [(0.415, 0.533, 0.035, 0.02)],
    "right_eye": [(0.585, 0.533, 0.035, 0.02)],
    "eyebrows": [(0.41, 0.607, 0.045, 0.012), (0.59, 0.607, 0.045, 0.012)],
    "nostrils": [(0.475, 0.385, 0.012, 0.01), (0.525, 0.385, 0.012, 0.01)],
    "mouth": [(0.5, 0.28, 0.06, 0.022)],
}


def _angles(uv):
    theta = (uv[..., 0] - 0.5) * AZIMUTH_SPAN
    lo, hi = ELEVATION_RANGE
    phi = lo + uv[..., 1] * (hi - lo)
    return theta, phi


def head_template(grid: int = GRID) -> HeadMesh:
    t = np.arange(grid) / (grid - 1)
    U, V = np.meshgrid(t, t)  # row i <-> v, column j <-> u
    uv = np.stack([U.ravel(), V.ravel()], axis=1)
    theta, phi = _angles(uv)
    a, b, c = RADII
    nose = 0.12 * np.exp(-(theta**2 + (phi + 0.05) ** 2) / 0.02)
    x = a * np.cos(phi) * np.sin(theta)
    y = b * np.sin(phi)
    z = c * np.cos(phi) * np.cos(theta) + nose
    faces = []
    for i in range(grid - 1):
        for j in range(grid - 1):
            v00, v10 = i * grid + j, i * grid + j + 1
            v01, v11 = v00 + grid, v10 + grid
            faces.append((v00, v10, v11))
            faces.append((v00, v11, v01))
    return HeadMesh(np.stack([x, y, z], axis=1), uv, np.array(faces))


def deformation_weight(uvs) -> np.ndarray:
    """Smooth bump over the central face; zero on roughly three quarters of the atlas."""
    theta, phi = _angles(uvs)
    wt = np.clip(1.0 - (theta / np.deg2rad(42.0)) ** 2, 0.0, None)
    centre, half = np.deg2rad(-5.0), np.deg2rad(42.0)
    wp = np.clip(1.0 - ((phi - centre) / half) ** 2, 0.0, None)
    return (wt * wp) ** 2


def ground_truth_deformation(template: HeadMesh, rng: np.random.Generator) -> np.ndarray:
    """Mirror-symmetric displacement field (X odd, Y and Z even in azimuth)."""
    theta, phi = _angles(template.uvs)
    w = deformation_weight(template.uvs)
    sx, sy, sz = rng.uniform(0.6, 1.0, 3) * np.array([0.12, 0.08, 0.01]) * rng.choice([-1, 1], 3)
    d = np.stack([sx * np.sin(theta) * w, sy * np.cos(2 * phi) * w, sz * w], axis=1)
    return d


def default_intrinsics(size: int = IMAGE_SIZE) -> Intrinsics:
    f = 620.0 * size / 512.0
    return Intrinsics(f, f, size / 2.0, size / 2.0)


def default_pose(rng: np.random.Generator | None = None) -> CameraPose:
    """Camera on the +Z axis looking down -Z at the face."""
    rot = np.array([0.0, np.pi, 0.0])
    trans = np.array([0.0, 0.05, 3.6])
    if rng is not None:
        rot = rot + rng.uniform(-0.02, 0.02, 3)
        trans = trans + rng.uniform(-0.03, 0.03, 3)
    return CameraPose(rot, trans)


def _gauss(u, v, cu, cv, su, sv):
    return np.exp(-0.5 * (((u - cu) / su) ** 2 + ((v - cv) / sv) ** 2))


def _uv_grid(res):
    c = (np.arange(res) + 0.5) / res
    U, V = np.meshgrid(c, 1.0 - c)  # row 0 is v = 1
    return U, V


def _painted_face(res, base, variation, rng, feature_colors):
    U, V = _uv_grid(res)
    tex = np.empty((res, res, 3))
    tex[:] = base
    for k in range(3):
        fu, fv, ph = rng.uniform(1.0, 3.0), rng.uniform(1.0, 3.0), rng.uniform(0, 2 * np.pi)
        tex[..., k] += variation * np.sin(2 * np.pi * fu * U + ph) * np.cos(2 * np.pi * fv * V)
    for name, color in feature_colors.items():
        for cu, cv, ru, rv in FEATURES[name]:
            g = _gauss(U, V, cu, cv, max(ru * 0.7, 0.02), max(rv * 0.9, 0.02))[..., None]
            tex = tex * (1 - g) + np.asarray(color) * g
    return tex


def ground_truth_texture(rng: np.random.Generator, res: int = TEXTURE_SIZE) -> np.ndarray:
    return _painted_face(
        res,
        base=rng.uniform([0.70, 0.50, 0.40], [0.80, 0.60, 0.50]),
        variation=0.04,
        rng=rng,
        feature_colors={
            "left_eye": (0.25, 0.2, 0.18),
            "right_eye": (0.25, 0.2, 0.18),
            "eyebrows": (0.22, 0.15, 0.1),
            "nostrils": (0.45, 0.3, 0.25),
            "mouth": (0.65, 0.3, 0.3),
        },
    )


def template_albedo(res: int = TEXTURE_SIZE) -> np.ndarray:
    rng = np.random.default_rng(12345)
    return _painted_face(
        res,
        base=np.array([0.72, 0.55, 0.46]),
        variation=0.02,
        rng=rng,
        feature_colors={
            "left_eye": (0.3, 0.25, 0.22),
            "right_eye": (0.3, 0.25, 0.22),
            "eyebrows": (0.3, 0.22, 0.16),
            "nostrils": (0.5, 0.35, 0.3),
            "mouth": (0.7, 0.38, 0.36),
        },
    )


def uv_labels(res: int = TEXTURE_SIZE) -> np.ndarray:
    """RegionLabelMap of the template atlas."""
    U, V = _uv_grid(res)
    theta, phi = _angles(np.stack([U, V], axis=-1))
    labels = np.full((res, res), LABEL_IDS["background"], dtype=np.int64)
    face = (np.abs(theta) < np.deg2rad(70)) & (phi > np.deg2rad(-50)) & (phi < np.deg2rad(68))
    labels[face] = LABEL_IDS["skin"]
    ears = (np.abs(theta) > np.deg2rad(75)) & (np.abs(theta) < np.deg2rad(95)) & (np.abs(phi - 0.1) < 0.3)
    labels[ears] = LABEL_IDS["ears"]
    labels[phi < np.deg2rad(-52)] = LABEL_IDS["neck"]
    for name, ellipses in FEATURES.items():
        for cu, cv, ru, rv in ellipses:
            labels[((U - cu) / ru) ** 2 + ((V - cv) / rv) ** 2 <= 1.0] = LABEL_IDS[name]
    return labels


def portrait_labels(buffer, labels: np.ndarray) -> np.ndarray:
    """Label each covered portrait pixel by the atlas label under its UV."""
    res = labels.shape[0]
    out = np.full(buffer.coverage.shape, LABEL_IDS["background"], dtype=np.int64)
    cov = buffer.coverage
    uv = buffer.uv[cov]
    cols = np.clip((uv[:, 0] * res).astype(np.int64), 0, res - 1)
    rows = np.clip(((1.0 - uv[:, 1]) * res).astype(np.int64), 0, res - 1)
    out[cov] = labels[rows, cols]
    return out


def choose_landmarks(template: HeadMesh, rng: np.random.Generator, count: int = N_LANDMARKS) -> np.ndarray:
    """Sorted random vertex ids spread over the visible face."""
    theta, phi = _angles(template.uvs)
    visible = (np.abs(theta) < np.deg2rad(75)) & (phi > np.deg2rad(-55)) & (phi < np.deg2rad(70))
    candidates = np.nonzero(visible)[0]
    return np.sort(rng.choice(candidates, size=min(count, len(candidates)), replace=False))


def synthetic_catalog(rng: np.random.Generator, dim: int = 32) -> AssetCatalog:
    counts = {"hair": 23, "garment": 45, "hat": 8, "moustache": 13, "glasses": 6, "eyelashes": 4, "iris": 6, "body": 3}
    entries = []
    for cat in CATEGORIES:
        for k in range(counts[cat]):
            emb = rng.normal(size=dim)
            attrs = {"variant": str(k)}
            if cat == "hair":
                attrs.update(
                    style=str(rng.choice(["straight", "wavy", "curly"])),
                    length=str(rng.choice(["short", "medium", "long"])),
                )
            entries.append(AssetEntry(f"{cat}_{k:03d}", cat, f"{cat} variant {k}", emb, attrs))
    return AssetCatalog(entries)


@dataclass
class Fixture:
    template: HeadMesh
    gt_mesh: HeadMesh
    landmarks: LandmarkSet
    intrinsics: Intrinsics
    gt_pose: CameraPose
    init_pose: CameraPose
    gt_texture: np.ndarray
    portrait: np.ndarray
    labels: np.ndarray
    portrait_labels: np.ndarray
    template_albedo: np.ndarray
    catalog: AssetCatalog
    queries: dict
    expected_assets: dict  # category -> id each query was drawn around
    displaced: np.ndarray  # bool per vertex


def generate(seed: int = 0, image_size: int = IMAGE_SIZE, texture_size: int = TEXTURE_SIZE) -> Fixture:
    rng = np.random.default_rng(seed)
    template = head_template()
    disp = ground_truth_deformation(template, rng)
    gt_mesh = template.with_vertices(template.vertices + disp)
    intr = default_intrinsics(image_size)
    gt_pose = default_pose()
    ids = choose_landmarks(template, rng)
    pixels = project_points(gt_mesh.vertices[ids], gt_pose, intr)
    landmarks = LandmarkSet(pixels, ids, image_size, image_size)
    texture = ground_truth_texture(rng, texture_size)
    buffer = rasterize(gt_mesh, gt_pose, intr, image_size, image_size)
    portrait = render(buffer, texture)
    labels = uv_labels(texture_size)
    catalog = synthetic_catalog(rng)
    queries, expected = {}, {}
    for cat in ("hair", "garment", "glasses", "eyelashes", "iris", "body"):
        entries = catalog.in_category(cat)
        pick = entries[int(rng.integers(len(entries)))]
        queries[cat] = pick.embedding + 0.3 * rng.normal(size=catalog.embedding_dim)
        expected[cat] = pick.id
    return Fixture(
        template=template,
        gt_mesh=gt_mesh,
        landmarks=landmarks,
        intrinsics=intr,
        gt_pose=gt_pose,
        init_pose=default_pose(),
        gt_texture=texture,
        portrait=portrait,
        labels=labels,
        portrait_labels=portrait_labels(buffer, labels),
        template_albedo=template_albedo(texture_size),
        catalog=catalog,
        queries=queries,
        expected_assets=expected,
        displaced=np.any(disp != 0, axis=1),
    )


def pipeline_config_doc() -> dict:
    """Pipeline configuration for a fixture bundle (paths relative to the bundle)."""
    return {
        "inputs": {
            "template_mesh": "template.obj",
            "landmarks": "landmarks.json",
            "camera": "camera.json",
            "portrait": "portrait.npy",
            "portrait_labels": "portrait_labels.png",
            "labels": "labels.png",
            "template_albedo": "template_albedo.npy",
            "catalog": "catalog.json",
            "queries": "queries.json",
        },
        # the 64x64 template grid maps one vertex per texel at resolution 64,
        # so triplane TV couples neighbouring vertices
        "geometry": {"triplane_resolution": GRID},
        "texture": {},
        "completion": {},
        "output_dir": "output",
    }


def make_fixture(seed: int, out_dir, image_size: int = IMAGE_SIZE, texture_size: int = TEXTURE_SIZE) -> Fixture:
    """Write a synthetic bundle: pipeline inputs, a config and ``ground_truth/``.

    Float images are stored as ``.npy`` (exact) next to an 8-bit PNG for
    viewing.  Returns the in-memory fixture.
    """
    fx = generate(seed, image_size, texture_size)
    out = Path(out_dir)
    gt = out / "ground_truth"
    gt.mkdir(parents=True, exist_ok=True)
    save_mesh(fx.template, out / "template.obj")
    save_landmarks(fx.landmarks, out / "landmarks.json")
    save_camera(fx.intrinsics, fx.init_pose, out / "camera.json")
    save_float(fx.portrait, out / "portrait.npy")
    save_png(fx.portrait, out / "portrait.png")
    save_labels(fx.portrait_labels, out / "portrait_labels.png")
    save_labels(fx.labels, out / "labels.png")
    save_float(fx.template_albedo, out / "template_albedo.npy")
    save_png(fx.template_albedo, out / "template_albedo.png")
    fx.catalog.save(out / "catalog.json")
    (out / "queries.json").write_text(json.dumps({k: v.tolist() for k, v in fx.queries.items()}, indent=1))
    (out / "config.json").write_text(json.dumps(pipeline_config_doc(), indent=2))

    save_mesh(fx.gt_mesh, gt / "mesh.obj")
    save_camera(fx.intrinsics, fx.gt_pose, gt / "camera.json")
    save_float(fx.gt_texture, gt / "texture.npy")
    save_png(fx.gt_texture, gt / "texture.png")
    np.save(gt / "displaced.npy", fx.displaced)
    (gt / "expected_assets.json").write_text(json.dumps(fx.expected_assets, indent=1))
    (gt / "fixture.json").write_text(json.dumps({"seed": int(seed), "image_size": image_size, "texture_size": texture_size}))
    return fx
