import json
import shutil

import numpy as np
import pytest

from avatarfit import cli, fixture
from avatarfit.geomfit import project_points
from avatarfit.imageio import load_image
from avatarfit.meshcore import load_camera, load_landmarks, load_mesh
from avatarfit.pipeline import ConfigError, PipelineConfig, StageError, render_preview, run_pipeline
from avatarfit.raster import rasterize, render

ARTIFACTS = [
    "config_used.json",
    "mesh.obj",
    "camera_fitted.json",
    "geometry_report.json",
    "geometry_trace.csv",
    "texture_fitted.npy",
    "texture_fitted.png",
    "texture_trace.csv",
    "albedo.npy",
    "albedo.png",
    "assets.json",
    "preview.png",
    "timings.json",
]


def test_pipeline_writes_every_artifact(pipeline_run, fx0):
    out, result, _ = pipeline_run
    for name in ARTIFACTS:
        assert (out / name).is_file(), name
    timings = json.loads((out / "timings.json").read_text())
    assert list(timings["stages"]) == ["load", "geometry", "texture", "completion", "matching", "preview"]
    assert timings["total"] >= sum(timings["stages"].values())
    assets = json.loads((out / "assets.json").read_text())
    assert {c: a["id"] for c, a in assets.items()} == fx0.expected_assets
    albedo = np.load(out / "albedo.npy")
    assert albedo.shape == (1024, 1024, 3) and np.all(np.isfinite(albedo))
    preview = load_image(out / "preview.png")
    assert preview.shape[:2] == (512, 4 * 512)


def test_pipeline_geometry_reaches_landmarks(pipeline_run):
    out, _, _ = pipeline_run
    report = json.loads((out / "geometry_report.json").read_text())
    assert report["final_rmse_px"] < 0.5


def test_missing_input_file_is_named(bundle, tmp_path):
    doc = json.loads((bundle / "config.json").read_text())
    doc["inputs"]["portrait"] = "nowhere.npy"
    config = PipelineConfig.from_dict(doc, bundle)
    with pytest.raises(ConfigError, match="'portrait'"):
        run_pipeline(config, tmp_path / "out")
    assert not (tmp_path / "out").exists()


def test_missing_required_field_is_named(bundle):
    doc = json.loads((bundle / "config.json").read_text())
    del doc["inputs"]["labels"]
    with pytest.raises(ConfigError, match="labels"):
        PipelineConfig.from_dict(doc, bundle)


def test_unknown_config_keys_rejected(bundle):
    doc = json.loads((bundle / "config.json").read_text())
    doc["geometry"]["learning_rate"] = 0.1
    with pytest.raises(ConfigError, match="learning_rate"):
        PipelineConfig.from_dict(doc, bundle)


def test_stage_failure_names_the_stage(bundle, tmp_path):
    broken = tmp_path / "bundle"
    shutil.copytree(bundle, broken, ignore=shutil.ignore_patterns("run_*"))
    (broken / "portrait.npy").write_bytes(b"not an array")
    with pytest.raises(StageError) as info:
        run_pipeline(PipelineConfig.load(broken / "config.json"), tmp_path / "out")
    assert info.value.stage == "load"
    assert "load" in json.loads((tmp_path / "out" / "timings.json").read_text())["stages"]


# ----------------------------------------------------------------- the CLI


def test_stages_run_in_isolation_reproduce_pipeline(pipeline_run, bundle, tmp_path):
    ref, _, _ = pipeline_run
    cfg = str(bundle / "config.json")
    geo = tmp_path / "geo"
    assert cli.main(["fit-geometry", "--config", cfg, "--out", str(geo)]) == 0
    assert (geo / "mesh.obj").read_bytes() == (ref / "mesh.obj").read_bytes()
    assert (geo / "camera_fitted.json").read_bytes() == (ref / "camera_fitted.json").read_bytes()

    tex = tmp_path / "tex"
    args = ["--mesh", str(ref / "mesh.obj"), "--camera", str(ref / "camera_fitted.json")]
    assert cli.main(["extract-texture", "--config", cfg, "--out", str(tex), *args]) == 0
    np.testing.assert_array_equal(np.load(tex / "texture_fitted.npy"), np.load(ref / "texture_fitted.npy"))

    done = tmp_path / "done"
    fitted = ["--fitted", str(ref / "texture_fitted.npy")]
    assert cli.main(["complete-texture", "--config", cfg, "--out", str(done), *fitted]) == 0
    np.testing.assert_array_equal(np.load(done / "albedo.npy"), np.load(ref / "albedo.npy"))

    assets = tmp_path / "assets"
    assert cli.main(["match-assets", "--config", cfg, "--out", str(assets)]) == 0
    assert (assets / "assets.json").read_bytes() == (ref / "assets.json").read_bytes()


def test_match_assets_prints_choices(bundle, tmp_path, capsys, fx0):
    catalog, query = str(bundle / "catalog.json"), str(bundle / "queries.json")
    assert cli.main(["match-assets", "--catalog", catalog, "--query", query, "--out", str(tmp_path)]) == 0
    printed = capsys.readouterr().out.splitlines()
    assert len(printed) == len(fx0.expected_assets)
    for line in printed:
        category, asset_id = line.split()[:2]
        assert fx0.expected_assets[category] == asset_id


def test_exit_code_two_for_configuration_errors(bundle, tmp_path, capsys):
    assert cli.main(["pipeline", "--config", str(tmp_path / "absent.json")]) == 2
    assert cli.main(["pipeline", "--config", str(bundle / "config.json"), "--threads", "0"]) == 2
    assert cli.main(["fit-geometry", "--out", str(tmp_path)]) == 2
    (tmp_path / "bad.json").write_text("{not json")
    assert cli.main(["match-assets", "--config", str(tmp_path / "bad.json")]) == 2
    assert cli.main(["match-assets", "--catalog", str(bundle / "queries.json"), "--query", str(bundle / "queries.json")]) == 2
    with pytest.raises(SystemExit) as info:
        cli.main(["no-such-command"])
    assert info.value.code == 2
    capsys.readouterr()


def test_exit_code_three_for_stage_failures(bundle, tmp_path, capsys):
    broken = tmp_path / "bundle"
    shutil.copytree(bundle, broken, ignore=shutil.ignore_patterns("run_*"))
    (broken / "portrait.npy").write_bytes(b"not an array")
    assert cli.main(["pipeline", "--config", str(broken / "config.json"), "--out", str(tmp_path / "o")]) == 3
    assert "load" in capsys.readouterr().err


def test_cli_overrides_reach_the_geometry_config(bundle, tmp_path):
    out = tmp_path / "g"
    assert cli.main(["fit-geometry", "--config", str(bundle / "config.json"), "--iters", "7", "--out", str(out)]) == 0
    assert json.loads((out / "geometry_report.json").read_text())["iterations"] == 7


# ---------------------------------------------------------------- preview


def test_preview_first_panel_is_the_portrait(fx0, tmp_path):
    strip = render_preview(fx0.gt_mesh, fx0.gt_texture, fx0.gt_pose, fx0.intrinsics, tmp_path / "p.png")
    assert strip.shape == (512, 4 * 512, 3)
    np.testing.assert_array_equal(strip[:, :512], fx0.portrait)
    assert (tmp_path / "p.png").is_file()


def test_white_texture_gives_white_silhouettes(fx0, tmp_path):
    white = np.ones((8, 8, 3))
    strip = render_preview(fx0.gt_mesh, white, fx0.gt_pose, fixture.default_intrinsics(96), tmp_path / "p.png", (96, 96))
    cov = rasterize(fx0.gt_mesh, fx0.gt_pose, fixture.default_intrinsics(96), 96, 96).coverage
    np.testing.assert_allclose(strip[:, :96][cov], 1.0, rtol=0, atol=1e-12)
    assert not strip[:, :96][~cov].any()
    # every turntable panel shows some of the head and some background
    for k in range(1, 4):
        panel = strip[:, 96 * k : 96 * (k + 1)]
        assert 0 < (panel > 0.5).all(axis=-1).mean() < 1


def test_render_preview_cli_rejects_bad_output_dir(bundle, tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    gt = bundle / "ground_truth"
    args = ["--mesh", str(gt / "mesh.obj"), "--texture", str(gt / "texture.npy"), "--camera", str(gt / "camera.json")]
    assert cli.main(["render-preview", *args, "--out", str(blocker / "sub")]) == 2
    assert cli.main(["render-preview", *args, "--size", "512", "384", "--out", str(tmp_path / "ok")]) == 0
    assert load_image(tmp_path / "ok" / "preview.png").shape[:2] == (384, 4 * 512)


# ---------------------------------------------------------------- fixture


def test_make_fixture_is_reproducible(bundle, tmp_path):
    assert cli.main(["make-fixture", "--seed", "0", "--out", str(tmp_path)]) == 0
    for path in sorted(p for p in bundle.rglob("*") if p.is_file() and "run_" not in str(p.relative_to(bundle))):
        assert (tmp_path / path.relative_to(bundle)).read_bytes() == path.read_bytes(), path.name


def test_fixture_landmarks_reproject_exactly(bundle):
    mesh = load_mesh(bundle / "ground_truth" / "mesh.obj")
    intr, pose = load_camera(bundle / "ground_truth" / "camera.json")
    lmk = load_landmarks(bundle / "landmarks.json")
    np.testing.assert_array_equal(project_points(mesh.vertices[lmk.vertex_ids], pose, intr), lmk.pixels)


def test_fixture_portrait_is_self_consistent(fx0):
    buf = rasterize(fx0.gt_mesh, fx0.gt_pose, fx0.intrinsics, 512, 512)
    np.testing.assert_array_equal(render(buf, fx0.gt_texture), fx0.portrait)
    assert 0.1 < buf.coverage.mean() < 0.9


def test_fixture_seeds_differ():
    a, b = fixture.generate(0, texture_size=64), fixture.generate(1, texture_size=64)
    assert not np.array_equal(a.gt_mesh.vertices, b.gt_mesh.vertices)
    assert not np.array_equal(a.landmarks.vertex_ids, b.landmarks.vertex_ids)
