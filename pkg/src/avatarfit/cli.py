"""Command-line entry point: one subcommand per stage plus the full pipeline.

Exit codes: 0 success, 2 configuration error, 3 stage failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import fixture
from .assetmatch import AssetCatalog, CatalogError, cosine_similarity, load_queries, match_all
from .geomfit import GeomFitConfig, fit_geometry
from .imageio import load_image, load_labels, save_float, save_png
from .meshcore import Intrinsics, MeshFormatError, load_camera, load_landmarks, load_mesh, save_camera, save_mesh
from .pipeline import (
    ConfigError,
    PipelineConfig,
    StageError,
    config_from_section,
    frontal_pose,
    load_completion_section,
    render_preview,
    run_pipeline,
)
from .texcomplete import complete_texture
from .texfit import TexFitConfig, fit_texture

logger = logging.getLogger("avatarfit")

EXIT_OK, EXIT_CONFIG, EXIT_STAGE = 0, 2, 3


def _hierarchy(text):
    try:
        return tuple(int(x) for x in text.split(","))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON config (pipeline document or per-stage sections)")
    common.add_argument("--out", type=Path, default=Path("output"), help="output directory")
    common.add_argument("--threads", type=int, default=1, help="BLAS/OpenMP threads (1 = deterministic reference)")
    common.add_argument("--seed", type=int, default=0, help="random seed (fixture generation)")
    common.add_argument("-v", "--verbose", action="store_true")

    geo = argparse.ArgumentParser(add_help=False)
    geo.add_argument("--lambda-tv", type=float)
    geo.add_argument("--lambda-sym", type=float)
    geo.add_argument("--iters", type=int)
    geo.add_argument("--lr-triplane", type=float)
    geo.add_argument("--lr-camera", type=float)
    geo.add_argument("--triplane-resolution", type=int)
    geo.add_argument("--squared-lmk", action="store_true", default=None)

    tex = argparse.ArgumentParser(add_help=False)
    tex.add_argument("--hierarchy", type=_hierarchy, help="e.g. 32,128,512,1024")
    tex.add_argument("--alpha", type=float)
    tex.add_argument("--iters-per-level", type=int)
    tex.add_argument("--lr-texture", type=float)
    tex.add_argument("--squared-data", action="store_true", default=None)

    parser = argparse.ArgumentParser(prog="avatarfit", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit-geometry", parents=[common, geo], help="fit the head mesh and camera to landmarks")
    p.add_argument("--mesh", type=Path)
    p.add_argument("--landmarks", type=Path)
    p.add_argument("--camera", type=Path, help="intrinsics + initial pose (default: frontal, fx = width)")

    p = sub.add_parser("extract-texture", parents=[common, tex], help="fit a texture to the portrait")
    p.add_argument("--mesh", type=Path)
    p.add_argument("--camera", type=Path)
    p.add_argument("--portrait", type=Path)

    p = sub.add_parser("complete-texture", parents=[common], help="correct and complete a fitted texture")
    p.add_argument("--fitted", type=Path)
    p.add_argument("--labels", type=Path)
    p.add_argument("--template", type=Path)
    p.add_argument("--portrait", type=Path)
    p.add_argument("--portrait-labels", type=Path)

    p = sub.add_parser("match-assets", parents=[common], help="pick catalog assets for query embeddings")
    p.add_argument("--catalog", type=Path)
    p.add_argument("--query", type=Path)

    sub.add_parser("pipeline", parents=[common, geo, tex], help="run every stage from a pipeline config")

    p = sub.add_parser("render-preview", parents=[common], help="render a textured mesh plus turntable views")
    p.add_argument("--mesh", type=Path, required=True)
    p.add_argument("--texture", type=Path, required=True)
    p.add_argument("--camera", type=Path, required=True)
    p.add_argument(
        "--size", type=int, nargs=2, metavar=("W", "H"), help="panel size in the camera's pixel grid (default: twice the principal point)"
    )

    sub.add_parser("make-fixture", parents=[common], help="write a synthetic bundle with ground truth")
    return parser


class _Context:
    """Config document plus the directory its relative paths resolve against."""

    def __init__(self, path):
        self.doc, self.base = {}, Path(".")
        if path is not None:
            try:
                self.doc = json.loads(Path(path).read_text())
            except FileNotFoundError as exc:
                raise ConfigError(f"config file not found: {path}") from exc
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: {exc}") from exc
            self.base = Path(path).parent

    def input(self, given, name, required=True):
        if given is not None:
            return given
        value = (self.doc.get("inputs") or {}).get(name)
        if value:
            return self.base / value
        if required:
            raise ConfigError(f"missing input {name!r} (pass it as a flag or in the config's inputs)")
        return None

    def section(self, name):
        return dict(self.doc.get(name) or {})


def _geometry_config(args, section: dict) -> GeomFitConfig:
    doc = dict(section)
    overrides = {
        "lambda_tv": args.lambda_tv,
        "lambda_sym": args.lambda_sym,
        "iterations": args.iters,
        "learning_rate_triplane": args.lr_triplane,
        "learning_rate_camera": args.lr_camera,
        "triplane_resolution": args.triplane_resolution,
        "squared_lmk": args.squared_lmk,
    }
    doc.update({k: v for k, v in overrides.items() if v is not None})
    return config_from_section(GeomFitConfig, doc, "geometry")


def _texture_config(args, section: dict) -> TexFitConfig:
    doc = dict(section)
    overrides = {
        "hierarchy": args.hierarchy,
        "alpha": args.alpha,
        "iterations_per_level": args.iters_per_level,
        "learning_rate": args.lr_texture,
        "squared_data": args.squared_data,
    }
    doc.update({k: v for k, v in overrides.items() if v is not None})
    return config_from_section(TexFitConfig, doc, "texture")


def _existing(path, name):
    if not Path(path).is_file():
        raise ConfigError(f"{name}: file not found: {path}")
    return Path(path)


def cmd_fit_geometry(args, ctx):
    config = _geometry_config(args, ctx.section("geometry"))
    mesh_path = _existing(ctx.input(args.mesh, "template_mesh"), "mesh")
    lmk_path = _existing(ctx.input(args.landmarks, "landmarks"), "landmarks")
    cam_path = ctx.input(args.camera, "camera", required=False)
    mesh, landmarks = load_mesh(mesh_path), load_landmarks(lmk_path)
    if cam_path is not None:
        intr, pose = load_camera(_existing(cam_path, "camera"))
    else:
        intr = Intrinsics.default(landmarks.width, landmarks.height)
        pose = frontal_pose(mesh, intr, landmarks.height)
    args.out.mkdir(parents=True, exist_ok=True)
    fitted, pose, report = fit_geometry(mesh, landmarks, intr, pose, config)
    save_mesh(fitted, args.out / "mesh.obj")
    save_camera(intr, pose, args.out / "camera_fitted.json")
    report.save(args.out / "geometry_report.json", args.out / "geometry_trace.csv")
    print(f"landmark RMSE {report.final_rmse_px:.4f} px after {report.iterations} iterations -> {args.out}")


def cmd_extract_texture(args, ctx):
    config = _texture_config(args, ctx.section("texture"))
    mesh = load_mesh(_existing(ctx.input(args.mesh, "template_mesh"), "mesh"))
    intr, pose = load_camera(_existing(ctx.input(args.camera, "camera"), "camera"))
    portrait = load_image(_existing(ctx.input(args.portrait, "portrait"), "portrait"))[..., :3]
    args.out.mkdir(parents=True, exist_ok=True)
    texture, report = fit_texture(mesh, pose, intr, portrait, config)
    save_float(texture, args.out / "texture_fitted.npy")
    save_png(texture, args.out / "texture_fitted.png")
    report.save_trace(args.out / "texture_trace.csv")
    print(f"texture {texture.shape[0]}x{texture.shape[1]}, final loss {report.losses[-1][-1]:.6g} -> {args.out}")


def cmd_complete_texture(args, ctx):
    config = load_completion_section(ctx.section("completion"), ctx.base)
    fitted = load_image(_existing(args.fitted or args.out / "texture_fitted.npy", "fitted"))[..., :3]
    labels = load_labels(_existing(ctx.input(args.labels, "labels"), "labels"))
    template = load_image(_existing(ctx.input(args.template, "template_albedo"), "template"))[..., :3]
    portrait = portrait_labels = None
    if config.color_transfer:
        portrait = load_image(_existing(ctx.input(args.portrait, "portrait"), "portrait"))[..., :3]
        portrait_labels = load_labels(_existing(ctx.input(args.portrait_labels, "portrait_labels"), "portrait labels"))
    args.out.mkdir(parents=True, exist_ok=True)
    albedo = complete_texture(fitted, labels, template, portrait, portrait_labels, config)
    save_float(albedo, args.out / "albedo.npy")
    save_png(albedo, args.out / "albedo.png")
    print(f"completed albedo -> {args.out}")


def cmd_match_assets(args, ctx):
    catalog = AssetCatalog.load(_existing(ctx.input(args.catalog, "catalog"), "catalog"))
    queries = load_queries(_existing(ctx.input(args.query, "queries"), "query"))
    matches = match_all(queries, catalog)
    manifest = {
        cat: {
            "id": e.id,
            "label_text": e.label_text,
            "similarity": cosine_similarity(queries[cat], e.embedding),
            "attributes": e.attributes,
        }
        for cat, e in matches.items()
    }
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "assets.json").write_text(json.dumps(manifest, indent=2))
    for cat, entry in manifest.items():
        print(f"{cat:10s} {entry['id']}  (cosine {entry['similarity']:.3f})")


def cmd_pipeline(args, ctx):
    if args.config is None:
        raise ConfigError("pipeline needs --config")
    config = PipelineConfig.load(args.config)
    sections = config.to_dict()
    config.geometry = _geometry_config(args, sections["geometry"])
    config.texture = _texture_config(args, sections["texture"])
    result = run_pipeline(config, args.out)
    for name, seconds in result.timings["stages"].items():
        print(f"{name:10s} {seconds:7.2f} s")
    print(f"{'total':10s} {result.timings['total']:7.2f} s -> {args.out}")


def cmd_render_preview(args, ctx):
    mesh = load_mesh(_existing(args.mesh, "mesh"))
    texture = load_image(_existing(args.texture, "texture"))[..., :3]
    intr, pose = load_camera(_existing(args.camera, "camera"))
    try:
        args.out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {args.out}: {exc}") from exc
    size = tuple(args.size) if args.size else None
    render_preview(mesh, texture, pose, intr, args.out / "preview.png", size)
    print(f"preview -> {args.out / 'preview.png'}")


def cmd_make_fixture(args, ctx):
    fixture.make_fixture(args.seed, args.out)
    print(f"fixture seed {args.seed} -> {args.out}")


COMMANDS = {
    "fit-geometry": cmd_fit_geometry,
    "extract-texture": cmd_extract_texture,
    "complete-texture": cmd_complete_texture,
    "match-assets": cmd_match_assets,
    "pipeline": cmd_pipeline,
    "render-preview": cmd_render_preview,
    "make-fixture": cmd_make_fixture,
}

# raised by bad inputs before any computation starts
CONFIG_ERRORS = (ConfigError, MeshFormatError, CatalogError, json.JSONDecodeError)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        with threadpool_limits(limits=args.threads):
            ctx = _Context(args.config) if args.command != "pipeline" else None
            COMMANDS[args.command](args, ctx)
    except CONFIG_ERRORS as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STAGE
    except Exception as exc:  # any other failure inside a stage
        print(f"error: {args.command} failed: {exc}", file=sys.stderr)
        return EXIT_STAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
