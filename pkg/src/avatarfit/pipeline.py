"""End-to-end orchestration: geometry, texture, completion, asset matching."""

from __future__ import annotations

import dataclasses
import json
import logging
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .assetmatch import AssetCatalog, cosine_similarity, load_queries, match_all
from .geomfit import GeomFitConfig, fit_geometry
from .imageio import load_image, load_labels, save_float, save_png
from .meshcore import CameraPose, HeadMesh, Intrinsics, load_camera, load_landmarks, load_mesh, save_camera, save_mesh
from .raster import rasterize, render
from .texcomplete import CompleteConfig, complete_texture
from .texfit import TexFitConfig, fit_texture

logger = logging.getLogger(__name__)

REQUIRED_INPUTS = ("template_mesh", "landmarks", "portrait", "labels", "template_albedo", "catalog")
OPTIONAL_INPUTS = ("camera", "portrait_labels", "queries")
TURNTABLE_DEGREES = (-45.0, 45.0, 90.0)


class ConfigError(ValueError):
    """Invalid or incomplete configuration (missing field, file or bad value)."""


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage {stage!r} failed: {cause}")


def config_from_section(cls, doc: dict | None, section: str):
    """Build a stage config dataclass, rejecting unknown keys."""
    doc = dict(doc or {})
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(doc) - known)
    if unknown:
        raise ConfigError(f"unknown keys in [{section}]: {', '.join(unknown)}")
    for key, value in doc.items():
        if isinstance(value, list):
            doc[key] = tuple(value)
    try:
        return cls(**doc)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}]: {exc}") from exc


def config_to_section(config) -> dict:
    out = {}
    for f in dataclasses.fields(config):
        value = getattr(config, f.name)
        if isinstance(value, tuple):
            value = list(value)
        if isinstance(value, np.ndarray):
            continue
        out[f.name] = value
    return out


def load_completion_section(doc: dict | None, base_dir: Path) -> CompleteConfig:
    doc = dict(doc or {})
    overlay = doc.pop("makeup_overlay", None)
    config = config_from_section(CompleteConfig, doc, "completion")
    if overlay is not None:
        path = base_dir / overlay
        if not path.exists():
            raise ConfigError(f"completion.makeup_overlay: file not found: {path}")
        config.makeup_overlay = np.load(path) if path.suffix == ".npy" else _load_rgba(path)
    return config


def _load_rgba(path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        rgba = np.asarray(im.convert("RGBA"), dtype=np.float64) / 255.0
    return rgba


@dataclass
class PipelineConfig:
    inputs: dict
    geometry: GeomFitConfig = field(default_factory=GeomFitConfig)
    texture: TexFitConfig = field(default_factory=TexFitConfig)
    completion: CompleteConfig = field(default_factory=CompleteConfig)
    output_dir: Path = Path("output")

    @classmethod
    def from_dict(cls, doc: dict, base_dir=".") -> "PipelineConfig":
        """Parse a config document; relative paths resolve against ``base_dir``."""
        base_dir = Path(base_dir)
        unknown = sorted(set(doc) - {"inputs", "geometry", "texture", "completion", "output_dir"})
        if unknown:
            raise ConfigError(f"unknown config sections: {', '.join(unknown)}")
        raw = dict(doc.get("inputs") or {})
        extra = sorted(set(raw) - set(REQUIRED_INPUTS) - set(OPTIONAL_INPUTS))
        if extra:
            raise ConfigError(f"unknown input fields: {', '.join(extra)}")
        missing = [k for k in REQUIRED_INPUTS if not raw.get(k)]
        if missing:
            raise ConfigError(f"missing required input path(s): {', '.join(missing)}")
        inputs = {k: base_dir / v for k, v in raw.items() if v}
        return cls(
            inputs=inputs,
            geometry=config_from_section(GeomFitConfig, doc.get("geometry"), "geometry"),
            texture=config_from_section(TexFitConfig, doc.get("texture"), "texture"),
            completion=load_completion_section(doc.get("completion"), base_dir),
            output_dir=base_dir / doc.get("output_dir", "output"),
        )

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        return cls.from_dict(doc, path.parent)

    def check_files(self) -> None:
        for name, path in self.inputs.items():
            if not Path(path).is_file():
                raise ConfigError(f"input {name!r}: file not found: {path}")

    def to_dict(self) -> dict:
        return {
            "inputs": {k: str(v) for k, v in self.inputs.items()},
            "geometry": config_to_section(self.geometry),
            "texture": config_to_section(self.texture),
            "completion": config_to_section(self.completion),
            "output_dir": str(self.output_dir),
        }


def frontal_pose(mesh: HeadMesh, intr: Intrinsics, height: int) -> CameraPose:
    """Camera on +Z looking down -Z at the mesh centre, framing its height in ~80% of the image."""
    lo, hi = mesh.vertices.min(axis=0), mesh.vertices.max(axis=0)
    centre = 0.5 * (lo + hi)
    extent = max(hi[0] - lo[0], hi[1] - lo[1])
    dist = intr.fy * extent / (0.8 * height) + 0.5 * (hi[2] - lo[2])
    # rotation by pi about Y maps (x, y, z) -> (-x, y, -z)
    flipped = centre * np.array([-1.0, 1.0, -1.0])
    return CameraPose([0.0, np.pi, 0.0], -flipped + np.array([0.0, 0.0, dist]))


def turntable(mesh: HeadMesh, degrees: float) -> HeadMesh:
    """Mesh rotated about the vertical axis through its bounding-box centre."""
    a = np.deg2rad(degrees)
    c, s = np.cos(a), np.sin(a)
    rot = np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])
    centre = 0.5 * (mesh.vertices.min(axis=0) + mesh.vertices.max(axis=0))
    return mesh.with_vertices((mesh.vertices - centre) @ rot.T + centre)


def render_preview(mesh: HeadMesh, texture, pose: CameraPose, intr: Intrinsics, out_path, size=None) -> np.ndarray:
    """Write a PNG strip: the view from ``pose`` then the turntable views.

    ``size`` is (width, height) of each panel (default: twice the principal
    point).  Returns the float image (linear RGB) that was encoded.
    """
    if size is None:
        size = (int(round(2 * intr.cx)), int(round(2 * intr.cy)))
    width, height = size
    panels = [render(rasterize(mesh, pose, intr, width, height), texture)]
    for deg in TURNTABLE_DEGREES:
        panels.append(render(rasterize(turntable(mesh, deg), pose, intr, width, height), texture))
    strip = np.concatenate(panels, axis=1)
    save_png(strip, out_path)
    return strip


@dataclass
class PipelineResult:
    artifacts: dict
    timings: dict
    matches: dict


def _write_json(path, doc):
    Path(path).write_text(json.dumps(doc, indent=2))


def run_pipeline(config: PipelineConfig, output_dir=None) -> PipelineResult:
    """Fit geometry, extract and complete the texture, match assets, render a preview.

    Artifacts go to ``output_dir`` (default ``config.output_dir``); files
    written before a failure are kept.  ``timings.json`` records the
    wall-clock seconds of every stage that ran plus the total.

    Raises
    ------
    ConfigError
        Missing input files.
    StageError
        Any failure inside a stage; ``.stage`` names it.
    """
    out = Path(output_dir or config.output_dir)
    config.check_files()
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {out}: {exc}") from exc
    inputs = config.inputs
    artifacts: dict = {}
    stages: dict = {}
    t_start = time.perf_counter()

    def write_timings():
        _write_json(out / "timings.json", {"stages": stages, "total": time.perf_counter() - t_start})

    @contextmanager
    def stage(name):
        t0 = time.perf_counter()
        try:
            yield
        except Exception as exc:
            stages[name] = time.perf_counter() - t0
            write_timings()
            raise StageError(name, exc) from exc
        stages[name] = time.perf_counter() - t0
        logger.info("stage %s: %.2f s", name, stages[name])

    _write_json(out / "config_used.json", config.to_dict())
    with stage("load"):
        template = load_mesh(inputs["template_mesh"])
        landmarks = load_landmarks(inputs["landmarks"])
        portrait = load_image(inputs["portrait"])[..., :3]
        labels = load_labels(inputs["labels"])
        template_albedo = load_image(inputs["template_albedo"])[..., :3]
        catalog = AssetCatalog.load(inputs["catalog"])
        portrait_labels = load_labels(inputs["portrait_labels"]) if "portrait_labels" in inputs else None
        queries = load_queries(inputs["queries"]) if "queries" in inputs else {}
        height, width = portrait.shape[:2]
        if "camera" in inputs:
            intr, init_pose = load_camera(inputs["camera"])
        else:
            intr = Intrinsics.default(width, height)
            init_pose = frontal_pose(template, intr, height)

    with stage("geometry"):
        mesh, pose, report = fit_geometry(template, landmarks, intr, init_pose, config.geometry)
        save_mesh(mesh, out / "mesh.obj")
        save_camera(intr, pose, out / "camera_fitted.json")
        report.save(out / "geometry_report.json", out / "geometry_trace.csv")
        artifacts.update(mesh=out / "mesh.obj", camera=out / "camera_fitted.json", geometry_report=out / "geometry_report.json")

    with stage("texture"):
        fitted, tex_report = fit_texture(mesh, pose, intr, portrait, config.texture)
        save_float(fitted, out / "texture_fitted.npy")
        save_png(fitted, out / "texture_fitted.png")
        tex_report.save_trace(out / "texture_trace.csv")
        artifacts.update(texture_fitted=out / "texture_fitted.npy", texture_trace=out / "texture_trace.csv")

    with stage("completion"):
        albedo = complete_texture(fitted, labels, template_albedo, portrait, portrait_labels, config.completion)
        save_float(albedo, out / "albedo.npy")
        save_png(albedo, out / "albedo.png")
        artifacts.update(albedo=out / "albedo.npy", albedo_png=out / "albedo.png")

    with stage("matching"):
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
        _write_json(out / "assets.json", manifest)
        artifacts["assets"] = out / "assets.json"

    with stage("preview"):
        render_preview(mesh, albedo, pose, intr, out / "preview.png", (width, height))
        artifacts["preview"] = out / "preview.png"

    write_timings()
    artifacts["timings"] = out / "timings.json"
    return PipelineResult(artifacts, json.loads((out / "timings.json").read_text()), matches)
