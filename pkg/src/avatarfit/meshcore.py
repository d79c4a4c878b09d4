"""Core geometric types and their file formats.

Conventions: world +Y is up and the default camera looks down -Z.  Camera
space has x to the right, y up and positive depth in front of the camera;
image rows grow downward.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class MeshFormatError(ValueError):
    """Raised when a mesh file cannot be turned into a valid HeadMesh."""


@dataclass(frozen=True)
class HeadMesh:
    """Fixed-topology triangle mesh with exactly one UV per vertex."""

    vertices: np.ndarray
    uvs: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        vertices = np.array(self.vertices, dtype=np.float64)
        uvs = np.array(self.uvs, dtype=np.float64)
        faces = np.array(self.faces, dtype=np.int64)
        if vertices.ndim != 2 or vertices.shape[1] != 3:
            raise ValueError(f"vertices must be N x 3, got {vertices.shape}")
        if uvs.shape != (len(vertices), 2):
            raise ValueError(f"need one UV per vertex: {uvs.shape} vs {len(vertices)} vertices")
        faces = faces.reshape(-1, 3)
        if len(faces) and (faces.min() < 0 or faces.max() >= len(vertices)):
            raise ValueError("face index out of range")
        if np.any((faces[:, 0] == faces[:, 1]) | (faces[:, 1] == faces[:, 2]) | (faces[:, 0] == faces[:, 2])):
            raise ValueError("degenerate face (repeated vertex index)")
        if not np.all(np.isfinite(vertices)):
            raise ValueError("non-finite vertex position")
        if np.any(uvs < 0.0) or np.any(uvs > 1.0):
            raise ValueError("UV coordinates must lie in [0, 1]")
        for name, arr in (("vertices", vertices), ("uvs", uvs), ("faces", faces)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def with_vertices(self, vertices: np.ndarray) -> "HeadMesh":
        return HeadMesh(vertices, self.uvs, self.faces)

    def bbox_diagonal(self) -> float:
        return float(np.linalg.norm(self.vertices.max(axis=0) - self.vertices.min(axis=0)))

    def triangles(self) -> np.ndarray:
        """World-space triangle corners, shape (F, 3, 3)."""
        return self.vertices[self.faces]


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")

    @classmethod
    def default(cls, width: int, height: int) -> "Intrinsics":
        """Focal length equal to the image width, principal point at the centre."""
        return cls(float(width), float(width), width / 2.0, height / 2.0)


@dataclass(frozen=True)
class CameraPose:
    """Axis-angle rotation (radians) and translation, world -> camera."""

    rotation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        r = np.array(self.rotation, dtype=np.float64).reshape(3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(r)) and np.all(np.isfinite(t))):
            raise ValueError("camera pose must be finite")
        r.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    def params(self) -> np.ndarray:
        return np.concatenate([self.rotation, self.translation])

    @classmethod
    def from_params(cls, params) -> "CameraPose":
        params = np.asarray(params, dtype=np.float64)
        return cls(params[:3], params[3:6])

    def to_camera(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points) @ rotation_matrix(self).T + self.translation


@dataclass(frozen=True)
class LandmarkSet:
    """K target pixels, each tied to one mesh vertex."""

    pixels: np.ndarray
    vertex_ids: np.ndarray
    width: int = 0
    height: int = 0

    def __post_init__(self):
        pixels = np.array(self.pixels, dtype=np.float64).reshape(-1, 2)
        ids = np.array(self.vertex_ids, dtype=np.int64).reshape(-1)
        if len(pixels) != len(ids):
            raise ValueError("one vertex id per landmark pixel required")
        if not np.all(np.isfinite(pixels)):
            raise ValueError("landmark pixels must be finite")
        if np.any(ids < 0):
            raise ValueError("negative landmark vertex id")
        pixels.setflags(write=False)
        ids.setflags(write=False)
        object.__setattr__(self, "pixels", pixels)
        object.__setattr__(self, "vertex_ids", ids)

    def __len__(self):
        return len(self.vertex_ids)

    def check_mesh(self, mesh: HeadMesh) -> None:
        if len(self) and self.vertex_ids.max() >= mesh.n_vertices:
            raise ValueError(
                f"landmark vertex id {int(self.vertex_ids.max())} out of range for mesh with {mesh.n_vertices} vertices"
            )


def _hat(w: np.ndarray) -> np.ndarray:
    return np.array([[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]])


_GENERATORS = np.stack([_hat(e) for e in np.eye(3)])


def rotation_matrix_and_jacobian(rotvec) -> tuple[np.ndarray, np.ndarray]:
    """Rodrigues rotation and its derivative.

    Returns ``R`` (3, 3) and ``dR`` (3, 3, 3) with ``dR[i] = dR / d rotvec[i]``.
    """
    r = np.asarray(rotvec, dtype=np.float64).reshape(3)
    theta2 = float(r @ r)
    theta = np.sqrt(theta2)
    K = _hat(r)
    K2 = K @ K
    if theta < 1e-4:
        # series expansions; truncation error is below 1e-17 here
        a = 1.0 - theta2 / 6.0 + theta2**2 / 120.0
        b = 0.5 - theta2 / 24.0 + theta2**2 / 720.0
        da = -1.0 / 3.0 + theta2 / 30.0
        db = -1.0 / 12.0 + theta2 / 180.0
    else:
        s, c = np.sin(theta), np.cos(theta)
        a = s / theta
        b = (1.0 - c) / theta2
        # (1/theta) d/dtheta of a and b
        da = (theta * c - s) / (theta2 * theta)
        db = (theta * s - 2.0 * (1.0 - c)) / (theta2 * theta2)
    R = np.eye(3) + a * K + b * K2
    dR = np.empty((3, 3, 3))
    for i in range(3):
        E = _GENERATORS[i]
        dR[i] = da * r[i] * K + a * E + db * r[i] * K2 + b * (E @ K + K @ E)
    return R, dR


def rotation_matrix(pose) -> np.ndarray:
    """Rotation matrix of a CameraPose (or a bare axis-angle 3-vector)."""
    rotvec = pose.rotation if isinstance(pose, CameraPose) else pose
    return rotation_matrix_and_jacobian(rotvec)[0]


def rotation_angle_between(R1: np.ndarray, R2: np.ndarray) -> float:
    """Geodesic angle in radians between two rotation matrices."""
    c = (np.trace(R1.T @ R2) - 1.0) / 2.0
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


# --------------------------------------------------------------------- OBJ


def load_mesh(path) -> HeadMesh:
    """Read a triangle OBJ with ``v``/``vt``/``f`` records.

    Positions referenced with more than one texture coordinate are split so
    every output vertex carries a single UV.
    """
    positions, texcoords, corners = [], [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            tag = parts[0]
            try:
                if tag == "v":
                    positions.append([float(x) for x in parts[1:4]])
                elif tag == "vt":
                    texcoords.append([float(x) for x in parts[1:3]])
                elif tag == "f":
                    refs = parts[1:]
                    if len(refs) != 3:
                        raise MeshFormatError(f"{path}:{lineno}: non-triangle face with {len(refs)} corners")
                    face = []
                    for ref in refs:
                        fields = ref.split("/")
                        if len(fields) < 2 or not fields[1]:
                            raise MeshFormatError(f"{path}:{lineno}: missing UVs (face corner without a vt index)")
                        face.append((_obj_index(fields[0], len(positions)), _obj_index(fields[1], len(texcoords))))
                    corners.append(face)
            except (ValueError, IndexError) as exc:
                if isinstance(exc, MeshFormatError):
                    raise
                raise MeshFormatError(f"{path}:{lineno}: cannot parse {line.strip()!r}") from exc
    if not texcoords:
        raise MeshFormatError(f"{path}: missing UVs (no vt records)")
    if not corners:
        raise MeshFormatError(f"{path}: no faces")

    positions = np.array(positions, dtype=np.float64)
    texcoords = np.array(texcoords, dtype=np.float64)
    corners = np.array(corners, dtype=np.int64)  # (F, 3, 2) position/uv index pairs
    if corners[..., 0].max() >= len(positions) or corners[..., 1].max() >= len(texcoords):
        raise MeshFormatError(f"{path}: a face references a missing record")
    # output vertices in (position, uv) order, so a file with one uv per
    # position keeps its vertex numbering
    pairs, inverse = np.unique(corners.reshape(-1, 2), axis=0, return_inverse=True)
    faces = inverse.reshape(-1, 3)
    return HeadMesh(positions[pairs[:, 0]], texcoords[pairs[:, 1]], faces)


def _obj_index(token: str, count: int) -> int:
    idx = int(token)
    return idx - 1 if idx > 0 else count + idx


def save_mesh(mesh: HeadMesh, path) -> None:
    """Write ``mesh`` as OBJ; ``repr`` floats make the round trip exact."""
    lines = [f"# {mesh.n_vertices} vertices, {mesh.n_faces} faces"]
    lines += [f"v {x!r} {y!r} {z!r}" for x, y, z in mesh.vertices.tolist()]
    lines += [f"vt {u!r} {v!r}" for u, v in mesh.uvs.tolist()]
    lines += [f"f {a}/{a} {b}/{b} {c}/{c}" for a, b, c in (mesh.faces + 1).tolist()]
    Path(path).write_text("\n".join(lines) + "\n")


# ------------------------------------------------------- structured documents


def load_landmarks(path) -> LandmarkSet:
    doc = json.loads(Path(path).read_text())
    entries = doc["landmarks"]
    return LandmarkSet(
        pixels=[[e["x"], e["y"]] for e in entries],
        vertex_ids=[e["vertex_id"] for e in entries],
        width=int(doc.get("width", 0)),
        height=int(doc.get("height", 0)),
    )


def save_landmarks(landmarks: LandmarkSet, path) -> None:
    doc = {
        "width": landmarks.width,
        "height": landmarks.height,
        "landmarks": [
            {"x": float(x), "y": float(y), "vertex_id": int(i)}
            for (x, y), i in zip(landmarks.pixels, landmarks.vertex_ids)
        ],
    }
    Path(path).write_text(json.dumps(doc, indent=1))


def load_camera(path) -> tuple[Intrinsics, CameraPose]:
    doc = json.loads(Path(path).read_text())
    intr = Intrinsics(float(doc["fx"]), float(doc["fy"]), float(doc["cx"]), float(doc["cy"]))
    return intr, CameraPose(doc.get("rotation", [0, 0, 0]), doc.get("translation", [0, 0, 0]))


def save_camera(intr: Intrinsics, pose: CameraPose, path) -> None:
    doc = {
        "fx": intr.fx,
        "fy": intr.fy,
        "cx": intr.cx,
        "cy": intr.cy,
        "rotation": pose.rotation.tolist(),
        "translation": pose.translation.tolist(),
    }
    Path(path).write_text(json.dumps(doc, indent=1))
