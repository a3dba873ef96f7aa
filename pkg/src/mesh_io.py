"""
Mesh ingestion: OFF parsing, area-weighted surface sampling, normalization.
"""

from collections.abc import Iterator
from pathlib import Path

import numpy as np
import trimesh

from src.entities import PointCloud
from src.errors import DegenerateMeshError, MeshParseError

_NORM_EPS = 1e-12


def _content_lines(text: str) -> Iterator[tuple[int, list[str]]]:
    """Yield (line number, tokens) for every non-empty, non-comment line"""
    for number, raw in enumerate(text.splitlines(), start=1):
        tokens = raw.split("#", 1)[0].split()
        if tokens:
            yield number, tokens


def _parse_ints(path: Path, line: int, tokens: list[str]) -> list[int]:
    try:
        return [int(token) for token in tokens]
    except ValueError as exc:
        raise MeshParseError(path, line, f"expected integers, got {tokens}") from exc


def parse_mesh_file(path: Path | str) -> tuple[np.ndarray, np.ndarray]:
    """Parse an OFF mesh into a ``(V, 3)`` vertex array and ``(F, 3)`` triangles.

    Polygonal faces are fanned into triangles. Headers where the counts are
    glued to the keyword (``OFF490 312 0``), a known ModelNet quirk, are
    accepted.
    """
    path = Path(path)
    lines = _content_lines(path.read_text(encoding="utf-8", errors="replace"))

    def next_line(expected: str) -> tuple[int, list[str]]:
        try:
            return next(lines)
        except StopIteration:
            raise MeshParseError(
                path, last_line + 1, f"unexpected end of file, expected {expected}"
            ) from None

    last_line = 0
    last_line, header = next_line("OFF header")
    if not header[0].startswith("OFF"):
        raise MeshParseError(path, last_line, f"expected 'OFF' header, got {header[0]!r}")

    count_tokens = header[1:]
    glued = header[0][3:]
    if glued:
        count_tokens = [glued, *count_tokens]
    if not count_tokens:
        last_line, count_tokens = next_line("vertex/face counts")
    counts = _parse_ints(path, last_line, count_tokens)
    if len(counts) < 2 or counts[0] < 0 or counts[1] < 0:
        raise MeshParseError(path, last_line, f"invalid counts {count_tokens}")
    num_vertices, num_faces = counts[0], counts[1]

    vertices = np.empty((num_vertices, 3), dtype=np.float64)
    for i in range(num_vertices):
        last_line, tokens = next_line(f"vertex {i}")
        if len(tokens) < 3:
            raise MeshParseError(path, last_line, "vertex needs 3 coordinates")
        try:
            vertices[i] = [float(token) for token in tokens[:3]]
        except ValueError as exc:
            raise MeshParseError(
                path, last_line, f"non-numeric vertex coordinates {tokens[:3]}"
            ) from exc
        if not np.isfinite(vertices[i]).all():
            raise MeshParseError(path, last_line, "vertex coordinates must be finite")

    triangles: list[tuple[int, int, int]] = []
    for i in range(num_faces):
        last_line, tokens = next_line(f"face {i}")
        values = _parse_ints(path, last_line, tokens)
        size = values[0]
        if size < 3 or len(values) < size + 1:
            raise MeshParseError(path, last_line, f"malformed face {tokens}")
        indices = values[1 : size + 1]
        for index in indices:
            if not 0 <= index < num_vertices:
                raise MeshParseError(
                    path,
                    last_line,
                    f"face index {index} out of range for {num_vertices} vertices",
                )
        anchor = indices[0]
        triangles.extend(
            (anchor, indices[j], indices[j + 1]) for j in range(1, size - 1)
        )

    faces = np.asarray(triangles, dtype=np.int64).reshape(-1, 3)
    return vertices, faces


def sample_surface_points(
    vertices: np.ndarray, faces: np.ndarray, n_points: int, rng_seed: int
) -> tuple[np.ndarray, np.ndarray]:
    """Area-weighted uniform surface sampling.

    Returns the sampled points and, for each point, the index of the face it
    was drawn from.
    """
    if n_points < 1:
        raise ValueError(f"n_points must be >= 1, got {n_points}")
    faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    mesh = trimesh.Trimesh(
        vertices=np.asarray(vertices, dtype=np.float64),
        faces=faces,
        process=False,
        validate=False,
    )
    total_area = float(mesh.area) if len(faces) else 0.0
    if not np.isfinite(total_area) or total_area <= 0.0:
        raise DegenerateMeshError(
            f"mesh with {len(faces)} faces has zero total area; nothing to sample"
        )
    points, face_index = trimesh.sample.sample_surface(mesh, n_points, seed=rng_seed)
    return np.asarray(points), np.asarray(face_index)


def sample_point_cloud(
    vertices: np.ndarray, faces: np.ndarray, n_points: int, rng_seed: int
) -> PointCloud:
    """Sample ``n_points`` points uniformly over the mesh surface"""
    points, _ = sample_surface_points(vertices, faces, n_points, rng_seed)
    return PointCloud(points=points)


def normalize_cloud(cloud: PointCloud) -> PointCloud:
    """Center on the centroid and scale the farthest point to unit distance.

    A cloud whose points all coincide maps to all zeros.
    """
    points = cloud.points.astype(np.float64)
    centered = points - points.mean(axis=0)
    radius = float(np.linalg.norm(centered, axis=1).max())
    if radius < _NORM_EPS:
        return PointCloud(points=np.zeros_like(points))
    return PointCloud(points=centered / radius)
