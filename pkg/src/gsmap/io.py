"""On-disk formats: scene and map JSON, GeoJSON vectors and PGM masks.

Masks are binary PGM (P5, maxval 255) with row 0 at ``y_min``. Floats are
written with Python's shortest round-trip repr, so JSON round-trips exactly.
"""

from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, ShapeError
from .gaussian import DEFAULT_MAX_INSTANCES, ClassId, GaussianMap, MapElement
from .raster import DensityMask, RasterGrid
from .scene import GroundTruthElement, Scene
from .vector import Polyline, resample_uniform, vectorize

SCENE_FORMAT = "gsmap.scene"
MAP_FORMAT = "gsmap.map"
FORMAT_VERSION = 1


def write_json(path, doc) -> None:
    text = json.dumps(doc, indent=2, sort_keys=False, allow_nan=False)
    Path(path).write_text(text + "\n", encoding="utf-8")


def read_json(path):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def quantize(values: np.ndarray) -> np.ndarray:
    """Map [0, 1] densities to 8-bit grey levels, ``round(255 * v)``."""
    v = np.clip(np.asarray(values, dtype=float), 0.0, 1.0)
    return np.rint(255.0 * v).astype(np.uint8)


def write_pgm(path, values: np.ndarray) -> None:
    img = quantize(values)
    if img.ndim != 2:
        raise ShapeError(f"PGM images are 2-D, got shape {img.shape}")
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(img).tobytes())


def read_pgm(path) -> np.ndarray:
    """Read an 8-bit P5 image back as floats in [0, 1]."""
    data = Path(path).read_bytes()
    tokens = []
    pos = 0
    # header: magic, width, height, maxval separated by whitespace (comments allowed)
    while len(tokens) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    pos += 1
    if tokens[0] != b"P5":
        raise ConfigurationError(f"{path}: not a binary PGM")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise ConfigurationError(f"{path}: only maxval 255 is supported")
    pixels = np.frombuffer(data, dtype=np.uint8, count=w * h, offset=pos)
    return pixels.reshape(h, w).astype(float) / 255.0


def grid_from_dict(doc: dict) -> RasterGrid:
    return RasterGrid(**{k: doc[k] for k in RasterGrid().to_dict() if k in doc})


# -- scenes ------------------------------------------------------------------


def mask_filename(stem: str, k: int) -> str:
    return f"{stem}_mask_{k:02d}.pgm"


def save_scene(scene: Scene, path) -> list[Path]:
    """Write ``path`` plus one PGM per element next to it; returns all written paths."""
    path = Path(path)
    stem = path.stem
    written = []
    elements = []
    for k, e in enumerate(scene):
        name = mask_filename(stem, k)
        write_pgm(path.parent / name, e.mask.values)
        written.append(path.parent / name)
        elements.append({
            "class": e.class_id.label,
            "closed": e.closed,
            "half_width": e.half_width,
            "n_points": e.n,
            "vertices": e.vertices.points.tolist(),
            "mask": name,
        })
    doc = {
        "format": SCENE_FORMAT,
        "version": FORMAT_VERSION,
        "seed": scene.seed,
        "grid": scene.grid.to_dict(),
        "elements": elements,
    }
    write_json(path, doc)
    return [path] + written


def load_scene(path) -> Scene:
    path = Path(path)
    doc = read_json(path)
    if doc.get("format") != SCENE_FORMAT:
        raise ConfigurationError(f"{path}: not a scene file")
    grid = grid_from_dict(doc["grid"])
    elements = []
    for item in doc["elements"]:
        verts = Polyline(np.array(item["vertices"], dtype=float), bool(item["closed"]))
        values = read_pgm(path.parent / item["mask"])
        mask = DensityMask(grid, (values > 0.5).astype(float))
        n = int(item.get("n_points", 20))
        elements.append(GroundTruthElement(
            ClassId.parse(item["class"]), verts, resample_uniform(verts, n), mask, float(item["half_width"])
        ))
    return Scene(grid, tuple(elements), doc.get("seed"))


# -- Gaussian maps -------------------------------------------------------------


def map_to_dict(m: GaussianMap) -> dict:
    return {
        "format": MAP_FORMAT,
        "version": FORMAT_VERSION,
        "max_instances": m.max_instances,
        "elements": [
            {
                "class": e.class_id.label,
                "closed": bool(e.closed),
                "score": e.scores.tolist(),
                "gaussians": e.params.tolist(),
            }
            for e in m
        ],
    }


def map_from_dict(doc: dict) -> GaussianMap:
    if doc.get("format") != MAP_FORMAT:
        raise ConfigurationError("not a Gaussian map document")
    elements = tuple(
        MapElement(np.array(item["gaussians"], dtype=float), ClassId.parse(item["class"]),
                   bool(item["closed"]), np.array(item["score"], dtype=float))
        for item in doc["elements"]
    )
    return GaussianMap(elements, int(doc.get("max_instances", DEFAULT_MAX_INSTANCES)))


def save_map(m: GaussianMap, path) -> None:
    write_json(path, map_to_dict(m))


def load_map(path) -> GaussianMap:
    return map_from_dict(read_json(path))


# -- vectors -----------------------------------------------------------------------


def vectors_to_geojson(m: GaussianMap) -> dict:
    """One GeoJSON feature per element: LineString when open, Polygon when closed."""
    features = []
    for k, e in enumerate(m):
        pts = vectorize(e).points.tolist()
        if e.closed:
            geometry = {"type": "Polygon", "coordinates": [pts + [pts[0]]]}
        else:
            geometry = {"type": "LineString", "coordinates": pts}
        features.append({
            "type": "Feature",
            "geometry": geometry,
            "properties": {"index": k, "class": e.class_id.label, "closed": bool(e.closed), "score": e.score},
        })
    return {"type": "FeatureCollection", "features": features}


def load_vectors(path) -> list[tuple[ClassId, Polyline, float]]:
    """Read a vectors file back as ``(class, polyline, score)`` per feature."""
    doc = read_json(path)
    if doc.get("type") != "FeatureCollection":
        raise ConfigurationError(f"{path}: not a GeoJSON FeatureCollection")
    out = []
    for feat in doc["features"]:
        geom = feat["geometry"]
        props = feat["properties"]
        if geom["type"] == "Polygon":
            ring = np.array(geom["coordinates"][0], dtype=float)
            poly = Polyline(ring[:-1], closed=True)
        elif geom["type"] == "LineString":
            poly = Polyline(np.array(geom["coordinates"], dtype=float), closed=False)
        else:
            raise ConfigurationError(f"unsupported geometry {geom['type']!r}")
        out.append((ClassId.parse(props["class"]), poly, float(props.get("score", 1.0))))
    return out


def ensure_dir(path) -> Path:
    """Create ``path`` if needed and check it is writable (raises OSError otherwise)."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    if not os.access(path, os.W_OK):
        raise PermissionError(f"directory {path} is not writable")
    return path
