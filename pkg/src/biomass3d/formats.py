"""On-disk formats: binary PPM images, NFFB feature blobs, ASCII PLY,
scene manifests and the CSV fixtures used by the command line."""
from __future__ import annotations

import csv
import json
import struct
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .pointdata import PointCloud
from .synthscene import Camera, SceneError

FEATURE_MAGIC = b"NFFB"
FEATURE_VERSION = 1
MANIFEST_VERSION = 1


class FormatError(ValueError):
    pass


def write_ppm(path, rgb: np.ndarray) -> None:
    """Binary P6, 8 bits per channel; input values in [0, 1]."""
    img = np.clip(np.round(np.asarray(rgb) * 255.0), 0, 255).astype(np.uint8)
    h, w, _ = img.shape
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + img.tobytes())


def read_ppm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while end < len(data) and not data[end:end + 1].isspace():
            end += 1
        tokens.append(data[pos:end])
        pos = end
    if tokens[0] != b"P6":
        raise FormatError(f"{path}: not a binary PPM (P6)")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise FormatError(f"{path}: only 8-bit PPM is supported")
    raw = data[pos + 1:pos + 1 + w * h * 3]
    if len(raw) != w * h * 3:
        raise FormatError(f"{path}: truncated pixel data")
    return np.frombuffer(raw, dtype=np.uint8).reshape(h, w, 3).astype(np.float64) / 255.0


def write_features(path, fmap: np.ndarray) -> None:
    """NFFB blob: magic, u32 version, u32 height, u32 width, u32 channels, f32 LE data."""
    fmap = np.asarray(fmap)
    h, w, c = fmap.shape
    header = FEATURE_MAGIC + struct.pack("<IIII", FEATURE_VERSION, h, w, c)
    Path(path).write_bytes(header + fmap.astype("<f4").tobytes())


def read_features(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != FEATURE_MAGIC:
        raise FormatError(f"{path}: bad magic, not an NFFB feature blob")
    if len(data) < 20:
        raise FormatError(f"{path}: truncated header")
    version, h, w, c = struct.unpack("<IIII", data[4:20])
    if version != FEATURE_VERSION:
        raise FormatError(f"{path}: unsupported NFFB version {version}")
    n = h * w * c
    if len(data) != 20 + 4 * n:
        raise FormatError(f"{path}: expected {n} values")
    return np.frombuffer(data[20:], dtype="<f4").reshape(h, w, c).astype(np.float64)


def write_ply(path, pc: PointCloud, names: Optional[Sequence[str]] = None) -> None:
    names = list(names if names is not None else (pc.feature_names or [f"f_{i}" for i in range(pc.f)]))
    lines = ["ply", "format ascii 1.0", f"element vertex {pc.n}"]
    lines += [f"property float {n}" for n in ["x", "y", "z"] + names]
    lines.append("end_header")
    lines += [" ".join("%.9g" % v for v in row) for row in pc.points]
    Path(path).write_text("\n".join(lines) + "\n")


# -- manifest ----------------------------------------------------------------


def camera_to_json(cam: Camera) -> dict:
    return {"c2w": [float(v) for v in cam.c2w.reshape(-1)], "fx": cam.fx, "fy": cam.fy,
            "cx": cam.cx, "cy": cam.cy, "width": cam.width, "height": cam.height}


def camera_from_json(d: dict) -> Camera:
    return Camera(np.asarray(d["c2w"], dtype=np.float64).reshape(4, 4), float(d["fx"]), float(d["fy"]),
                  float(d["cx"]), float(d["cy"]), int(d["width"]), int(d["height"]))


def load_manifest(path) -> dict:
    """Parse a scene manifest, resolving and checking every referenced file.

    Returned dict carries ``cameras`` (Camera objects), ``images`` and
    ``features`` (arrays), ``heldout`` (same triple for held-out views) and
    ``sparse_points`` (n x 3).
    """
    from .pointdata import load_point_cloud

    path = Path(path)
    doc = json.loads(path.read_text())
    if doc.get("version") != MANIFEST_VERSION:
        raise FormatError(f"{path}: unsupported manifest version {doc.get('version')!r}")
    root = path.parent

    def resolve(rel):
        p = root / rel
        if not p.exists():
            raise FileNotFoundError(f"missing file referenced by manifest: {p}")
        return p

    def views(entries):
        cams, imgs, feats = [], [], []
        for e in entries:
            try:
                cams.append(camera_from_json(e))
            except SceneError as exc:
                raise FormatError(f"{path}: {exc}") from None
            imgs.append(read_ppm(resolve(e["image"])))
            feats.append(read_features(resolve(e["features"])))
        return cams, imgs, feats

    out = dict(doc)
    out["cameras"], out["images"], out["features"] = views(doc["cameras"])
    out["heldout"] = views(doc.get("heldout_cameras", []))
    out["sparse_points"] = load_point_cloud(resolve(doc["sparse_points"])).xyz
    return out


# -- CSV ---------------------------------------------------------------------


def read_csv_rows(path, required: Sequence[str]) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise FormatError(f"{path}: empty file, header row is mandatory")
        missing = [c for c in required if c not in reader.fieldnames]
        if missing:
            raise FormatError(f"{path}: row 1: missing column(s) {', '.join(missing)}")
        rows = []
        for rowno, row in enumerate(reader, start=2):
            if None in row or any(row[c] in (None, "") for c in required):
                raise FormatError(f"{path}: row {rowno}: wrong number of fields")
            rows.append(row)
    return rows


def parse_float(row: dict, key: str, path, rowno: int) -> float:
    try:
        return float(row[key])
    except ValueError:
        raise FormatError(f"{path}: row {rowno}: column {key!r} is not a number") from None


def write_csv(path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([("%.10g" % v) if isinstance(v, float) else v for v in r])
