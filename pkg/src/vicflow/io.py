"""On-disk formats: annotations, descriptors, model checkpoints, CSV dumps.

Annotations are line-delimited JSON, one object per frame:

    {"frame_id": 0,
     "points": [{"x": 0.5, "y": 0.5, "label": "inflow"}, ...],
     "masks": [[{"x": 0.1, "y": 0.1}, {"x": 0.3, "y": 0.1}, ...], ...],
     "ids": [17, ...]}            # optional

Coordinates are normalized; masks are polygon vertex lists and any point
inside (or on the edge of) a mask polygon is flagged masked on ingestion.
Model checkpoints are a small binary: magic, version, a JSON header with
tensor names/shapes and the run configuration, then raw little-endian
float64 data.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .core import LABELS, DescriptorSet, FramePoints, ModelParams, validate

__all__ = [
    "point_in_polygon",
    "save_annotations",
    "ingest",
    "save_descriptors",
    "load_descriptors",
    "save_model",
    "load_model",
    "write_prior_csv",
    "write_attention_csv",
    "write_curve_csv",
    "rects_to_polygons",
]

_MODEL_MAGIC = b"VFM1"


class DataFormatError(ValueError):
    """Raised for unparseable or inconsistent on-disk data."""


def point_in_polygon(point, polygon) -> bool:
    """Even-odd test with inclusive edges."""
    x, y = float(point[0]), float(point[1])
    pts = [(float(px), float(py)) for px, py in polygon]
    k = len(pts)
    inside = False
    for i in range(k):
        x1, y1 = pts[i]
        x2, y2 = pts[(i + 1) % k]
        # on-segment check (inclusive boundary)
        cross = (x2 - x1) * (y - y1) - (y2 - y1) * (x - x1)
        if abs(cross) < 1e-15 and min(x1, x2) - 1e-15 <= x <= max(x1, x2) + 1e-15 and min(y1, y2) - 1e-15 <= y <= max(y1, y2) + 1e-15:
            return True
        if (y1 > y) != (y2 > y):
            xin = x1 + (y - y1) * (x2 - x1) / (y2 - y1)
            if x < xin:
                inside = not inside
    return inside


def rects_to_polygons(rects) -> list[list[tuple[float, float]]]:
    return [[(x0, y0), (x1, y0), (x1, y1), (x0, y1)] for x0, y0, x1, y1 in rects]


def save_annotations(path, frames, masks=None) -> None:
    """Write frames as JSONL; ``masks`` (polygons) apply to every frame."""
    polys = masks or []
    with open(path, "w") as fh:
        for frame in frames:
            record = {
                "frame_id": int(frame.frame_id),
                "points": [
                    {"x": float(x), "y": float(y), "label": lab}
                    for (x, y), lab in zip(frame.points, frame.labels)
                ],
                "masks": [[{"x": float(px), "y": float(py)} for px, py in poly] for poly in polys],
            }
            if frame.identity is not None:
                record["ids"] = [int(i) for i in frame.identity]
            fh.write(json.dumps(record) + "\n")


def ingest(path) -> list[FramePoints]:
    """Parse an annotation file into frames, flagging points inside masks."""
    frames: list[FramePoints] = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataFormatError(f"parse-error: {path} line {lineno}: {exc}") from None
            try:
                pts = [(float(p["x"]), float(p["y"])) for p in record["points"]]
                labels = [p["label"] for p in record["points"]]
                polys = [[(float(v["x"]), float(v["y"])) for v in poly] for poly in record.get("masks", [])]
                frame_id = int(record["frame_id"])
            except (KeyError, TypeError, ValueError) as exc:
                raise DataFormatError(f"parse-error: {path} line {lineno}: {exc}") from None
            for lab in labels:
                if lab not in LABELS:
                    raise DataFormatError(f"unknown-label: {path} line {lineno}: {lab!r}")
            for poly in polys:
                if len(poly) < 3:
                    raise DataFormatError(f"malformed-polygon: {path} line {lineno}: needs >= 3 vertices")
            masked = [any(point_in_polygon(p, poly) for poly in polys) for p in pts]
            ids = record.get("ids")
            frame = FramePoints(
                frame_id=frame_id,
                points=np.array(pts, dtype=np.float64).reshape(-1, 2),
                labels=tuple(labels),
                masked=np.array(masked, dtype=bool),
                identity=None if ids is None else np.asarray(ids, dtype=np.int64),
            )
            problem = validate(frame)
            if problem is not None:
                raise DataFormatError(f"{problem} ({path} line {lineno})")
            frames.append(frame)
    if not frames:
        raise DataFormatError(f"parse-error: {path}: no frames")
    return frames


def save_descriptors(path, descriptors: list[DescriptorSet]) -> None:
    arrays = {"patch_shape": np.asarray(descriptors[0].patch_shape, dtype=np.int64)}
    for k, dset in enumerate(descriptors):
        arrays[f"features_{k:05d}"] = dset.features
    np.savez(path, **arrays)


def load_descriptors(path, frames: list[FramePoints]) -> list[DescriptorSet]:
    """Load per-frame features and attach the frames' positions."""
    with np.load(path) as data:
        patch = tuple(int(v) for v in data["patch_shape"])
        out = []
        for k, frame in enumerate(frames):
            key = f"features_{k:05d}"
            if key not in data:
                raise DataFormatError(f"descriptor-missing: no features for frame {k}")
            feats = data[key]
            if feats.shape[0] != frame.count:
                raise DataFormatError(
                    f"descriptor-count-mismatch: frame {k} has {frame.count} points, {feats.shape[0]} features"
                )
            out.append(DescriptorSet(features=feats, positions=frame.points, patch_shape=patch))
    return out


def save_model(path, params: ModelParams, run_config: dict | None = None) -> None:
    names = []
    blobs = []
    for name, arr in params.named_arrays():
        names.append({"name": name, "shape": list(arr.shape)})
        blobs.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    header = {
        "format": "vicflow-model",
        "version": 1,
        "dtype": "<f8",
        "model": {
            "d": params.d,
            "patch_shape": list(params.patch_shape),
            "heads": params.heads,
            "head_mode": params.head_mode,
            "phi_activation": params.phi_activation,
            "lam": params.lam,
            "head_layers": len(params.head),
        },
        "tensors": names,
        "run_config": run_config or {},
    }
    blob = json.dumps(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MODEL_MAGIC)
        fh.write(struct.pack("<I", 1))
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for b in blobs:
            fh.write(b)


def load_model(path) -> tuple[ModelParams, dict]:
    with open(path, "rb") as fh:
        if fh.read(4) != _MODEL_MAGIC:
            raise DataFormatError("missing-model: bad magic")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != 1:
            raise DataFormatError(f"missing-model: unsupported version {version}")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        tensors = {}
        for spec in header["tensors"]:
            shape = tuple(spec["shape"])
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(8 * count)
            if len(buf) != 8 * count:
                raise DataFormatError("missing-model: truncated tensor data")
            tensors[spec["name"]] = np.frombuffer(buf, dtype="<f8").astype(np.float64).reshape(shape)
    meta = header["model"]
    head = []
    for i in range(meta["head_layers"]):
        head.append((tensors[f"head_{i}_w"], tensors[f"head_{i}_b"]))
    params = ModelParams(
        d=meta["d"],
        patch_shape=tuple(meta["patch_shape"]),
        heads=meta["heads"],
        head_mode=meta["head_mode"],
        phi_activation=meta["phi_activation"],
        lam=meta["lam"],
        w_q=tensors["w_q"],
        w_k=tensors["w_k"],
        w_v=tensors["w_v"],
        theta_raw=tensors["theta_raw"],
        phi_w1=tensors["phi_w1"],
        phi_w2=tensors["phi_w2"],
        g_w=tensors["g_w"],
        g_b=tensors["g_b"],
        delta_w=tensors["delta_w"],
        delta_b=tensors["delta_b"],
        conv_w=tensors["conv_w"],
        conv_b=tensors["conv_b"],
        alpha_w=tensors["alpha_w"],
        alpha_b=tensors["alpha_b"],
        beta_w=tensors["beta_w"],
        beta_b=tensors["beta_b"],
        head=head,
        embed_w=tensors["embed_w"],
        embed_b=tensors["embed_b"],
    )
    params.validate()
    return params, header.get("run_config", {})


def write_prior_csv(path, prior) -> None:
    """Dump (dx, dy, gamma) triples of a frame pair's prior field."""
    disp = prior.displacement.reshape(-1, 2)
    gamma = prior.prior_cost.data.reshape(-1)
    with open(path, "w") as fh:
        fh.write("dx,dy,gamma\n")
        for (dx, dy), g in zip(disp, gamma):
            fh.write(f"{dx!r},{dy!r},{g!r}\n")


def write_attention_csv(path, attention_map, modulated_map, gamma_full) -> None:
    """Dump the full attention map; without gating, modulated equals plain."""
    a = np.asarray(attention_map)
    mod = np.asarray(modulated_map) if modulated_map is not None else a
    g = np.asarray(gamma_full)
    with open(path, "w") as fh:
        fh.write("row_idx,col_idx,attn,modulated_attn,gamma\n")
        for r in range(a.shape[0]):
            for c in range(a.shape[1]):
                fh.write(f"{r},{c},{a[r, c]!r},{mod[r, c]!r},{g[r, c]!r}\n")


def write_curve_csv(path, losses) -> None:
    with open(path, "w") as fh:
        fh.write("epoch,loss\n")
        for i, v in enumerate(losses):
            fh.write(f"{i},{v!r}\n")


def data_videos(data_dir) -> list[Path]:
    """Annotation files in a data directory, sorted by name."""
    root = Path(data_dir)
    if not root.is_dir():
        raise DataFormatError(f"missing-data: {data_dir} is not a directory")
    files = sorted(root.glob("*.jsonl"))
    if not files:
        raise DataFormatError(f"missing-data: no .jsonl files under {data_dir}")
    return files
