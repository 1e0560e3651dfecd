"""File formats: scene JSON, bases JSON, P5 PGM masks, CSV outputs.

All writers go through an atomic temp-file + rename so a crash never leaves a
half-written artifact.  Scene and bases documents carry a format version that
is checked on load; malformed JSON is reported with the parser's byte offset.
"""

from __future__ import annotations

import csv
import json
import os
import tempfile

import numpy as np

from .adaptive import MaskFrame
from .cameras import CameraRig
from .lie import Pose, Rotation
from .scene import Scene
from .spline import MotionBase, Tracklet2D, Tracklet3D

FORMAT_VERSION = 1


class FormatError(ValueError):
    """A file exists but does not match the expected schema."""


def _atomic_write(path: str, data: bytes):
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _load_json(path: str) -> dict:
    with open(path, "rb") as f:
        raw = f.read()
    try:
        doc = json.loads(raw)
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: invalid JSON at offset {e.pos}: {e.msg}") from e
    if not isinstance(doc, dict):
        raise FormatError(f"{path}: top-level value must be an object")
    version = doc.get("version")
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported format version {version!r}")
    return doc


def _require(doc: dict, key: str, path: str):
    if key not in doc:
        raise FormatError(f"{path}: missing required field {key!r}")
    return doc[key]


# ---------------------------------------------------------------------------
# scene JSON


def _pose_to_rows(p: Pose) -> list:
    return [float(v) for v in p.as_matrix().reshape(-1)]


def _pose_from_rows(rows, path: str) -> Pose:
    m = np.asarray(rows, dtype=float)
    if m.shape != (16,):
        raise FormatError(f"{path}: extrinsic must hold 16 row-major values")
    return Pose.from_matrix(m.reshape(4, 4))


def save_scene(scene: Scene, path: str, mask_files=None):
    doc = {
        "version": FORMAT_VERSION,
        "n_frames": scene.n_frames,
        "times": scene.times.tolist(),
        "tracklets": [
            {
                "positions": tr.positions.tolist(),
                "visibility": [bool(v) for v in tr.visibility],
            }
            for tr in scene.tracklets3d
        ],
        "camera": {
            "fx": scene.camera.fx,
            "fy": scene.camera.fy,
            "cx": scene.camera.cx,
            "cy": scene.camera.cy,
            "width": scene.camera.width,
            "height": scene.camera.height,
            "extrinsics": [_pose_to_rows(p) for p in scene.camera.extrinsics],
        },
    }
    if scene.tracklets2d is not None:
        doc["tracks2d"] = [
            {"pixels": tr.pixels.tolist(), "visibility": [bool(v) for v in tr.visibility]}
            for tr in scene.tracklets2d
        ]
    if mask_files is not None:
        doc["mask_files"] = list(mask_files)
    if scene.ground_truth is not None:
        doc["ground_truth"] = scene.ground_truth.tolist()
    _atomic_write(path, json.dumps(doc).encode())


def load_scene(path: str, load_masks: bool = True) -> Scene:
    doc = _load_json(path)
    n_frames = _require(doc, "n_frames", path)
    cam = _require(doc, "camera", path)
    for key in ("fx", "fy", "cx", "cy", "width", "height", "extrinsics"):
        _require(cam, key, path)
    extr = [_pose_from_rows(e, path) for e in cam["extrinsics"]]
    if len(extr) != n_frames:
        raise FormatError(f"{path}: camera has {len(extr)} extrinsics for {n_frames} frames")
    rig = CameraRig(cam["fx"], cam["fy"], cam["cx"], cam["cy"],
                    int(cam["width"]), int(cam["height"]), tuple(extr))

    tracklets = []
    for i, tr in enumerate(_require(doc, "tracklets", path)):
        pos = np.asarray(tr.get("positions"), dtype=float)
        vis = np.asarray(tr.get("visibility"), dtype=bool)
        if pos.shape != (n_frames, 3) or vis.shape != (n_frames,):
            raise FormatError(f"{path}: tracklet {i} has inconsistent shape")
        tracklets.append(Tracklet3D.from_positions(pos, vis))

    tracks2d = None
    if "tracks2d" in doc:
        tracks2d = [
            Tracklet2D(np.asarray(tr["pixels"], dtype=float),
                       np.asarray(tr["visibility"], dtype=bool))
            for tr in doc["tracks2d"]
        ]

    masks = None
    if load_masks and doc.get("mask_files"):
        root = os.path.dirname(os.path.abspath(path))
        masks = [load_mask(os.path.join(root, f)) for f in doc["mask_files"]]

    gt = np.asarray(doc["ground_truth"], dtype=float) if "ground_truth" in doc else None
    return Scene(tracklets, rig, tracks2d, masks, ground_truth=gt)


# ---------------------------------------------------------------------------
# bases JSON


def save_bases(bases, path: str):
    doc = {
        "version": FORMAT_VERSION,
        "bases": [
            {
                "knots": b.knot_times.tolist(),
                "control_poses": [
                    {
                        "q": [p.rotation.w, p.rotation.x, p.rotation.y, p.rotation.z],
                        "t": p.translation.tolist(),
                    }
                    for p in b.control_poses
                ],
            }
            for b in bases
        ],
    }
    _atomic_write(path, json.dumps(doc).encode())


def load_bases(path: str) -> list:
    doc = _load_json(path)
    out = []
    for i, entry in enumerate(_require(doc, "bases", path)):
        knots = np.asarray(entry.get("knots"), dtype=float)
        poses = []
        for cp in entry.get("control_poses", []):
            q = cp.get("q")
            t = cp.get("t")
            if q is None or t is None or len(q) != 4 or len(t) != 3:
                raise FormatError(f"{path}: base {i} has a malformed control pose")
            poses.append(Pose(Rotation(*[float(v) for v in q]), np.asarray(t, dtype=float)))
        if knots.shape != (len(poses),):
            raise FormatError(f"{path}: base {i} knot count does not match control poses")
        out.append(MotionBase(tuple(poses), knots, None))
    return out


# ---------------------------------------------------------------------------
# dynamic point sets


def save_points(points, path: str):
    doc = {
        "version": FORMAT_VERSION,
        "points": [
            {
                "position": p.position.tolist(),
                "orientation": [p.orientation.w, p.orientation.x,
                                p.orientation.y, p.orientation.z],
                "opacity": p.opacity,
                "t_ref": p.t_ref,
            }
            for p in points
        ],
    }
    _atomic_write(path, json.dumps(doc).encode())


def load_points(path: str) -> list:
    from .deform import DynamicPoint

    doc = _load_json(path)
    out = []
    for i, entry in enumerate(_require(doc, "points", path)):
        try:
            q = entry.get("orientation", [1.0, 0.0, 0.0, 0.0])
            out.append(DynamicPoint(
                np.asarray(entry["position"], dtype=float),
                Rotation(*[float(v) for v in q]),
                float(entry.get("opacity", 1.0)),
                float(entry.get("t_ref", 0.0)),
            ))
        except (KeyError, TypeError) as e:
            raise FormatError(f"{path}: point {i} is malformed") from e
    return out


# ---------------------------------------------------------------------------
# P5 PGM masks


def save_mask(mask: MaskFrame, path: str):
    header = f"P5\n{mask.width} {mask.height}\n255\n".encode()
    body = np.where(mask.grid(), 255, 0).astype(np.uint8).tobytes()
    _atomic_write(path, header + body)


def load_mask(path: str) -> MaskFrame:
    with open(path, "rb") as f:
        raw = f.read()
    fields = []
    pos = 0
    # header: magic, width, height, maxval as whitespace-separated tokens,
    # with '#' comments allowed between them
    while len(fields) < 4 and pos < len(raw):
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        fields.append(raw[start:pos])
    if len(fields) < 4 or fields[0] != b"P5":
        raise FormatError(f"{path}: not a binary (P5) PGM file")
    try:
        width, height, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    except ValueError as e:
        raise FormatError(f"{path}: malformed PGM header") from e
    if maxval != 255:
        raise FormatError(f"{path}: only maxval 255 is supported, got {maxval}")
    pos += 1  # single whitespace byte after the header
    pixels = np.frombuffer(raw[pos:], dtype=np.uint8)
    if pixels.size != width * height:
        raise FormatError(f"{path}: expected {width * height} pixels, found {pixels.size}")
    return MaskFrame(width, height, pixels >= 128)


# ---------------------------------------------------------------------------
# CSV outputs


def save_metrics(metrics, path: str):
    """Rows of `metric,value`; accepts a Metrics object or (name, value) pairs."""
    rows = metrics.as_rows() if hasattr(metrics, "as_rows") else list(metrics)
    out = ["metric,value"]
    out += [f"{name},{value}" for name, value in rows]
    _atomic_write(path, ("\n".join(out) + "\n").encode())


def load_metrics(path: str) -> dict:
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != ["metric", "value"]:
            raise FormatError(f"{path}: expected 'metric,value' header")
        return {name: float(value) for name, value in reader}


LOSS_TRACE_COLUMNS = ("iteration", "total", "fit3d", "track", "arap", "smo")


def save_loss_trace(trace, path: str):
    out = [",".join(LOSS_TRACE_COLUMNS)]
    for row in trace:
        it, rest = row[0], row[1:]
        out.append(",".join([str(int(it))] + [repr(float(v)) for v in rest]))
    _atomic_write(path, ("\n".join(out) + "\n").encode())


def load_loss_trace(path: str) -> list:
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != list(LOSS_TRACE_COLUMNS):
            raise FormatError(f"{path}: unexpected loss-trace header")
        return [(int(r[0]),) + tuple(float(v) for v in r[1:]) for r in reader]
