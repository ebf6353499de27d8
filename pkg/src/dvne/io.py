"""Readers and writers for images, depth/mask maps, cameras and poses."""

from __future__ import annotations

import json
import os
import re
import tempfile
from pathlib import Path

import numpy as np
from PIL import Image

from .deformation import SkeletonPose
from .rendering import Camera


class IngestionError(ValueError):
    pass


def _atomic_write(path, data: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def to_uint8(image):
    return np.clip(np.round(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_png(path, image):
    """Write an (H, W, 3) or (H, W) float image in [0, 1] as 8-bit PNG."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(image)).save(path, format="PNG")


def read_png(path):
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def resize_image(image, width, height):
    """Box-filter resample of an (H, W, C) float image, channel by channel."""
    image = np.asarray(image, dtype=np.float64)
    if image.shape[:2] == (height, width):
        return image
    planes = [np.asarray(Image.fromarray(image[..., c].astype(np.float32), mode="F").resize(
        (width, height), Image.BOX), dtype=np.float64) for c in range(image.shape[2])]
    return np.stack(planes, -1)


def write_pfm(path, data):
    """Little-endian PFM ('Pf' for (H, W), 'PF' for (H, W, 3)), rows stored bottom-up."""
    data = np.asarray(data, dtype="<f4")
    if data.ndim == 2:
        tag = b"Pf"
    elif data.ndim == 3 and data.shape[2] == 3:
        tag = b"PF"
    else:
        raise ValueError(f"PFM needs (H, W) or (H, W, 3), got {data.shape}")
    h, w = data.shape[:2]
    header = tag + b"\n" + f"{w} {h}\n".encode() + b"-1.0\n"
    _atomic_write(path, header + np.ascontiguousarray(data[::-1]).tobytes())


def read_pfm(path):
    raw = Path(path).read_bytes()
    m = re.match(rb"(P[Ff])\s+(\d+)\s+(\d+)\s+(\S+)\s", raw)
    if m is None:
        raise IngestionError(f"{path}: not a PFM file")
    tag, w, h, scale = m.group(1), int(m.group(2)), int(m.group(3)), float(m.group(4))
    dtype = "<f4" if scale < 0 else ">f4"
    shape = (h, w, 3) if tag == b"PF" else (h, w)
    data = np.frombuffer(raw, dtype=dtype, offset=m.end(), count=int(np.prod(shape))).reshape(shape)
    return np.ascontiguousarray(data[::-1]).astype(np.float32)


def camera_to_dict(camera: Camera):
    return {"intrinsics": camera.intrinsics.tolist(), "c2w": camera.c2w.tolist(),
            "width": int(camera.width), "height": int(camera.height), "frame_index": int(camera.frame_index)}


def camera_from_dict(d, source="camera"):
    try:
        return Camera(np.array(d["intrinsics"], dtype=np.float64), np.array(d["c2w"], dtype=np.float64),
                      int(d["width"]), int(d["height"]), int(d.get("frame_index", 0)))
    except (KeyError, TypeError, ValueError) as exc:
        raise IngestionError(f"{source}: invalid camera record ({exc})") from exc


def write_camera(path, camera: Camera):
    _atomic_write(path, json.dumps(camera_to_dict(camera), indent=1).encode())


def read_camera(path):
    return camera_from_dict(json.loads(Path(path).read_text()), str(path))


def pose_to_dict(pose: SkeletonPose, with_parents=False):
    d = {"joints": pose.joints.tolist(), "rotations": pose.rotations.tolist(), "frame_index": int(pose.frame_index)}
    if with_parents:
        d["parents"] = pose.parents.tolist()
    return d


def pose_from_dict(d, parents=None, source="pose"):
    try:
        parents = d.get("parents", parents)
        if parents is None:
            raise KeyError("parents")
        return SkeletonPose(np.array(d["joints"], dtype=np.float64), np.array(d["rotations"], dtype=np.float64),
                            np.array(parents, dtype=int), int(d.get("frame_index", 0)))
    except (KeyError, TypeError, ValueError) as exc:
        raise IngestionError(f"{source}: invalid pose record ({exc})") from exc


def write_pose(path, pose: SkeletonPose, with_parents=False):
    _atomic_write(path, json.dumps(pose_to_dict(pose, with_parents), indent=1).encode())


def read_pose(path, parents=None):
    return pose_from_dict(json.loads(Path(path).read_text()), parents, str(path))
