"""Orthographic five-view renderer producing 10-channel virtual images.

Channel layout of a view (stored as an ``(H, W, 10)`` array, row 0 at v = -1):
0-2 RGB, 3 depth, 4-6 world xyz, 7-9 camera-frame (u, v, d).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .pointcloud import PointCloud

N_CHANNELS = 10
VIEW_ORDER = ("top", "front", "back", "left", "right")

RGB = slice(0, 3)
DEPTH = 3
WORLD = slice(4, 7)
CAMERA = slice(7, 10)


@dataclass(frozen=True)
class VirtualCamera:
    id: str
    center: tuple
    view_dir: tuple
    u_axis: tuple
    v_axis: tuple


_CAMERA_TABLE = {
    "top": ((0, 0, 1), (0, 0, -1), (1, 0, 0), (0, 1, 0)),
    "front": ((0, -1, 0), (0, 1, 0), (1, 0, 0), (0, 0, 1)),
    "back": ((0, 1, 0), (0, -1, 0), (-1, 0, 0), (0, 0, 1)),
    "left": ((-1, 0, 0), (1, 0, 0), (0, -1, 0), (0, 0, 1)),
    "right": ((1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, 0, 1)),
}


def standard_cameras() -> list[VirtualCamera]:
    return [
        VirtualCamera(
            name, *(tuple(float(c) for c in vec) for vec in _CAMERA_TABLE[name])
        )
        for name in VIEW_ORDER
    ]


def project(points: np.ndarray, cam: VirtualCamera, W: int, H: int):
    """Return (row, col, u, v, d) for each point under ``cam``."""
    u = points @ np.asarray(cam.u_axis)
    v = points @ np.asarray(cam.v_axis)
    d = (points @ np.asarray(cam.view_dir) + 1.0) / 2.0
    col = np.clip(np.floor((u + 1.0) / 2.0 * W), 0, W - 1).astype(np.int64)
    row = np.clip(np.floor((v + 1.0) / 2.0 * H), 0, H - 1).astype(np.int64)
    return row, col, u, v, d


def background(W: int, H: int) -> np.ndarray:
    img = np.zeros((H, W, N_CHANNELS))
    img[..., DEPTH] = 1.0
    return img


def render_view(cloud: PointCloud, cam: VirtualCamera, W: int, H: int) -> np.ndarray:
    """Z-buffered nearest-pixel splat of ``cloud`` into one ``(H, W, 10)`` view.

    The nearest point (smallest normalized depth) wins each pixel; equal depths
    go to the lower point index.
    """
    if W < 1 or H < 1:
        raise ValueError(f"image size must be positive, got W={W}, H={H}")
    img = background(W, H)
    if len(cloud) == 0:
        return img
    row, col, u, v, d = project(cloud.points, cam, W, H)
    pix = row * W + col
    idx = np.arange(len(pix))
    order = np.lexsort((idx, d, pix))
    first = np.ones(len(order), dtype=bool)
    first[1:] = pix[order][1:] != pix[order][:-1]
    win = order[first]
    r, c = row[win], col[win]
    img[r, c, RGB] = cloud.colors[win]
    img[r, c, DEPTH] = d[win]
    img[r, c, WORLD] = cloud.points[win]
    img[r, c, 7] = u[win]
    img[r, c, 8] = v[win]
    img[r, c, 9] = d[win]
    return img


def render_all(cloud: PointCloud, W: int, H: int) -> np.ndarray:
    """Render the five standard views; returns ``(5, H, W, 10)`` in VIEW_ORDER."""
    return np.stack([render_view(cloud, cam, W, H) for cam in standard_cameras()])


# ---------------------------------------------------------------------------
# debug dumps


def _to_u8(a, lo, hi):
    return np.clip(np.floor((a - lo) / (hi - lo) * 255.0 + 0.5), 0, 255).astype(np.uint8)


def write_ppm(path, rgb: np.ndarray, lo=0.0, hi=1.0) -> None:
    """Binary P6 image; ``rgb`` is (H, W, 3) with row 0 at v = -1 (flipped on write)."""
    data = _to_u8(rgb[::-1], lo, hi)
    h, w = data.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(data).tobytes())


def write_pgm16(path, plane: np.ndarray) -> None:
    data = np.clip(np.floor(plane[::-1] * 65535.0 + 0.5), 0, 65535).astype(">u2")
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        fh.write(np.ascontiguousarray(data).tobytes())


def read_ppm(path) -> np.ndarray:
    """Inverse of write_ppm up to 8-bit quantization; returns (H, W, 3) in [0, 1]."""
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    w, h = (int(t) for t in parts[1].split())
    data = np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w, 3)
    return data[::-1].astype(np.float64) / 255.0


def dump_views(views: np.ndarray, out_dir, scene: str) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for name, img in zip(VIEW_ORDER, views):
        for tag, sl, lo in (("rgb", RGB, 0.0), ("xyz", WORLD, -1.0), ("cam", CAMERA, -1.0)):
            p = out_dir / f"{scene}_{name}_{tag}.ppm"
            write_ppm(p, img[..., sl], lo=lo, hi=1.0)
            written.append(p)
        p = out_dir / f"{scene}_{name}_depth.pgm"
        write_pgm16(p, img[..., DEPTH])
        written.append(p)
    return written
