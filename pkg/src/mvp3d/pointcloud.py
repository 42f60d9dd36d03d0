"""Colored point clouds: PLY I/O, workspace normalization, procedural box scenes
and their perturbations."""

from __future__ import annotations

import copy
import enum
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

TABLE_Z = -0.9
MAX_OBJECTS = 8
WORKSPACE_HALF_EXTENT = 0.9

# stored as 8-bit values so scenes survive the PLY round trip exactly
_PALETTE_U8 = {
    "red": (230, 25, 25),
    "green": (25, 204, 51),
    "blue": (38, 64, 242),
    "yellow": (242, 230, 25),
    "cyan": (25, 217, 230),
    "magenta": (217, 38, 204),
    "orange": (255, 140, 13),
    "white": (242, 242, 242),
}
DEFAULT_PALETTE = {k: tuple(c / 255.0 for c in v) for k, v in _PALETTE_U8.items()}
TABLE_COLOR = (128 / 255.0,) * 3


class PLYError(ValueError):
    pass


class SceneError(RuntimeError):
    pass


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass
class PointCloud:
    points: np.ndarray
    colors: np.ndarray

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        self.colors = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
        if len(self.points) != len(self.colors):
            raise ValueError(
                f"points/colors length mismatch: {len(self.points)} vs {len(self.colors)}"
            )
        if self.colors.size and (self.colors.min() < 0.0 or self.colors.max() > 1.0):
            raise ValueError("colors must lie in [0, 1]")

    def __len__(self):
        return len(self.points)

    def copy(self) -> "PointCloud":
        return PointCloud(self.points.copy(), self.colors.copy())


@dataclass
class BoxObject:
    center: tuple
    half_extents: tuple
    color_name: str
    color_rgb: tuple
    shape: str = "box"

    @property
    def lo(self):
        return np.asarray(self.center) - np.asarray(self.half_extents)

    @property
    def hi(self):
        return np.asarray(self.center) + np.asarray(self.half_extents)


@dataclass
class SceneMeta:
    objects: list
    target_index: int
    seed: int
    density: float = 4000.0
    table: bool = True
    table_z: float = TABLE_Z
    table_color_rgb: tuple = TABLE_COLOR

    @property
    def target(self) -> BoxObject:
        return self.objects[self.target_index]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneMeta":
        d = dict(d)
        objs = [
            BoxObject(
                center=tuple(o["center"]),
                half_extents=tuple(o["half_extents"]),
                color_name=o["color_name"],
                color_rgb=tuple(o["color_rgb"]),
                shape=o.get("shape", "box"),
            )
            for o in d.pop("objects")
        ]
        d["table_color_rgb"] = tuple(d.get("table_color_rgb", TABLE_COLOR))
        return cls(objects=objs, **d)


@dataclass
class CorpusSpec:
    """Bounds for procedural scene generation.

    ``density`` is points per unit of surface area, used for box faces and the
    table plane alike.
    """

    min_objects: int = 1
    max_objects: int = 4
    half_extent_range: tuple = (0.08, 0.22)
    density: float = 4000.0
    palette: dict = field(default_factory=lambda: dict(DEFAULT_PALETTE))
    table: bool = True
    table_color: tuple = TABLE_COLOR
    gap: float = 0.02

    def validate(self):
        if not 1 <= self.min_objects <= self.max_objects <= MAX_OBJECTS:
            raise ValueError(
                f"object count range must satisfy 1 <= min <= max <= {MAX_OBJECTS}, "
                f"got ({self.min_objects}, {self.max_objects})"
            )
        lo, hi = self.half_extent_range
        if not 0 < lo <= hi <= 0.45:
            raise ValueError(f"invalid half_extent_range {self.half_extent_range}")
        if self.density <= 0:
            raise ValueError("density must be positive")
        if len(self.palette) < 6:
            raise ValueError("palette needs at least 6 named colors")


class PerturbationKind(str, enum.Enum):
    OBJECT_COLOR = "object_color"
    OBJECT_SIZE = "object_size"
    DISTRACTOR_COUNT = "distractor_count"
    TABLE_COLOR = "table_color"
    LIGHT_TINT = "light_tint"
    POINT_NOISE = "point_noise"


@dataclass(frozen=True)
class Perturbation:
    kind: PerturbationKind
    magnitude: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "kind", PerturbationKind(self.kind))
        if not 0.0 <= self.magnitude <= 1.0:
            raise ValueError(f"magnitude must be in [0, 1], got {self.magnitude}")


# ---------------------------------------------------------------------------
# PLY

_PLY_PROPS = {"x", "y", "z", "red", "green", "blue"}
_FLOAT_TYPES = {"float", "float32", "double", "float64"}
_UCHAR_TYPES = {"uchar", "uint8"}


def load_ply(path) -> PointCloud:
    """Read an ASCII PLY with per-vertex ``x y z red green blue``.

    Colors are divided by 255. Point order follows the file.
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    lines = raw.split(b"\n")
    if not lines or lines[0].strip() != b"ply":
        raise PLYError("line 1: missing 'ply' magic header")

    n_vertex = None
    props = []
    current = None
    header_end = None
    for i, bline in enumerate(lines[1:], start=2):
        try:
            line = bline.decode("ascii").strip()
        except UnicodeDecodeError:
            raise PLYError(f"line {i}: non-ASCII bytes in header") from None
        if not line or line.startswith("comment") or line.startswith("obj_info"):
            continue
        tok = line.split()
        if tok[0] == "format":
            if len(tok) < 2:
                raise PLYError(f"line {i}: malformed format line")
            if tok[1] != "ascii":
                raise PLYError(f"line {i}: unsupported encoding '{tok[1]}'")
        elif tok[0] == "element":
            if len(tok) != 3:
                raise PLYError(f"line {i}: malformed element line")
            current = tok[1]
            count = int(tok[2])
            if current == "vertex":
                n_vertex = count
            elif count != 0:
                raise PLYError(f"line {i}: unsupported element '{current}'")
        elif tok[0] == "property":
            if current != "vertex":
                raise PLYError(f"line {i}: property outside vertex element")
            if len(tok) != 3 or tok[2] not in _PLY_PROPS:
                raise PLYError(f"line {i}: unknown property '{' '.join(tok[1:])}'")
            name, typ = tok[2], tok[1]
            expected = _FLOAT_TYPES if name in "xyz" else _UCHAR_TYPES
            if typ not in expected:
                raise PLYError(f"line {i}: property '{name}' has unsupported type '{typ}'")
            props.append(name)
        elif tok[0] == "end_header":
            header_end = i
            break
        else:
            raise PLYError(f"line {i}: unexpected header line '{line}'")
    if header_end is None:
        raise PLYError(f"line {len(lines)}: missing end_header")
    if n_vertex is None:
        raise PLYError(f"line {header_end}: no vertex element declared")
    if sorted(props) != sorted(_PLY_PROPS) or len(props) != 6:
        raise PLYError(f"line {header_end}: vertex properties must be x,y,z,red,green,blue")

    body = [(j, l) for j, l in enumerate(lines[header_end:], start=header_end + 1) if l.strip()]
    if len(body) != n_vertex:
        line_no = body[n_vertex][0] if len(body) > n_vertex else header_end + len(body)
        raise PLYError(
            f"line {line_no}: vertex count mismatch, header declares {n_vertex}, "
            f"found {len(body)}"
        )
    order = [props.index(k) for k in ("x", "y", "z", "red", "green", "blue")]
    pts = np.empty((n_vertex, 3))
    cols = np.empty((n_vertex, 3))
    for k, (j, bline) in enumerate(body):
        vals = bline.split()
        if len(vals) != 6:
            raise PLYError(f"line {j}: expected 6 values, got {len(vals)}")
        try:
            row = [vals[o] for o in order]
            pts[k] = [float(v) for v in row[:3]]
            rgb = [int(v) for v in row[3:]]
        except ValueError:
            raise PLYError(f"line {j}: malformed vertex values") from None
        if min(rgb) < 0 or max(rgb) > 255:
            raise PLYError(f"line {j}: color value outside 0..255")
        cols[k] = rgb
    return PointCloud(pts, cols / 255.0)


def save_ply(path, cloud: PointCloud) -> None:
    """Write ``cloud`` as ASCII PLY. Coordinates use shortest round-trip repr."""
    rgb = np.clip(np.floor(cloud.colors * 255.0 + 0.5), 0, 255).astype(int)
    out = [
        "ply",
        "format ascii 1.0",
        f"element vertex {len(cloud)}",
        "property float x",
        "property float y",
        "property float z",
        "property uchar red",
        "property uchar green",
        "property uchar blue",
        "end_header",
    ]
    for p, c in zip(cloud.points.tolist(), rgb.tolist()):
        out.append(f"{p[0]!r} {p[1]!r} {p[2]!r} {c[0]} {c[1]} {c[2]}")
    Path(path).write_text("\n".join(out) + "\n", encoding="ascii")


def normalize_to_workspace(cloud: PointCloud) -> PointCloud:
    """Center the AABB at the origin and scale its largest half-extent to 0.9."""
    if len(cloud) == 0:
        raise ValueError("cannot normalize an empty point cloud")
    lo = cloud.points.min(axis=0)
    hi = cloud.points.max(axis=0)
    center = (lo + hi) / 2.0
    half = float(np.max((hi - lo) / 2.0))
    scale = WORKSPACE_HALF_EXTENT / half if half > 0 else 1.0
    return PointCloud((cloud.points - center) * scale, cloud.colors.copy())


# ---------------------------------------------------------------------------
# scene caching


def save_scene(directory, cloud: PointCloud, meta: SceneMeta) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    stem = directory / f"scene_{meta.seed}"
    save_ply(stem.with_suffix(".ply"), cloud)
    stem.with_suffix(".json").write_text(json.dumps(meta.to_dict(), indent=1))
    return stem.with_suffix(".ply")


def load_scene(ply_path) -> tuple[PointCloud, SceneMeta | None]:
    ply_path = Path(ply_path)
    cloud = load_ply(ply_path)
    meta_path = ply_path.with_suffix(".json")
    meta = None
    if meta_path.exists():
        meta = SceneMeta.from_dict(json.loads(meta_path.read_text()))
    return cloud, meta


# ---------------------------------------------------------------------------
# procedural scenes


def _box_surface(obj: BoxObject, density: float, rng: np.random.Generator):
    c = np.asarray(obj.center, dtype=np.float64)
    h = np.asarray(obj.half_extents, dtype=np.float64)
    chunks = []
    for axis in range(3):
        a, b = [k for k in range(3) if k != axis]
        count = round_half_up(density * 4.0 * h[a] * h[b])
        for sign in (-1.0, 1.0):
            pts = np.empty((count, 3))
            pts[:, axis] = c[axis] + sign * h[axis]
            pts[:, a] = rng.uniform(c[a] - h[a], c[a] + h[a], count)
            pts[:, b] = rng.uniform(c[b] - h[b], c[b] + h[b], count)
            chunks.append(pts)
    pts = np.concatenate(chunks) if chunks else np.zeros((0, 3))
    cols = np.broadcast_to(np.asarray(obj.color_rgb, dtype=np.float64), pts.shape).copy()
    return pts, cols


def build_cloud(meta: SceneMeta) -> PointCloud:
    """Surface-sample every box (and the table plane) of ``meta``.

    Each object draws from its own stream keyed by (seed, index), so adding a
    distractor leaves the existing objects' points untouched.
    """
    pts, cols = [], []
    if meta.table:
        rng = np.random.default_rng([meta.seed & (2**64 - 1), 2])
        n = round_half_up(meta.density * 4.0)
        tp = np.empty((n, 3))
        tp[:, :2] = rng.uniform(-1.0, 1.0, (n, 2))
        tp[:, 2] = meta.table_z
        pts.append(tp)
        cols.append(np.broadcast_to(np.asarray(meta.table_color_rgb, float), tp.shape))
    for i, obj in enumerate(meta.objects):
        rng = np.random.default_rng([meta.seed & (2**64 - 1), 1, i])
        p, c = _box_surface(obj, meta.density, rng)
        pts.append(p)
        cols.append(c)
    if not pts:
        return PointCloud(np.zeros((0, 3)), np.zeros((0, 3)))
    return PointCloud(np.concatenate(pts), np.concatenate(cols))


def _overlaps(lo, hi, placed, gap):
    for plo, phi in placed:
        if np.all(lo[:2] < phi[:2] + gap) and np.all(plo[:2] < hi[:2] + gap):
            return True
    return False


def _place_box(rng, spec: CorpusSpec, placed, table_z, max_tries=100):
    lo_h, hi_h = spec.half_extent_range
    for _ in range(max_tries):
        h = rng.uniform(lo_h, hi_h, 3)
        lim = WORKSPACE_HALF_EXTENT - h[:2]
        xy = rng.uniform(-lim, lim)
        z = table_z + h[2] if spec.table else rng.uniform(-1.0 + h[2], 1.0 - h[2])
        center = np.array([xy[0], xy[1], z])
        lo, hi = center - h, center + h
        if not _overlaps(lo, hi, placed, spec.gap):
            return center, h
    return None


def gen_scene(seed: int, spec: CorpusSpec | None = None) -> tuple[PointCloud, SceneMeta]:
    """Generate a deterministic scene of non-overlapping colored boxes.

    Args:
        seed: 64-bit scene seed; the scene is a pure function of (seed, spec).
        spec: generation bounds; defaults to ``CorpusSpec()``.

    Returns:
        The sampled point cloud and its ``SceneMeta``.
    """
    spec = spec or CorpusSpec()
    spec.validate()
    rng = np.random.default_rng([seed & (2**64 - 1), 0])
    n_obj = int(rng.integers(spec.min_objects, spec.max_objects + 1))
    names = list(spec.palette)
    if n_obj <= len(names):
        color_idx = rng.permutation(len(names))[:n_obj]
    else:
        color_idx = rng.integers(0, len(names), n_obj)

    placed, objects = [], []
    for k in range(n_obj):
        res = _place_box(rng, spec, placed, TABLE_Z)
        if res is None:
            continue
        center, h = res
        placed.append((center - h, center + h))
        name = names[color_idx[k]]
        objects.append(
            BoxObject(
                center=tuple(center.tolist()),
                half_extents=tuple(h.tolist()),
                color_name=name,
                color_rgb=tuple(float(v) for v in spec.palette[name]),
            )
        )
    if not objects:
        raise SceneError(f"seed {seed}: no object could be placed")
    target = int(rng.integers(0, len(objects)))
    meta = SceneMeta(
        objects=objects,
        target_index=target,
        seed=int(seed),
        density=float(spec.density),
        table=bool(spec.table),
        table_z=TABLE_Z,
        table_color_rgb=tuple(float(v) for v in spec.table_color),
    )
    return build_cloud(meta), meta


# ---------------------------------------------------------------------------
# perturbations


def apply_perturbation(
    cloud: PointCloud,
    meta: SceneMeta,
    kind: Perturbation,
    seed: int,
    palette: dict | None = None,
) -> tuple[PointCloud, SceneMeta]:
    """Apply one perturbation deterministically in ``seed``.

    Geometry and color edits to objects or the table rebuild the cloud from the
    edited ``SceneMeta``; ``light_tint`` and ``point_noise`` act on the given
    cloud directly.
    """
    if not isinstance(kind, Perturbation):
        kind = Perturbation(kind)
    m = kind.magnitude
    if m == 0.0:
        return cloud.copy(), copy.deepcopy(meta)
    rng = np.random.default_rng([seed & (2**64 - 1), 7, list(PerturbationKind).index(kind.kind)])
    meta = copy.deepcopy(meta)
    k = kind.kind

    if k is PerturbationKind.LIGHT_TINT:
        tint = 1.0 + m * (rng.uniform(0.5, 1.5, 3) - 1.0)
        return PointCloud(cloud.points.copy(), np.clip(cloud.colors * tint, 0.0, 1.0)), meta

    if k is PerturbationKind.POINT_NOISE:
        jitter = rng.uniform(-0.02 * m, 0.02 * m, cloud.points.shape)
        pts = np.clip(cloud.points + jitter, -1.0, 1.0)
        return PointCloud(pts, cloud.colors.copy()), meta

    if k is PerturbationKind.OBJECT_COLOR:
        for i, obj in enumerate(meta.objects):
            if i == meta.target_index:
                continue
            new = rng.uniform(0.0, 1.0, 3)
            obj.color_rgb = tuple(((1 - m) * np.asarray(obj.color_rgb) + m * new).tolist())

    elif k is PerturbationKind.TABLE_COLOR:
        new = rng.uniform(0.0, 1.0, 3)
        meta.table_color_rgb = tuple(
            ((1 - m) * np.asarray(meta.table_color_rgb) + m * new).tolist()
        )

    elif k is PerturbationKind.OBJECT_SIZE:
        obj = meta.target
        delta = float(rng.choice([-0.5, 0.5]))
        h = np.asarray(obj.half_extents) * (1.0 + m * delta)
        h = np.minimum(h, 1.0)
        c = np.asarray(obj.center, dtype=np.float64)
        if meta.table:
            c[2] = meta.table_z + h[2]
        c = np.clip(c, -1.0 + h, 1.0 - h)
        obj.center = tuple(c.tolist())
        obj.half_extents = tuple(h.tolist())

    elif k is PerturbationKind.DISTRACTOR_COUNT:
        palette = palette or DEFAULT_PALETTE
        n_new = min(round_half_up(3 * m), MAX_OBJECTS - len(meta.objects))
        spec = CorpusSpec(table=meta.table, palette=palette)
        placed = [(o.lo, o.hi) for o in meta.objects]
        names = [n for n in palette if n != meta.target.color_name]
        for _ in range(n_new):
            res = _place_box(rng, spec, placed, meta.table_z)
            if res is None:
                continue
            center, h = res
            placed.append((center - h, center + h))
            name = names[int(rng.integers(0, len(names)))]
            meta.objects.append(
                BoxObject(
                    center=tuple(center.tolist()),
                    half_extents=tuple(h.tolist()),
                    color_name=name,
                    color_rgb=tuple(float(v) for v in palette[name]),
                )
            )
    return build_cloud(meta), meta
