"""Point files, scene tiling, training patches and synthetic scenes."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

CLASS_NAMES = (
    "powerline",
    "low_veg",
    "imp_surf",
    "car",
    "fence_hedge",
    "roof",
    "facade",
    "shrub",
    "tree",
)
N_CLASSES = len(CLASS_NAMES)
DEFAULT_COLUMNS = "x y z intensity returns label"
_KNOWN_COLUMNS = {"x", "y", "z", "intensity", "returns", "label", "pred", "skip", "_"}


class PointFileError(ValueError):
    pass


@dataclass
class PointCloud:
    """Columnar point store. ``labels`` uses ``n_classes`` as the unlabeled sentinel."""

    xyz: np.ndarray
    intensity: np.ndarray
    returns: np.ndarray | None = None
    labels: np.ndarray | None = None
    n_classes: int = N_CLASSES

    def __post_init__(self):
        self.xyz = np.asarray(self.xyz, dtype=np.float64).reshape(-1, 3)
        n = len(self.xyz)
        self.intensity = np.asarray(self.intensity, dtype=np.float64).reshape(-1)
        if len(self.intensity) != n:
            raise ValueError("intensity length does not match xyz")
        if self.returns is not None:
            self.returns = np.asarray(self.returns, dtype=np.int64).reshape(-1)
            if len(self.returns) != n:
                raise ValueError("returns length does not match xyz")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
            if len(self.labels) != n:
                raise ValueError("labels length does not match xyz")
            if self.labels.size and (self.labels.min() < 0 or self.labels.max() > self.n_classes):
                raise ValueError("label out of range")
        if not np.all(np.isfinite(self.xyz)):
            raise ValueError("non-finite coordinates")

    def __len__(self):
        return len(self.xyz)

    @property
    def unlabeled(self) -> int:
        return self.n_classes

    def subset(self, idx) -> "PointCloud":
        idx = np.asarray(idx, dtype=np.int64)
        return PointCloud(
            self.xyz[idx],
            self.intensity[idx],
            None if self.returns is None else self.returns[idx],
            None if self.labels is None else self.labels[idx],
            self.n_classes,
        )

    def class_counts(self) -> np.ndarray:
        if self.labels is None:
            raise ValueError("cloud has no labels")
        lab = self.labels[self.labels < self.n_classes]
        return np.bincount(lab, minlength=self.n_classes)


# ---------------------------------------------------------------- file I/O


def _parse_columns(columns: str | Sequence[str]) -> list[str]:
    cols = columns.split() if isinstance(columns, str) else list(columns)
    unknown = set(cols) - _KNOWN_COLUMNS
    if unknown:
        raise PointFileError(f"unknown column names: {sorted(unknown)}")
    missing = {"x", "y", "z"} - set(cols)
    if missing:
        raise PointFileError(f"column spec lacks mandatory columns {sorted(missing)}")
    return cols


def load_points(path, columns: str | Sequence[str] = DEFAULT_COLUMNS, n_classes: int = N_CLASSES,
                delimiter: str | None = None) -> PointCloud:
    """Read a whitespace-separated point file.

    Rows may carry fewer trailing columns than ``columns`` names (e.g. test files
    without labels) as long as every row has the same count and x, y, z are
    present. Labels that do not parse, or fall outside ``[0, n_classes)``,
    become the unlabeled sentinel ``n_classes``.
    """
    cols = _parse_columns(columns)
    rows = []
    width = None
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.strip()
            if not text or text.startswith("#"):
                continue
            fields = text.split(delimiter)
            if width is None:
                width = len(fields)
                if width > len(cols):
                    raise PointFileError(f"{path}:{lineno}: {width} fields but only {len(cols)} columns named")
                present = cols[:width]
                if not {"x", "y", "z"} <= set(present):
                    raise PointFileError(f"{path}:{lineno}: missing mandatory column among x, y, z")
            elif len(fields) != width:
                raise PointFileError(f"{path}:{lineno}: expected {width} fields, found {len(fields)}")
            rows.append((lineno, fields))
    present = cols[:width] if width else cols

    n = len(rows)
    data = {name: [] for name in present}
    for lineno, fields in rows:
        for name, value in zip(present, fields):
            if name in ("skip", "_"):
                continue
            if name == "label" or name == "pred":
                try:
                    lab = int(float(value))
                except ValueError:
                    lab = n_classes
                data[name].append(lab if 0 <= lab < n_classes else n_classes)
                continue
            try:
                v = float(value)
            except ValueError:
                raise PointFileError(f"{path}:{lineno}: cannot parse {name}={value!r}") from None
            if name in ("x", "y", "z") and not math.isfinite(v):
                raise PointFileError(f"{path}:{lineno}: non-finite {name}")
            data[name].append(v)

    xyz = np.column_stack([data["x"], data["y"], data["z"]]) if n else np.zeros((0, 3))
    intensity = np.asarray(data["intensity"]) if "intensity" in data else np.zeros(n)
    returns = np.asarray(data["returns"], dtype=np.int64) if "returns" in data else None
    labels = np.asarray(data["label"], dtype=np.int64) if "label" in data else None
    return PointCloud(xyz, intensity, returns, labels, n_classes)


def load_label_column(path, columns: str | Sequence[str] = DEFAULT_COLUMNS + " pred",
                      column: str = "pred", n_classes: int = N_CLASSES) -> np.ndarray:
    """Read one integer column (``pred`` or ``label``) from a point file."""
    cols = _parse_columns(columns)
    pos = cols.index(column)
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.strip()
            if not text or text.startswith("#"):
                continue
            fields = text.split()
            if pos >= len(fields):
                raise PointFileError(f"{path}:{lineno}: no {column} column")
            try:
                lab = int(float(fields[pos]))
            except ValueError:
                lab = n_classes
            out.append(lab if 0 <= lab < n_classes else n_classes)
    return np.asarray(out, dtype=np.int64)


def save_points(path, cloud: PointCloud, pred: np.ndarray | None = None) -> Path:
    """Write ``x y z intensity returns label [pred]``; missing columns are written as 0 / sentinel."""
    path = Path(path)
    n = len(cloud)
    returns = cloud.returns if cloud.returns is not None else np.ones(n, dtype=np.int64)
    labels = cloud.labels if cloud.labels is not None else np.full(n, cloud.unlabeled)
    cols = [cloud.xyz[:, 0], cloud.xyz[:, 1], cloud.xyz[:, 2], cloud.intensity, returns, labels]
    fmt = ["%.3f", "%.3f", "%.3f", "%.4f", "%d", "%d"]
    if pred is not None:
        pred = np.asarray(pred)
        if len(pred) != n:
            raise ValueError("prediction length does not match cloud")
        cols.append(pred)
        fmt.append("%d")
    table = np.column_stack(cols) if n else np.zeros((0, len(cols)))
    np.savetxt(path, table, fmt=fmt, delimiter=" ")
    return path


# ---------------------------------------------------------------- tiling


@dataclass
class Block:
    origin: np.ndarray
    extent: np.ndarray
    point_indices: np.ndarray


def _axis_cells(values, lo, grid, min_fraction):
    n_cells = int(math.floor((values.max() - lo) / grid)) + 1
    cell = np.minimum(np.floor((values - lo) / grid).astype(np.int64), n_cells - 1)
    last_width = values.max() - (lo + (n_cells - 1) * grid)
    if n_cells > 1 and last_width < min_fraction * grid:
        cell[cell == n_cells - 1] = n_cells - 2
        n_cells -= 1
    return cell, n_cells


def tile_blocks(cloud: PointCloud, grid: float = 30.0, min_fraction: float = 0.5) -> list[Block]:
    """Split the cloud into ``grid`` x ``grid`` xy blocks.

    The last column / row of cells is merged into its neighbor when its
    width is below ``min_fraction * grid``. Empty cells are omitted.
    """
    if len(cloud) == 0:
        raise ValueError("cannot tile an empty cloud")
    if not grid > 0 or not 0 <= min_fraction < 1:
        raise ValueError("grid must be > 0 and 0 <= min_fraction < 1")
    xy = cloud.xyz[:, :2]
    lo = xy.min(axis=0)
    hi = xy.max(axis=0)
    cx, nx = _axis_cells(xy[:, 0], lo[0], grid, min_fraction)
    cy, ny = _axis_cells(xy[:, 1], lo[1], grid, min_fraction)
    key = cx * ny + cy
    order = np.argsort(key, kind="stable")
    keys, starts = np.unique(key[order], return_index=True)
    bounds = np.r_[starts, len(order)]
    blocks = []
    for t, k in enumerate(keys):
        ix, iy = divmod(int(k), ny)
        origin = lo + grid * np.array([ix, iy], dtype=np.float64)
        ext = np.array([
            grid if ix < nx - 1 else hi[0] - origin[0],
            grid if iy < ny - 1 else hi[1] - origin[1],
        ])
        blocks.append(Block(origin, np.maximum(ext, 0.0), np.sort(order[bounds[t]:bounds[t + 1]])))
    return blocks


# ---------------------------------------------------------------- training patches


@dataclass
class Normalization:
    offset: np.ndarray
    intensity_min: float
    intensity_range: float


@dataclass
class Patch:
    points: PointCloud
    source_indices: np.ndarray
    source_block: int | None = None
    centered: bool = False
    norm: Normalization | None = None
    original_xyz: np.ndarray | None = None
    original_intensity: np.ndarray | None = None

    def __len__(self):
        return len(self.points)


def sample_training_patch(cloud: PointCloud, rng: np.random.Generator,
                          cuboid: Sequence[float] = (30.0, 30.0, 40.0), n: int = 8192,
                          source_block: int | None = None) -> Patch:
    """Pick a random point, take the cuboid centered on it, sample ``n`` points.

    With at least ``n`` points inside, sampling is without replacement.
    Otherwise every point is kept once and the remainder is drawn with
    replacement, then the whole patch is shuffled.
    """
    if len(cloud) == 0:
        raise ValueError("cannot sample a patch from an empty cloud")
    half = np.asarray(cuboid, dtype=np.float64) / 2.0
    center = cloud.xyz[rng.integers(len(cloud))]
    inside = np.flatnonzero(np.all(np.abs(cloud.xyz - center) <= half, axis=1))
    if len(inside) >= n:
        chosen = rng.choice(inside, size=n, replace=False)
    else:
        extra = rng.choice(inside, size=n - len(inside), replace=True)
        chosen = rng.permutation(np.concatenate([inside, extra]))
    return Patch(cloud.subset(chosen), chosen, source_block)


def apply_dropout(patch: Patch, ratio: float, rng: np.random.Generator) -> Patch:
    """Keep ``round(N * (1 - ratio))`` points chosen uniformly without replacement."""
    if not 0 <= ratio < 1:
        raise ValueError("dropout ratio must be in [0, 1)")
    n = len(patch)
    keep_n = int(round(n * (1.0 - ratio)))
    if keep_n >= n:
        return patch
    keep = np.sort(rng.choice(n, size=keep_n, replace=False))
    return replace(
        patch,
        points=patch.points.subset(keep),
        source_indices=patch.source_indices[keep],
        original_xyz=None if patch.original_xyz is None else patch.original_xyz[keep],
        original_intensity=None if patch.original_intensity is None else patch.original_intensity[keep],
    )


def center_normalize(patch: Patch) -> Patch:
    """Move the xy centroid to the origin, the lowest z to 0, intensity to [0, 1]."""
    if len(patch) == 0:
        raise ValueError("empty patch")
    xyz = patch.points.xyz
    offset = np.array([xyz[:, 0].mean(), xyz[:, 1].mean(), xyz[:, 2].min()])
    inten = patch.points.intensity
    imin = float(inten.min())
    irange = float(inten.max() - imin)
    scaled = (inten - imin) / irange if irange > 0 else np.zeros_like(inten)
    pts = replace(patch.points, xyz=xyz - offset, intensity=scaled)
    return replace(
        patch,
        points=pts,
        centered=True,
        norm=Normalization(offset, imin, irange),
        original_xyz=xyz.copy(),
        original_intensity=inten.copy(),
    )


def denormalize(patch: Patch) -> PointCloud:
    """Invert :func:`center_normalize` arithmetically (not via the stored originals)."""
    if patch.norm is None:
        return patch.points
    norm = patch.norm
    xyz = patch.points.xyz + norm.offset
    inten = patch.points.intensity * norm.intensity_range + norm.intensity_min
    return replace(patch.points, xyz=xyz, intensity=inten)


def network_inputs(cloud: PointCloud) -> tuple[np.ndarray, np.ndarray]:
    """Coordinates and the per-point feature matrix [intensity, z] fed to the network."""
    return cloud.xyz, np.column_stack([cloud.intensity, cloud.xyz[:, 2]])


def prepare_block(cloud: PointCloud) -> Patch:
    """Normalize a whole block for inference (no sampling, no dropout)."""
    return center_normalize(Patch(cloud, np.arange(len(cloud))))


# ---------------------------------------------------------------- synthetic scenes


class SceneSpecError(ValueError):
    pass


def _rect(values, name):
    r = [float(v) for v in values]
    if len(r) != 4 or r[2] <= r[0] or r[3] <= r[1]:
        raise SceneSpecError(f"{name}: rectangle must be [x0, y0, x1, y1] with x1 > x0, y1 > y0")
    return r


def _in_rects(xy, rects):
    hit = np.zeros(len(xy), dtype=bool)
    for x0, y0, x1, y1 in rects:
        hit |= (xy[:, 0] >= x0) & (xy[:, 0] <= x1) & (xy[:, 1] >= y0) & (xy[:, 1] <= y1)
    return hit


def _sample_plane(prim, count, rng, occluders):
    region = _rect(prim["region"], "plane.region")
    exclude = [_rect(r, "plane.exclude") for r in prim.get("exclude", [])] + occluders
    out = np.empty((0, 2))
    tries = 0
    while len(out) < count:
        need = count - len(out)
        xy = np.column_stack([
            rng.uniform(region[0], region[2], 2 * need + 8),
            rng.uniform(region[1], region[3], 2 * need + 8),
        ])
        xy = xy[~_in_rects(xy, exclude)]
        out = np.vstack([out, xy[:need]])
        tries += 1
        if tries > 200:
            raise SceneSpecError("plane region is fully excluded")
    z = np.full(count, float(prim.get("z", 0.0)))
    return np.column_stack([out, z])


def _sample_box_top(prim, count, rng):
    x0, y0, x1, y1 = _rect(prim["footprint"], "box.footprint")
    h = float(prim["height"])
    if h <= 0:
        raise SceneSpecError("box.height must be > 0")
    pitch = float(prim.get("pitch", 0.0))
    x = rng.uniform(x0, x1, count)
    y = rng.uniform(y0, y1, count)
    # gable along x: ridge at the footprint's y-center
    ridge = (y0 + y1) / 2
    z = h + pitch * ((y1 - y0) / 2 - np.abs(y - ridge))
    return np.column_stack([x, y, z])


def _sample_walls(prim, count, rng):
    x0, y0, x1, y1 = _rect(prim["footprint"], "walls.footprint")
    h = float(prim["height"])
    if h <= 0:
        raise SceneSpecError("walls.height must be > 0")
    base = float(prim.get("base", 0.0))
    w, d = x1 - x0, y1 - y0
    s = rng.uniform(0, 2 * (w + d), count)
    x = np.where(s < w, x0 + s, np.where(s < w + d, x1, np.where(s < 2 * w + d, x1 - (s - w - d), x0)))
    y = np.where(s < w, y0, np.where(s < w + d, y0 + (s - w), np.where(s < 2 * w + d, y1, y1 - (s - 2 * w - d))))
    z = base + rng.uniform(0, h, count)
    return np.column_stack([x, y, z])


def _sample_line(prim, count, rng):
    p0 = np.asarray(prim["start"], dtype=np.float64)
    p1 = np.asarray(prim["end"], dtype=np.float64)
    if p0.shape != (3,) or p1.shape != (3,):
        raise SceneSpecError("line.start and line.end must be 3-vectors")
    sag = float(prim.get("sag", 0.0))
    t = rng.uniform(0, 1, count)
    pts = p0 + t[:, None] * (p1 - p0)
    pts[:, 2] -= sag * 4 * t * (1 - t)
    return pts


def _sample_fence(prim, count, rng):
    p0 = np.asarray(prim["start"], dtype=np.float64)
    p1 = np.asarray(prim["end"], dtype=np.float64)
    if p0.shape != (2,) or p1.shape != (2,):
        raise SceneSpecError("fence.start and fence.end must be 2-vectors")
    h = float(prim["height"])
    thick = float(prim.get("thickness", 0.4))
    if h <= 0 or thick < 0:
        raise SceneSpecError("fence.height must be > 0")
    t = rng.uniform(0, 1, count)
    xy = p0 + t[:, None] * (p1 - p0)
    direction = p1 - p0
    normal = np.array([-direction[1], direction[0]]) / max(np.linalg.norm(direction), 1e-9)
    xy += normal * rng.uniform(-thick / 2, thick / 2, count)[:, None]
    z = rng.uniform(0, h, count)
    return np.column_stack([xy, z])


def _sample_clump(prim, count, rng):
    c = np.asarray(prim["center"], dtype=np.float64)
    r = np.asarray(prim["radii"], dtype=np.float64)
    if c.shape != (3,) or r.shape != (3,) or np.any(r <= 0):
        raise SceneSpecError("clump.center and clump.radii must be 3-vectors with positive radii")
    v = rng.standard_normal((count, 3))
    v /= np.maximum(np.linalg.norm(v, axis=1, keepdims=True), 1e-12)
    shell = rng.uniform(0.6, 1.0, count) ** (1 / 3)
    pts = c + v * shell[:, None] * r
    pts[:, 2] = np.maximum(pts[:, 2], float(prim.get("floor", 0.0)))
    return pts


_SAMPLERS = {
    "plane": _sample_plane,
    "box": _sample_box_top,
    "walls": _sample_walls,
    "line": _sample_line,
    "fence": _sample_fence,
    "clump": _sample_clump,
}


def synth_scene(config: dict, rng: np.random.Generator) -> PointCloud:
    """Build a labeled cloud from a primitive list.

    ``config`` keys: ``primitives`` (list of dicts with ``type``, ``class``,
    ``count``, geometry fields and optional ``intensity: [mean, std]``),
    optional ``noise`` (coordinate jitter std, meters) and ``n_classes``.
    Boxes with ``occlude: true`` (the default) remove ground points under
    their footprint.
    """
    prims = config.get("primitives")
    if not prims or len(prims) < 1:
        raise SceneSpecError("scene spec needs a non-empty 'primitives' list")
    n_classes = int(config.get("n_classes", N_CLASSES))
    noise = float(config.get("noise", 0.03))
    if noise < 0:
        raise SceneSpecError("noise must be >= 0")
    occluders = []
    for i, p in enumerate(prims):
        if p.get("type") == "box" and p.get("occlude", True):
            if "footprint" not in p:
                raise SceneSpecError(f"primitive {i} (box): missing footprint")
            occluders.append(_rect(p["footprint"], "box.footprint"))
    parts, labels, inten = [], [], []
    for i, prim in enumerate(prims):
        kind = prim.get("type")
        if kind not in _SAMPLERS:
            raise SceneSpecError(f"primitive {i}: unknown type {kind!r}")
        cls = int(prim.get("class", -1))
        if not 0 <= cls < n_classes:
            raise SceneSpecError(f"primitive {i}: class must be in [0, {n_classes})")
        count = int(prim.get("count", 0))
        if count < 0:
            raise SceneSpecError(f"primitive {i}: count must be >= 0")
        if count == 0:
            continue
        try:
            if kind == "plane":
                pts = _sample_plane(prim, count, rng, occluders)
            else:
                pts = _SAMPLERS[kind](prim, count, rng)
        except (KeyError, TypeError) as exc:
            raise SceneSpecError(f"primitive {i} ({kind}): missing or invalid field {exc}") from None
        mean, std = prim.get("intensity", [0.5, 0.05])
        parts.append(pts)
        labels.append(np.full(count, cls))
        inten.append(rng.normal(float(mean), float(std), count))
    xyz = np.vstack(parts)
    if noise > 0:
        xyz = xyz + rng.normal(0.0, noise, xyz.shape)
    returns = np.ones(len(xyz), dtype=np.int64)
    return PointCloud(xyz, np.concatenate(inten), returns, np.concatenate(labels), n_classes)


# class id -> (intensity mean, std)
URBAN_INTENSITY = {
    0: (0.30, 0.05),
    1: (0.60, 0.05),
    2: (0.15, 0.04),
    3: (0.85, 0.05),
    4: (0.40, 0.05),
    5: (0.45, 0.05),
    6: (0.70, 0.05),
    7: (0.55, 0.05),
    8: (0.50, 0.05),
}
URBAN_FRACTIONS = (0.006, 0.24, 0.24, 0.02, 0.03, 0.2, 0.05, 0.06, 0.154)


@dataclass
class UrbanLayout:
    """Parameters for :func:`urban_scene_config`."""

    extent: tuple[float, float] = (120.0, 120.0)
    n_points: int = 50_000
    fractions: Sequence[float] = field(default_factory=lambda: URBAN_FRACTIONS)
    n_buildings: int = 6
    n_trees: int = 14
    n_shrubs: int = 18
    n_cars: int = 8
    n_fences: int = 5
    n_lines: int = 2
    noise: float = 0.03


def urban_scene_config(layout: UrbanLayout, rng: np.random.Generator) -> dict:
    """Procedurally lay out a nine-class urban scene as a primitive list.

    Per-class point counts are a multinomial draw from ``layout.fractions``;
    within a class, counts are split across its primitives by size.
    """
    fr = np.asarray(layout.fractions, dtype=np.float64)
    if len(fr) != N_CLASSES or np.any(fr < 0) or fr.sum() <= 0:
        raise SceneSpecError("fractions must be nine non-negative values")
    counts = rng.multinomial(layout.n_points, fr / fr.sum())
    W, H = layout.extent

    roads = [[0.0, H * 0.45, W, H * 0.45 + 10.0], [W * 0.45, 0.0, W * 0.45 + 10.0, H]]
    buildings = []
    attempts = 0
    while len(buildings) < layout.n_buildings and attempts < 500:
        attempts += 1
        w, d = rng.uniform(10, 22, 2)
        x0, y0 = rng.uniform(2, W - w - 2), rng.uniform(2, H - d - 2)
        fp = [x0, y0, x0 + w, y0 + d]
        grown = [fp[0] - 4, fp[1] - 4, fp[2] + 4, fp[3] + 4]
        if any(_overlap(grown, r) for r in roads + [b["footprint"] for b in buildings]):
            continue
        buildings.append({"footprint": fp, "height": float(rng.uniform(6, 14)), "pitch": float(rng.uniform(0, 0.4))})

    def free_spot(margin):
        for _ in range(1000):
            x, y = rng.uniform(margin, W - margin), rng.uniform(margin, H - margin)
            box = [x - margin, y - margin, x + margin, y + margin]
            if not any(_overlap(box, r) for r in roads + [b["footprint"] for b in buildings]):
                return x, y
        return rng.uniform(margin, W - margin), rng.uniform(margin, H - margin)

    prims = []

    def split(cls, items, sizes):
        total = counts[cls]
        if not items:
            return
        sizes = np.asarray(sizes, dtype=np.float64)
        alloc = np.floor(total * sizes / sizes.sum()).astype(int)
        alloc[: total - alloc.sum()] += 1
        for item, c in zip(items, alloc):
            item.update({"class": cls, "count": int(c), "intensity": list(URBAN_INTENSITY[cls])})
            prims.append(item)

    split(2, [{"type": "plane", "region": r} for r in roads], [1.0 for _ in roads])
    split(1, [{"type": "plane", "region": [0.0, 0.0, W, H], "exclude": roads}], [1.0])
    split(5, [{"type": "box", **b} for b in buildings],
          [(b["footprint"][2] - b["footprint"][0]) * (b["footprint"][3] - b["footprint"][1]) for b in buildings])
    split(6, [{"type": "walls", "footprint": b["footprint"], "height": b["height"]} for b in buildings],
          [b["height"] * ((b["footprint"][2] - b["footprint"][0]) + (b["footprint"][3] - b["footprint"][1])) for b in buildings])

    trees = []
    for _ in range(layout.n_trees):
        x, y = free_spot(4.0)
        r = float(rng.uniform(2.0, 3.5))
        trees.append({"type": "clump", "center": [x, y, float(rng.uniform(6.0, 9.0))],
                      "radii": [r, r, r * 0.9], "floor": 2.5})
    split(8, trees, [t["radii"][0] ** 2 for t in trees])

    shrubs = []
    for _ in range(layout.n_shrubs):
        x, y = free_spot(2.0)
        r = float(rng.uniform(0.8, 1.5))
        shrubs.append({"type": "clump", "center": [x, y, 0.6], "radii": [r, r, 0.7], "floor": 0.0})
    split(7, shrubs, [s["radii"][0] ** 2 for s in shrubs])

    cars = []
    for _ in range(layout.n_cars):
        road = roads[int(rng.integers(len(roads)))]
        along_x = (road[2] - road[0]) > (road[3] - road[1])
        if along_x:
            x = rng.uniform(road[0] + 3, road[2] - 6)
            y = rng.uniform(road[1] + 1, road[3] - 3)
            fp = [x, y, x + 4.5, y + 1.8]
        else:
            x = rng.uniform(road[0] + 1, road[2] - 3)
            y = rng.uniform(road[1] + 3, road[3] - 6)
            fp = [x, y, x + 1.8, y + 4.5]
        cars.append({"type": "box", "footprint": fp, "height": 1.5, "occlude": False})
    split(3, cars, [1.0 for _ in cars])

    fences = []
    for _ in range(layout.n_fences):
        x, y = free_spot(3.0)
        ang = rng.uniform(0, np.pi)
        length = rng.uniform(8, 16)
        end = [x + length * np.cos(ang), y + length * np.sin(ang)]
        fences.append({"type": "fence", "start": [x, y], "end": end, "height": float(rng.uniform(1.0, 1.8))})
    split(4, fences, [1.0 for _ in fences])

    lines = []
    for i in range(layout.n_lines):
        y = H * (0.2 + 0.6 * (i + 0.5) / layout.n_lines)
        z = float(rng.uniform(14, 17))
        lines.append({"type": "line", "start": [0.0, y, z], "end": [W, y + rng.uniform(-5, 5), z], "sag": 1.0})
    split(0, lines, [1.0 for _ in lines])

    return {"primitives": prims, "noise": layout.noise, "n_classes": N_CLASSES}


def _overlap(a, b):
    return not (a[2] < b[0] or b[2] < a[0] or a[3] < b[1] or b[3] < a[1])


def load_scene_spec(path) -> dict:
    """Read a YAML scene spec: either ``primitives`` or ``layout: urban`` with options."""
    import yaml

    with open(path) as fh:
        spec = yaml.safe_load(fh) or {}
    if not isinstance(spec, dict):
        raise SceneSpecError("scene spec must be a mapping")
    return spec


def scene_from_spec(spec: dict, seed: int) -> PointCloud:
    rng = np.random.default_rng(seed)
    if spec.get("layout") == "urban":
        opts = {k: v for k, v in spec.items() if k != "layout"}
        if "extent" in opts:
            opts["extent"] = tuple(opts["extent"])
        config = urban_scene_config(UrbanLayout(**opts), rng)
        return synth_scene(config, rng)
    return synth_scene(spec, rng)
