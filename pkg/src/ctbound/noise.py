"""Photon-limited noise, synthetic datasets and image file formats.

Noisy images are kept as raw photon counts together with their photon level
``alpha``; a pixel of clean intensity ``v`` in ``[0, 1]`` receives
``Poisson(alpha * v)`` photons.  Every generator is a pure function of its
arguments and a master seed; sample ``i`` draws from
``SeedSequence([seed, i])`` so samples can be produced in any order.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .exceptions import ImageIOError, InputError, InvalidParameterError
from .foj import (TWO_PI, JunctionParams, ParamsGrid, _wedge_labels, estimate_grid_colors,
                  extract_patch_array, patch_coordinates, render_patch_color)

GENERATOR_VERSION = "ctbound-synth/2"


@dataclass
class PhotonImage:
    """Photon counts ``(H, W, k)`` (integers) and the photon level that produced them."""

    counts: np.ndarray
    alpha: float

    def __post_init__(self):
        counts = np.asarray(self.counts)
        if counts.ndim == 2:
            counts = counts[:, :, None]
        self.counts = counts
        if not self.alpha > 0:
            raise InvalidParameterError(f"photon level must be positive, got {self.alpha}")

    def normalized(self):
        return self.counts.astype(np.float64) / self.alpha


def sample_rng(seed, index):
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(index)]))


def _check_alpha_range(alpha_range):
    lo, hi = alpha_range
    if not (0 < lo <= hi < np.inf):
        raise InvalidParameterError(f"invalid photon-level range {alpha_range}")


def poisson_noise(clean, alpha, seed=None, rng=None):
    """Independent Poisson counts with mean ``alpha * clean`` per pixel."""
    clean = np.asarray(clean, dtype=np.float64)
    if not np.all(np.isfinite(clean)) or clean.min(initial=0) < 0 or clean.max(initial=0) > 1:
        raise InputError("clean image values must lie in [0, 1]")
    if not alpha > 0:
        raise InvalidParameterError(f"photon level must be positive, got {alpha}")
    if rng is None:
        if seed is None:
            raise InvalidParameterError("poisson_noise needs a seed or a generator")
        rng = np.random.default_rng(seed)
    counts = rng.poisson(alpha * clean).astype(np.uint32)
    return PhotonImage(counts, float(alpha))


# ------------------------------------------------------------------ patches


@dataclass
class PatchSample:
    """One synthetic patch: noisy counts, the clean patch and its junction.

    ``truth.colors`` are clean intensities in ``[0, 1]``; multiply by
    ``alpha`` for photon units.
    """

    noisy: PhotonImage
    clean: np.ndarray
    truth: JunctionParams
    seed: int = 0
    index: int = 0


def _random_angles(rng, min_gap):
    while True:
        angles = np.sort(rng.uniform(0.0, TWO_PI, 3))
        gaps = np.diff(np.concatenate([angles, angles[:1] + TWO_PI]))
        if gaps.min() >= min_gap:
            return angles


def random_junction(rng, R, channels=1, preset="default"):
    """Draw a junction for an ``R x R`` patch.

    Vertices are uniform over the patch; a third of the junctions merge two
    neighbouring wedge colors, giving corners and straight edges.  The
    ``default`` preset keeps every pair of edges at least 10 degrees apart,
    ``hard`` has no floor.  Every wedge covers at least one pixel.
    """
    if preset not in ("default", "hard"):
        raise InvalidParameterError(f"unknown junction preset {preset!r}")
    min_gap = np.deg2rad(10.0) if preset == "default" else 0.0
    half = R / 2.0
    x, y = patch_coordinates(R)
    while True:
        vertex = rng.uniform(-half, half, 2)
        angles = _random_angles(rng, min_gap)
        # a wedge that covers no pixel has no observable color; redraw
        labels = _wedge_labels(x - vertex[0], y - vertex[1], angles)
        if len(np.unique(labels)) == 3:
            break
    colors = rng.uniform(0.0, 1.0, (3, channels))
    if rng.uniform() < 1.0 / 3.0:
        j = rng.integers(3)
        colors[(j + 1) % 3] = colors[j]
    return JunctionParams(vertex, angles, colors)


def gen_patch_dataset(count, R=21, alpha_range=(2.0, 10.0), seed=0, channels=1,
                      preset="default"):
    """``count`` noisy junction patches with known truth (see :class:`PatchSample`)."""
    if count < 1:
        raise InvalidParameterError(f"count must be >= 1, got {count}")
    _check_alpha_range(alpha_range)
    samples = []
    for i in range(count):
        rng = sample_rng(seed, i)
        truth = random_junction(rng, R, channels, preset)
        alpha = float(rng.uniform(*alpha_range))
        clean = render_patch_color(truth, R)
        samples.append(PatchSample(poisson_noise(clean, alpha, rng=rng), clean, truth, seed, i))
    return samples


# --------------------------------------------------------------- composites


@dataclass
class Shape:
    """A filled convex polygon (``points`` in order) or an ellipse.

    Coordinates are image pixels: ``x`` is the column, ``y`` the row, and
    pixel ``(i, j)`` has its center at ``(x=j, y=i)``.
    """

    kind: str
    color: np.ndarray
    points: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    center: np.ndarray = field(default_factory=lambda: np.zeros(2))
    axes: np.ndarray = field(default_factory=lambda: np.ones(2))
    angle: float = 0.0

    def __post_init__(self):
        self.color = np.atleast_1d(np.asarray(self.color, dtype=np.float64))
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        self.center = np.asarray(self.center, dtype=np.float64)
        self.axes = np.asarray(self.axes, dtype=np.float64)
        if self.kind == "polygon" and len(self.points) >= 3:
            # orient counter-clockwise in (x, y) so "inside" means left of every side
            x, y = self.points[:, 0], self.points[:, 1]
            if np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y) < 0:
                self.points = self.points[::-1].copy()

    def contains(self, x, y):
        if self.kind == "polygon":
            inside = np.ones(np.broadcast(x, y).shape, dtype=bool)
            p = self.points
            for a, b in zip(p, np.roll(p, -1, axis=0)):
                inside &= (b[0] - a[0]) * (y - a[1]) - (b[1] - a[1]) * (x - a[0]) >= 0
            return inside
        if self.kind == "ellipse":
            c, s = np.cos(self.angle), np.sin(self.angle)
            u = (x - self.center[0]) * c + (y - self.center[1]) * s
            v = -(x - self.center[0]) * s + (y - self.center[1]) * c
            return (u / self.axes[0]) ** 2 + (v / self.axes[1]) ** 2 <= 1.0
        raise InvalidParameterError(f"unknown shape kind {self.kind!r}")

    def radius(self):
        if self.kind == "polygon":
            return float(np.max(np.hypot(*(self.points - self.points.mean(0)).T)))
        return float(self.axes.max())

    def centroid(self):
        return self.points.mean(0) if self.kind == "polygon" else self.center

    def to_dict(self):
        d = {"kind": self.kind, "color": self.color.tolist()}
        if self.kind == "polygon":
            d["points"] = self.points.tolist()
        else:
            d.update(center=self.center.tolist(), axes=self.axes.tolist(), angle=self.angle)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class CompositeSample:
    noisy: PhotonImage
    clean: np.ndarray
    mask: np.ndarray
    background: np.ndarray
    shapes: list
    seed: int = 0
    index: int = 0


SHAPE_LIBRARY = ("square", "rectangle", "triangle", "ellipse")
_MIN_FEATURE = 30.0   # > patch diagonal for R=21, keeps one corner per patch


def _quantized_color(rng, channels, avoid=None, min_contrast=0.25):
    while True:
        color = rng.integers(0, 256, channels) / 255.0
        if avoid is None or np.linalg.norm(color - avoid) >= min_contrast:
            return color


def _random_shape(rng, kind, H, W, color):
    center = rng.uniform([0.1 * W, 0.1 * H], [0.9 * W, 0.9 * H])
    rot = rng.uniform(0.0, np.pi)
    rotm = np.array([[np.cos(rot), -np.sin(rot)], [np.sin(rot), np.cos(rot)]])
    if kind in ("square", "rectangle"):
        a = rng.uniform(_MIN_FEATURE, 60.0)
        b = a if kind == "square" else rng.uniform(_MIN_FEATURE, 60.0)
        corners = np.array([[-a, -b], [a, -b], [a, b], [-a, b]]) / 2.0
        return Shape("polygon", color, points=corners @ rotm.T + center)
    if kind == "triangle":
        while True:
            pts = rng.uniform(-35.0, 35.0, (3, 2))
            sides = np.linalg.norm(pts - np.roll(pts, -1, axis=0), axis=1)
            u, v = pts[1] - pts[0], pts[2] - pts[0]
            area = 0.5 * abs(u[0] * v[1] - u[1] * v[0])
            heights = 2 * area / sides
            if sides.min() >= _MIN_FEATURE and heights.min() >= _MIN_FEATURE:
                return Shape("polygon", color, points=pts - pts.mean(0) + center)
    if kind == "ellipse":
        axes = rng.uniform(_MIN_FEATURE / 1.5, 35.0, 2)
        return Shape("ellipse", color, center=center, axes=axes, angle=rot)
    raise InvalidParameterError(f"unknown shape {kind!r}")


def rasterize(shapes, background, H, W):
    """Clean image ``(H, W, k)``, label image and 1-pixel inner-contour boundary mask."""
    y, x = np.mgrid[0:H, 0:W].astype(np.float64)
    background = np.atleast_1d(np.asarray(background, dtype=np.float64))
    clean = np.broadcast_to(background, (H, W, background.size)).copy()
    labels = np.zeros((H, W), dtype=np.int64)
    for i, shape in enumerate(shapes, start=1):
        inside = shape.contains(x, y)
        clean[inside] = shape.color
        labels[inside] = i
    mask = np.zeros((H, W), dtype=bool)
    for axis in (0, 1):
        diff = np.diff(labels, axis=axis) != 0
        lo = [slice(None), slice(None)]
        hi = [slice(None), slice(None)]
        lo[axis], hi[axis] = slice(0, -1), slice(1, None)
        # mark the shape-side pixel of every label change
        mask[tuple(lo)] |= diff & (labels[tuple(lo)] > 0)
        mask[tuple(hi)] |= diff & (labels[tuple(hi)] > 0)
    return clean, labels, mask


def gen_composite_images(count, H=147, W=147, library=SHAPE_LIBRARY, alpha_range=(2.0, 10.0),
                         seed=0, channels=1, max_shapes=3, separation=30.0):
    """Noisy piecewise-constant images of non-overlapping shapes with boundary masks.

    Shapes keep at least ``separation`` pixels between their circumscribed
    circles so that no ``21 x 21`` patch sees two of them.
    """
    if count < 1:
        raise InvalidParameterError(f"count must be >= 1, got {count}")
    if H < 1 or W < 1:
        raise InvalidParameterError(f"invalid image size {H}x{W}")
    for kind in library:
        if kind not in SHAPE_LIBRARY:
            raise InvalidParameterError(f"unknown shape {kind!r}")
    _check_alpha_range(alpha_range)
    samples = []
    for i in range(count):
        rng = sample_rng(seed, i)
        background = _quantized_color(rng, channels)
        n_shapes = int(rng.integers(1, max_shapes + 1))
        shapes = []
        for _ in range(50 * n_shapes):
            if len(shapes) == n_shapes:
                break
            kind = library[int(rng.integers(len(library)))]
            shape = _random_shape(rng, kind, H, W, _quantized_color(rng, channels, background))
            if all(np.linalg.norm(shape.centroid() - o.centroid())
                   >= shape.radius() + o.radius() + separation for o in shapes):
                shapes.append(shape)
        clean, _, mask = rasterize(shapes, background, H, W)
        alpha = float(rng.uniform(*alpha_range))
        noisy = poisson_noise(clean, alpha, rng=rng)
        samples.append(CompositeSample(noisy, clean, mask, background, shapes, seed, i))
    return samples


# ------------------------------------------------- per-patch truth for composites


def _clip_segment(a, b, lo, hi):
    """Liang-Barsky: does segment ``a -> b`` meet the box ``[lo, hi]^2``?"""
    t0, t1 = 0.0, 1.0
    d = b - a
    for axis in (0, 1):
        for p, q in ((-d[axis], a[axis] - lo[axis]), (d[axis], hi[axis] - a[axis])):
            if p == 0:
                if q < 0:
                    return False
                continue
            t = q / p
            if p < 0:
                t0 = max(t0, t)
            else:
                t1 = min(t1, t)
            if t0 > t1:
                return False
    return True


def _direction(v):
    return float(np.arctan2(v[1], v[0]))


def _edge_junction(point, direction, outward):
    """Straight edge through ``point`` with a third ray along ``outward``."""
    theta = _direction(direction)
    return point, np.array([theta, theta + np.pi, _direction(outward)])


def _patch_junction(shape, center, half):
    """Vertex (image coords) and angles of ``shape``'s boundary near a patch, or None."""
    lo, hi = center - half, center + half
    if shape.kind == "polygon":
        p = shape.points
        n = len(p)
        hits = [i for i in range(n) if _clip_segment(p[i], p[(i + 1) % n], lo, hi)]
        if not hits:
            return None
        if len(hits) == 1:
            a, b = p[hits[0]], p[(hits[0] + 1) % n]
            d = b - a
            foot = a + np.clip(np.dot(center - a, d) / np.dot(d, d), 0.0, 1.0) * d
            outward = np.array([d[1], -d[0]])   # right of a CCW side is outside
            return _edge_junction(foot, d, outward)
        # corner: the polygon vertex shared by hit sides closest to the patch center
        shared = [(i + 1) % n for i in hits if (i + 1) % n in hits]
        candidates = shared or [h for i in hits for h in (i, (i + 1) % n)]
        c = min(candidates, key=lambda i: np.linalg.norm(p[i] - center))
        prev, nxt = p[c - 1], p[(c + 1) % n]
        a1, a2 = _direction(prev - p[c]), _direction(nxt - p[c])
        bisector = -((prev - p[c]) / np.linalg.norm(prev - p[c])
                     + (nxt - p[c]) / np.linalg.norm(nxt - p[c]))
        return p[c], np.array([a1, a2, _direction(bisector)])
    # ellipse: tangent line at the boundary point closest to the patch center
    t = np.linspace(0.0, TWO_PI, 2048, endpoint=False)
    c, s = np.cos(shape.angle), np.sin(shape.angle)
    rot = np.array([[c, -s], [s, c]])
    pts = np.stack([shape.axes[0] * np.cos(t), shape.axes[1] * np.sin(t)], 1) @ rot.T + shape.center
    inside_box = np.all((pts >= lo) & (pts <= hi), axis=1)
    if not inside_box.any():
        return None
    i = int(np.argmin(np.linalg.norm(pts - center, axis=1)))
    tangent = np.array([-shape.axes[0] * np.sin(t[i]), shape.axes[1] * np.cos(t[i])]) @ rot.T
    outward = pts[i] - shape.center
    return _edge_junction(pts[i], tangent, outward)


FLAT_ANGLES = np.array([0.0, TWO_PI / 3.0, 2.0 * TWO_PI / 3.0])


def composite_truth(sample, grid):
    """Ground-truth junction for every patch of a composite image.

    Patches away from all shapes get a centered junction with evenly spread
    angles and a single color.  Colors are the exact wedge means of the clean
    image, in clean units.
    """
    R = grid.patch_size
    half = R / 2.0
    M, N = grid.shape
    vertex = np.zeros((M, N, 2))
    angles = np.broadcast_to(FLAT_ANGLES, (M, N, 3)).copy()
    for m in range(M):
        for n in range(N):
            center = np.array([n * grid.stride + (R - 1) / 2.0, m * grid.stride + (R - 1) / 2.0])
            for shape in sample.shapes:
                found = _patch_junction(shape, center, half)
                if found is not None:
                    v, a = found
                    vertex[m, n] = v - center
                    angles[m, n] = a
                    break
    params = ParamsGrid(vertex, angles, np.zeros((M, N, 3, grid.channels)))
    patches = extract_patch_array(sample.clean, grid)
    params.colors = estimate_grid_colors(patches, params)
    return params


# ------------------------------------------------------------------- file I/O


def load_image(path):
    """8/16-bit PNG or PGM as float ``(H, W, k)`` in ``[0, 1]``; alpha channels dropped."""
    path = Path(path)
    if not path.exists():
        raise ImageIOError(path, "no such file")
    try:
        with Image.open(path) as img:
            img.load()
            mode = img.mode
            if mode in ("I;16", "I;16B", "I;16L", "I"):
                arr = np.asarray(img, dtype=np.float64) / 65535.0
            elif mode in ("L", "P", "1"):
                arr = np.asarray(img.convert("L"), dtype=np.float64) / 255.0
            else:
                arr = np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise ImageIOError(path, f"cannot decode image ({exc})") from exc
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return arr


def save_image(path, values):
    """Write ``values`` in ``[0, 1]`` as 8-bit PNG/PGM (format from the suffix)."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    arr = np.clip(np.rint(np.clip(arr, 0.0, 1.0) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


CTB_MAGIC = b"CTB1"
CTB_DTYPE_U32 = 1
_CTB_HEADER = struct.Struct("<4sIIIId")


def write_ctb(path, image):
    """Photon counts as ``CTB1``: header ``magic, H, W, k, dtype, alpha`` then u32 counts."""
    counts = np.asarray(image.counts)
    if counts.min(initial=0) < 0 or not np.all(counts == np.rint(counts)):
        raise InputError("photon counts must be non-negative integers")
    H, W, k = counts.shape
    header = _CTB_HEADER.pack(CTB_MAGIC, H, W, k, CTB_DTYPE_U32, float(image.alpha))
    Path(path).write_bytes(header + np.ascontiguousarray(counts, dtype="<u4").tobytes())


def read_ctb(path):
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise ImageIOError(path, f"cannot read ({exc.strerror})") from exc
    if len(raw) < _CTB_HEADER.size:
        raise ImageIOError(path, "truncated CTB1 header")
    magic, H, W, k, dtype, alpha = _CTB_HEADER.unpack_from(raw)
    if magic != CTB_MAGIC or dtype != CTB_DTYPE_U32:
        raise ImageIOError(path, "not a CTB1 photon-count file")
    body = raw[_CTB_HEADER.size:]
    if len(body) != 4 * H * W * k:
        raise ImageIOError(path, f"expected {H}x{W}x{k} counts, found {len(body) // 4}")
    counts = np.frombuffer(body, dtype="<u4").reshape(H, W, k).copy()
    return PhotonImage(counts, alpha)
