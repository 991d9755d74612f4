"""Field-of-junctions geometry: rendering, wedge classification and aggregation.

Coordinates are patch-local pixels with the origin at the patch center,
``x`` pointing right (columns) and ``y`` pointing down (rows).  Edge ``j``
is the ray from the vertex in direction ``(cos phi_j, sin phi_j)``; wedge
``j`` is the angular sector swept from edge ``j`` to edge ``j+1`` (indices
modulo 3), so wedge 3 wraps through ``2*pi``.

Everything here is NumPy and float64.  The differentiable counterparts used
for training live in :mod:`ctbound.render`.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .exceptions import InputError, InvalidParameterError

N_EDGES = 3
TWO_PI = 2.0 * np.pi


def canonicalize_angles(angles):
    """Wrap angles into ``[0, 2*pi)`` and sort them along the last axis."""
    wrapped = np.mod(np.asarray(angles, dtype=np.float64), TWO_PI)
    # np.mod can return exactly 2*pi for tiny negative inputs
    wrapped = np.where(wrapped >= TWO_PI, 0.0, wrapped)
    return np.sort(wrapped, axis=-1)


@dataclass
class JunctionParams:
    """One patch's junction: vertex ``(x0, y0)``, three edge angles, three wedge colors.

    ``colors`` has shape ``(3, k)`` in photon units.  Angles are canonicalized
    on construction.
    """

    vertex: np.ndarray
    angles: np.ndarray
    colors: np.ndarray = field(default_factory=lambda: np.zeros((N_EDGES, 1)))

    def __post_init__(self):
        self.vertex = np.asarray(self.vertex, dtype=np.float64).reshape(2)
        angles = np.asarray(self.angles, dtype=np.float64).reshape(-1)
        if angles.shape[0] != N_EDGES:
            raise InputError(f"expected {N_EDGES} angles, got {angles.shape[0]}")
        self.angles = canonicalize_angles(angles)
        colors = np.asarray(self.colors, dtype=np.float64)
        if colors.ndim == 1:
            colors = colors[:, None]
        if colors.shape[0] != N_EDGES:
            raise InputError(f"expected {N_EDGES} wedge colors, got {colors.shape[0]}")
        self.colors = colors

    @property
    def channels(self):
        return self.colors.shape[1]

    def with_colors(self, colors):
        return JunctionParams(self.vertex.copy(), self.angles.copy(), colors)

    def geometry(self):
        """The five geometry values ``(x0, y0, phi1, phi2, phi3)``."""
        return np.concatenate([self.vertex, self.angles])


@dataclass(frozen=True)
class PatchGridSpec:
    """Geometry of the overlapping patch grid laid over an ``H x W`` image."""

    image_height: int
    image_width: int
    patch_size: int = 21
    stride: int = 1
    channels: int = 1

    def __post_init__(self):
        if self.patch_size < 1 or self.stride < 1 or self.channels < 1:
            raise InvalidParameterError(
                f"patch_size, stride and channels must be >= 1, got "
                f"{self.patch_size}, {self.stride}, {self.channels}")
        if self.patch_size > min(self.image_height, self.image_width):
            raise InputError(
                f"image {self.image_height}x{self.image_width} is smaller than the "
                f"patch size {self.patch_size}")

    @classmethod
    def for_image(cls, image, patch_size=21, stride=1):
        image = np.asarray(image)
        channels = 1 if image.ndim == 2 else image.shape[2]
        return cls(image.shape[0], image.shape[1], patch_size, stride, channels)

    @property
    def rows(self):
        return (self.image_height - self.patch_size) // self.stride + 1

    @property
    def cols(self):
        return (self.image_width - self.patch_size) // self.stride + 1

    @property
    def shape(self):
        return (self.rows, self.cols)

    @property
    def n_patches(self):
        return self.rows * self.cols

    def origin(self, m, n):
        """Top-left pixel ``(row, col)`` of patch ``(m, n)``."""
        return m * self.stride, n * self.stride

    def coverage(self):
        """Number of patches covering each pixel, shape ``(H, W)``."""
        counts = np.zeros((self.image_height, self.image_width), dtype=np.int64)
        R = self.patch_size
        for m in range(self.rows):
            r0 = m * self.stride
            for n in range(self.cols):
                c0 = n * self.stride
                counts[r0:r0 + R, c0:c0 + R] += 1
        return counts


@dataclass
class ParamsGrid:
    """Junction parameters for every patch of a grid.

    Arrays are ``vertex (M, N, 2)``, ``angles (M, N, 3)`` and
    ``colors (M, N, 3, k)``.
    """

    vertex: np.ndarray
    angles: np.ndarray
    colors: np.ndarray

    def __post_init__(self):
        self.vertex = np.asarray(self.vertex, dtype=np.float64)
        self.angles = canonicalize_angles(self.angles)
        self.colors = np.asarray(self.colors, dtype=np.float64)
        M, N = self.vertex.shape[:2]
        if (self.vertex.shape != (M, N, 2) or self.angles.shape != (M, N, N_EDGES)
                or self.colors.shape[:3] != (M, N, N_EDGES)):
            raise InputError(
                f"inconsistent params grid shapes: vertex {self.vertex.shape}, "
                f"angles {self.angles.shape}, colors {self.colors.shape}")

    @property
    def shape(self):
        return self.vertex.shape[:2]

    @property
    def channels(self):
        return self.colors.shape[3]

    def __getitem__(self, index):
        m, n = index
        return JunctionParams(self.vertex[m, n], self.angles[m, n], self.colors[m, n])

    def geometry(self):
        """``(M, N, 5)`` array of ``(x0, y0, phi1, phi2, phi3)``."""
        return np.concatenate([self.vertex, self.angles], axis=-1)

    def copy(self):
        return ParamsGrid(self.vertex.copy(), self.angles.copy(), self.colors.copy())

    @classmethod
    def from_list(cls, params, shape):
        M, N = shape
        if len(params) != M * N:
            raise InputError(f"expected {M * N} junctions, got {len(params)}")
        vertex = np.stack([p.vertex for p in params]).reshape(M, N, 2)
        angles = np.stack([p.angles for p in params]).reshape(M, N, N_EDGES)
        colors = np.stack([p.colors for p in params])
        return cls(vertex, angles, colors.reshape(M, N, N_EDGES, -1))

    @classmethod
    def from_geometry(cls, geometry, colors):
        geometry = np.asarray(geometry, dtype=np.float64)
        return cls(geometry[..., :2], geometry[..., 2:], colors)


def patch_coordinates(R):
    """Pixel-center coordinates ``(x, y)`` of an ``R x R`` patch, each ``(R, R)``."""
    c = np.arange(R, dtype=np.float64) - (R - 1) / 2.0
    y, x = np.meshgrid(c, c, indexing="ij")
    return x, y


def _check_eps(eps, name="eps"):
    if not np.all(np.asarray(eps) > 0):
        raise InvalidParameterError(f"{name} must be positive, got {eps}")


def ray_distance(point, vertex, angle):
    """Euclidean distance from ``point`` to the ray leaving ``vertex`` at ``angle``.

    Broadcasts over leading dimensions; ``point`` and ``vertex`` have a
    trailing axis of size 2.
    """
    point = np.asarray(point, dtype=np.float64)
    vertex = np.asarray(vertex, dtype=np.float64)
    angle = np.asarray(angle, dtype=np.float64)
    return _ray_distance_xy(point[..., 0] - vertex[..., 0],
                            point[..., 1] - vertex[..., 1], angle)


def _ray_distance_xy(dx, dy, angle):
    c, s = np.cos(angle), np.sin(angle)
    along = dx * c + dy * s
    across = np.abs(dy * c - dx * s)
    return np.where(along >= 0, across, np.hypot(dx, dy))


def smooth_heaviside(d, eps):
    """Arctangent-smoothed Heaviside ``0.5 * (1 + 2/pi * arctan(d / eps))``."""
    _check_eps(eps)
    return 0.5 * (1.0 + (2.0 / np.pi) * np.arctan(np.asarray(d, dtype=np.float64) / eps))


def boundary_intensity(d, eps):
    """``pi * eps * H'(d) = eps**2 / (eps**2 + d**2)``; equals 1 on an edge."""
    _check_eps(eps)
    d = np.asarray(d, dtype=np.float64)
    if np.any(d < 0):
        raise InvalidParameterError("boundary_intensity expects unsigned distances")
    return eps * eps / (eps * eps + d * d)


def _wedge_labels(dx, dy, angles):
    """0-based wedge labels for offsets ``(dx, dy)`` from the vertex.

    ``angles`` must be canonical and broadcast against ``dx`` with a trailing
    axis of size 3.  Wedge ``j`` lies counter-clockwise of ray ``j`` and
    clockwise of ray ``j+1``; with ``s_j`` the cross product of the ray
    direction with the offset, a wedge narrower than a half-turn is the
    intersection ``s_j >= 0 and s_{j+1} <= 0`` and a wider one their union.
    Ties (shared edges, the vertex) go to the lower index.
    """
    angles = np.asarray(angles, dtype=np.float64)
    dx, dy = np.broadcast_arrays(np.asarray(dx, dtype=np.float64)[..., None],
                                 np.asarray(dy, dtype=np.float64)[..., None])
    s = dy * np.cos(angles) - dx * np.sin(angles)
    s_next = np.roll(s, -1, axis=-1)
    gap = np.roll(angles, -1, axis=-1) - angles
    gap = np.concatenate([gap[..., :2], TWO_PI + gap[..., 2:]], axis=-1)
    convex = gap <= np.pi
    inside = np.where(convex, (s >= 0) & (s_next <= 0), (s >= 0) | (s_next <= 0))
    return np.argmax(inside, axis=-1)


def wedge_index(point, params):
    """1-based wedge index of ``point`` (trailing axis 2) under ``params``."""
    point = np.asarray(point, dtype=np.float64)
    dx = point[..., 0] - params.vertex[0]
    dy = point[..., 1] - params.vertex[1]
    return _wedge_labels(dx, dy, params.angles) + 1


def render_patch_boundary(params, R, eps=0.01):
    """``(R, R)`` boundary map: intensity of the distance to the nearest edge ray."""
    _check_eps(eps)
    x, y = patch_coordinates(R)
    dx, dy = x - params.vertex[0], y - params.vertex[1]
    dist = np.min(np.stack([_ray_distance_xy(dx, dy, a) for a in params.angles]), axis=0)
    return boundary_intensity(dist, eps)


def render_patch_color(params, R):
    """``(R, R, k)`` piecewise-constant color map, each pixel colored by its wedge."""
    x, y = patch_coordinates(R)
    labels = _wedge_labels(x - params.vertex[0], y - params.vertex[1], params.angles)
    return params.colors[labels]


def estimate_wedge_colors(patch, vertex, angles):
    """Mean patch value inside each wedge; empty wedges get the whole-patch mean.

    ``patch`` is ``(R, R)`` or ``(R, R, k)``; returns ``(3, k)``.
    """
    patch = np.asarray(patch, dtype=np.float64)
    if patch.ndim == 2:
        patch = patch[:, :, None]
    if not np.all(np.isfinite(patch)):
        raise InputError("patch contains non-finite values")
    R = patch.shape[0]
    x, y = patch_coordinates(R)
    vertex = np.asarray(vertex, dtype=np.float64)
    labels = _wedge_labels(x - vertex[0], y - vertex[1], canonicalize_angles(angles))
    flat = patch.reshape(-1, patch.shape[2])
    labels = labels.reshape(-1)
    mean = flat.mean(axis=0)
    colors = np.empty((N_EDGES, patch.shape[2]))
    for j in range(N_EDGES):
        inside = labels == j
        colors[j] = flat[inside].mean(axis=0) if inside.any() else mean
    return colors


def smooth_wedge_weights(point, params, eps_delta):
    """Soft wedge membership, shape ``(..., 3)``, summing to one.

    Wedge ``j`` gets ``H(d_j)`` where ``d_j`` is the distance to the nearer of
    its two rays, taken positive inside the wedge and negative outside.
    """
    _check_eps(eps_delta, "eps_delta")
    point = np.asarray(point, dtype=np.float64)
    dx = point[..., 0] - params.vertex[0]
    dy = point[..., 1] - params.vertex[1]
    return _smooth_weights_xy(dx, dy, params.angles, eps_delta)


def _smooth_weights_xy(dx, dy, angles, eps_delta):
    r = [_ray_distance_xy(dx, dy, angles[..., j]) for j in range(N_EDGES)]
    labels = _wedge_labels(dx, dy, angles)
    raw = []
    for j in range(N_EDGES):
        d = np.minimum(r[j], r[(j + 1) % N_EDGES])
        raw.append(smooth_heaviside(np.where(labels == j, d, -d), eps_delta))
    raw = np.stack(raw, axis=-1)
    return raw / raw.sum(axis=-1, keepdims=True)


# --- whole-grid helpers -------------------------------------------------------

def render_grid_boundaries(params_grid, R, eps=0.01, edge_mask=None):
    """Per-patch boundary maps ``(M, N, R, R)`` for a whole params grid.

    ``edge_mask`` (``(M, N, 3)`` bool) drops edges; a patch with no edges left
    renders as zeros.
    """
    _check_eps(eps)
    x, y = patch_coordinates(R)
    vx = params_grid.vertex[..., 0][..., None, None]
    vy = params_grid.vertex[..., 1][..., None, None]
    dist = np.full(params_grid.shape + (R, R), np.inf)
    for j in range(N_EDGES):
        a = params_grid.angles[..., j][..., None, None]
        d = _ray_distance_xy(x - vx, y - vy, a)
        if edge_mask is not None:
            d = np.where(edge_mask[..., j][..., None, None], d, np.inf)
        dist = np.minimum(dist, d)
    out = np.zeros_like(dist)
    finite = np.isfinite(dist)
    out[finite] = eps * eps / (eps * eps + dist[finite] ** 2)
    return out


def grid_wedge_labels(params_grid, R):
    """0-based hard wedge labels ``(M, N, R, R)``."""
    x, y = patch_coordinates(R)
    dx = x - params_grid.vertex[..., 0][..., None, None]
    dy = y - params_grid.vertex[..., 1][..., None, None]
    return _wedge_labels(dx, dy, params_grid.angles[:, :, None, None, :])


def render_grid_colors(params_grid, R):
    """Per-patch color maps ``(M, N, R, R, k)``."""
    labels = grid_wedge_labels(params_grid, R)
    colors = params_grid.colors
    return np.take_along_axis(colors[:, :, None, None, :, :],
                              labels[..., None, None], axis=4)[..., 0, :]


def extract_patch_array(image, grid):
    """All patches as one ``(M, N, R, R, k)`` array in row-major ``(m, n)`` order."""
    image = np.asarray(image)
    if image.ndim == 2:
        image = image[:, :, None]
    if image.shape[:2] != (grid.image_height, grid.image_width):
        raise InputError(
            f"image shape {image.shape[:2]} does not match grid "
            f"{(grid.image_height, grid.image_width)}")
    if image.shape[2] != grid.channels:
        raise InputError(f"image has {image.shape[2]} channels, grid expects {grid.channels}")
    R, s = grid.patch_size, grid.stride
    windows = np.lib.stride_tricks.sliding_window_view(image, (R, R), axis=(0, 1))
    # sliding_window_view puts the window axes last: (H-R+1, W-R+1, k, R, R)
    windows = windows[::s, ::s]
    return np.ascontiguousarray(np.moveaxis(windows, 2, -1))


def estimate_grid_colors(patches, params_grid):
    """Hard wedge means for every patch; ``patches`` is ``(M, N, R, R, k)``."""
    patches = np.asarray(patches, dtype=np.float64)
    R = patches.shape[2]
    labels = grid_wedge_labels(params_grid, R)
    M, N = params_grid.shape
    k = patches.shape[-1]
    flat = patches.reshape(M, N, R * R, k)
    labels = labels.reshape(M, N, R * R)
    mean = flat.mean(axis=2)
    colors = np.empty((M, N, N_EDGES, k))
    for j in range(N_EDGES):
        w = (labels == j).astype(np.float64)
        count = w.sum(axis=2)
        total = np.einsum("mnp,mnpk->mnk", w, flat)
        colors[:, :, j] = np.where(count[..., None] > 0,
                                   total / np.maximum(count, 1)[..., None], mean)
    return colors


def _accumulate(per_patch, grid):
    R, s = grid.patch_size, grid.stride
    trailing = per_patch.shape[4:]
    total = np.zeros((grid.image_height, grid.image_width) + trailing, dtype=np.float64)
    for m in range(grid.rows):
        for n in range(grid.cols):
            total[m * s:m * s + R, n * s:n * s + R] += per_patch[m, n]
    return total


def aggregate_boundary(per_patch, grid, return_coverage=False):
    """Average of overlapping per-patch boundary maps; uncovered pixels are 0.

    ``per_patch`` is ``(M, N, R, R)``.  With ``return_coverage`` the boolean
    mask of covered pixels is returned as well.
    """
    per_patch = np.asarray(per_patch, dtype=np.float64)
    if per_patch.shape[:4] != grid.shape + (grid.patch_size,) * 2:
        raise InputError(f"per-patch maps {per_patch.shape} do not match grid {grid.shape}")
    counts = grid.coverage()
    total = _accumulate(per_patch, grid)
    covered = counts > 0
    out = np.zeros_like(total)
    out[covered] = total[covered] / counts[covered]
    return (out, covered) if return_coverage else out


def aggregate_color(params_grid, grid, image=None, return_coverage=False):
    """Global color map: per pixel, the mean of the wedge colors assigned by covering patches.

    When ``image`` is given, wedge colors are first re-estimated from it.
    """
    if image is not None:
        patches = extract_patch_array(image, grid)
        params_grid = ParamsGrid(params_grid.vertex, params_grid.angles,
                                 estimate_grid_colors(patches, params_grid))
    per_patch = render_grid_colors(params_grid, grid.patch_size)
    counts = grid.coverage()
    total = _accumulate(per_patch, grid)
    covered = counts > 0
    out = np.zeros_like(total)
    out[covered] = total[covered] / counts[covered][:, None]
    return (out, covered) if return_coverage else out
