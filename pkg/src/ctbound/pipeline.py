"""End-to-end inference: patches -> CNN junctions -> transformer refinement -> maps."""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import torch

from . import foj
from .exceptions import InputError, NumericError
from .foj import ParamsGrid, PatchGridSpec
from .nn import positional_encoding_grid
from .render import canonicalize_angles

DEFAULT_BOUNDARY_EPS = 0.75
INIT_CHUNK = 512


def as_counts(image):
    """Photon counts as float64 ``(H, W, k)``."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        image = image[:, :, None]
    if image.ndim != 3:
        raise InputError(f"expected an (H, W) or (H, W, k) image, got shape {image.shape}")
    if not np.all(np.isfinite(image)):
        raise InputError("image contains non-finite values")
    return image


def intensity_scale(image, alpha=None, percentile=99.0):
    """Divisor that brings counts to O(1): ``alpha`` if known, else a high percentile."""
    if alpha is not None:
        if not alpha > 0:
            raise InputError(f"photon level must be positive, got {alpha}")
        return float(alpha)
    return max(float(np.percentile(image, percentile)), 1.0)


def extract_patches(image, grid):
    """Patches ``(M*N, R, R, k)`` in row-major order and their ``(m, n)`` indices."""
    patches = foj.extract_patch_array(as_counts(image), grid)
    M, N = grid.shape
    indices = np.stack(np.meshgrid(np.arange(M), np.arange(N), indexing="ij"), -1).reshape(-1, 2)
    return patches.reshape((M * N,) + patches.shape[2:]), indices


def init_geometry(model, patches, scale):
    """CNN geometry for ``(P, R, R, k)`` count patches: ``(P, 5)`` with canonical angles."""
    out = []
    with torch.no_grad():
        for start in range(0, len(patches), INIT_CHUNK):
            chunk = torch.as_tensor(patches[start:start + INIT_CHUNK] / scale, dtype=torch.float32)
            out.append(model(chunk).double())
    if not out:
        return np.zeros((0, 5))
    geometry = torch.cat(out)
    if not torch.isfinite(geometry).all():
        raise NumericError("initialization network produced non-finite output")
    geometry[:, 2:] = canonicalize_angles(geometry[:, 2:])
    return geometry.numpy()


def init_forward(model, patch, scale=None):
    """Junction for one count patch ``(R, R[, k])``; colors are the hard wedge means."""
    patch = as_counts(patch)
    scale = intensity_scale(patch) if scale is None else scale
    geometry = init_geometry(model, patch[None], scale)[0]
    colors = foj.estimate_wedge_colors(patch, geometry[:2], geometry[2:])
    return foj.JunctionParams(geometry[:2], geometry[2:], colors)


def _grid_from_geometry(geometry, patches, grid):
    M, N = grid.shape
    params = ParamsGrid.from_geometry(geometry.reshape(M, N, 5),
                                      np.zeros((M, N, 3, grid.channels)))
    params.colors = foj.estimate_grid_colors(patches.reshape((M, N) + patches.shape[1:]), params)
    return params


def refine_geometry(model, params, grid, scale):
    """Transformer pass over a whole params grid; returns refined ``(M, N, 5)``.

    Only the junction parameters reach the encoder, never pixel values.
    """
    M, N = grid.shape
    if params.shape != (M, N):
        raise InputError(f"params grid {params.shape} does not match patch grid {(M, N)}")
    rows, cols = np.meshgrid(np.arange(M), np.arange(N), indexing="ij")
    pos = torch.as_tensor(positional_encoding_grid(rows, cols, model.d), dtype=torch.float32)
    geometry = torch.as_tensor(params.geometry().reshape(1, M * N, 5), dtype=torch.float32)
    colors = torch.as_tensor(params.colors.reshape(1, M * N, 3, -1) / scale, dtype=torch.float32)
    with torch.no_grad():
        out = model(geometry, colors, pos)[0].double()
    if not torch.isfinite(out).all():
        raise NumericError("refinement network produced non-finite output")
    out[:, 2:] = canonicalize_angles(out[:, 2:])
    return out.numpy().reshape(M, N, 5)


def refine_forward(model, params, image, grid, scale=None):
    """Refined params grid; colors are re-estimated from ``image`` under the new geometry."""
    image = as_counts(image)
    scale = intensity_scale(image) if scale is None else scale
    geometry = refine_geometry(model, params, grid, scale)
    patches, _ = extract_patches(image, grid)
    return _grid_from_geometry(geometry.reshape(-1, 5), patches, grid)


@dataclass
class InferenceResult:
    """Outputs of one inference call.

    ``boundary`` is ``(H, W)`` in ``[0, 1]``, ``color`` is ``(H, W, k)`` in
    photon units, ``params`` the final junction grid.  ``timings_ms`` has one
    entry per phase and ``evaluations`` counts network passes.
    """

    boundary: np.ndarray
    color: np.ndarray
    params: ParamsGrid
    grid: PatchGridSpec
    scale: float
    init_params: ParamsGrid | None = None
    timings_ms: dict = field(default_factory=dict)
    evaluations: dict = field(default_factory=dict)

    def timing_line(self):
        parts = " ".join(f"{k}={v:.1f}" for k, v in self.timings_ms.items())
        return f"timing_ms {parts} total={sum(self.timings_ms.values()):.1f}"


def render_maps(params, grid, eps=DEFAULT_BOUNDARY_EPS):
    """Global boundary and color maps of a params grid (hard wedges)."""
    boundary = foj.aggregate_boundary(
        foj.render_grid_boundaries(params, grid.patch_size, eps), grid)
    color = foj.aggregate_color(params, grid)
    return boundary, color


def infer(image, grid, init_model, refine_model=None, alpha=None, eps=DEFAULT_BOUNDARY_EPS,
          percentile=99.0):
    """Run the pipeline once: one CNN pass per patch, one encoder pass per image.

    Without ``refine_model`` the initialization-stage junctions are rendered
    directly.
    """
    image = as_counts(image)
    if grid.image_height != image.shape[0] or grid.image_width != image.shape[1]:
        raise InputError(f"image {image.shape[:2]} does not match grid "
                         f"{(grid.image_height, grid.image_width)}")
    scale = intensity_scale(image, alpha, percentile)
    timings = {}
    init_before = init_model.patch_evals
    refine_before = refine_model.encoder_passes if refine_model is not None else 0

    t = time.perf_counter()
    patches, _ = extract_patches(image, grid)
    timings["extract"] = (time.perf_counter() - t) * 1e3

    t = time.perf_counter()
    geometry = init_geometry(init_model, patches, scale)
    init_params = _grid_from_geometry(geometry, patches, grid)
    timings["init"] = (time.perf_counter() - t) * 1e3

    params = init_params
    if refine_model is not None:
        t = time.perf_counter()
        refined = refine_geometry(refine_model, init_params, grid, scale)
        params = _grid_from_geometry(refined.reshape(-1, 5), patches, grid)
        timings["refine"] = (time.perf_counter() - t) * 1e3

    t = time.perf_counter()
    boundary, color = render_maps(params, grid, eps)
    timings["aggregate"] = (time.perf_counter() - t) * 1e3

    evaluations = {"init_patches": init_model.patch_evals - init_before,
                   "encoder_passes": (refine_model.encoder_passes - refine_before
                                      if refine_model is not None else 0)}
    return InferenceResult(boundary, color, params, grid, scale, init_params, timings, evaluations)


# ------------------------------------------------------------ params-grid files

PARAMS_COLUMNS = "m n x0 y0 phi1 phi2 phi3 c1[k] c2[k] c3[k]"


def write_params_grid(path, params, grid, alpha=None):
    """One line per patch: ``m n x0 y0 phi1 phi2 phi3`` then the 3k wedge colors."""
    M, N = params.shape
    k = params.channels
    lines = [
        "# ctbound params grid v1",
        f"# columns: {PARAMS_COLUMNS}",
        f"# rows={M} cols={N} channels={k} patch_size={grid.patch_size} stride={grid.stride} "
        f"height={grid.image_height} width={grid.image_width} "
        f"alpha={'unknown' if alpha is None else repr(float(alpha))}",
    ]
    for m in range(M):
        for n in range(N):
            values = np.concatenate([params.vertex[m, n], params.angles[m, n],
                                     params.colors[m, n].reshape(-1)])
            lines.append(f"{m} {n} " + " ".join(f"{v:.17g}" for v in values))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_params_grid(path):
    """Inverse of :func:`write_params_grid`: ``(params, grid, alpha)``."""
    meta = {}
    rows = []
    with open(path) as fh:
        for line in fh:
            if line.startswith("#"):
                for token in line[1:].split():
                    if "=" in token:
                        key, value = token.split("=", 1)
                        meta[key] = value
            elif line.strip():
                rows.append([float(v) for v in line.split()])
    try:
        M, N, k = int(meta["rows"]), int(meta["cols"]), int(meta["channels"])
        grid = PatchGridSpec(int(meta["height"]), int(meta["width"]), int(meta["patch_size"]),
                             int(meta["stride"]), k)
    except KeyError as exc:
        raise InputError(f"{path}: missing header field {exc}") from exc
    data = np.array(rows)
    if data.shape != (M * N, 7 + 3 * k):
        raise InputError(f"{path}: expected {M * N} rows of {7 + 3 * k} values, got {data.shape}")
    data = data[np.lexsort((data[:, 1], data[:, 0]))]
    params = ParamsGrid(data[:, 2:4].reshape(M, N, 2), data[:, 4:7].reshape(M, N, 3),
                        data[:, 7:].reshape(M, N, 3, k))
    alpha = None if meta.get("alpha", "unknown") == "unknown" else float(meta["alpha"])
    return params, grid, alpha
