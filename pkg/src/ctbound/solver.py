"""Direct per-patch junction fitting by multi-restart gradient descent.

The objective is the mean squared error between a smoothly rendered junction
and the normalized patch.  At every evaluation the wedge colors are the
closed-form least-squares optimum for the current geometry, which is the
plain wedge mean once the rendering is sharp.  Steps are accepted only
under the Armijo condition, so the objective never increases within an
annealing stage.  Many patches and
restarts are optimized together as one batch.
"""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
import torch
from scipy.ndimage import gaussian_filter

from . import foj, render
from .exceptions import InvalidParameterError
from .pipeline import (DEFAULT_BOUNDARY_EPS, InferenceResult, _grid_from_geometry, as_counts,
                       extract_patches, intensity_scale, render_maps)


@dataclass
class SolverConfig:
    restarts: int = 4
    iterations: int = 100
    step_size: float = 1.0
    eps_start: float = 0.5
    eps_end: float = 0.2
    anneal_stages: int = 4
    max_backtracks: int = 30
    seed: int = 0
    chunk: int = 128

    def __post_init__(self):
        if self.restarts < 1 or self.iterations < 1 or self.anneal_stages < 1:
            raise InvalidParameterError("restarts, iterations and anneal_stages must be >= 1")
        if self.eps_start <= 0 or self.eps_end <= 0 or self.step_size <= 0:
            raise InvalidParameterError("eps_start, eps_end and step_size must be positive")

    def schedule(self):
        """``eps_delta`` for every iteration: geometric steps from start to end."""
        stages = min(self.anneal_stages, self.iterations)
        levels = np.geomspace(self.eps_start, self.eps_end, stages)
        per_stage = np.array_split(np.arange(self.iterations), stages)
        eps = np.empty(self.iterations)
        for level, idx in zip(levels, per_stage):
            eps[idx] = level
        return eps


def _objective(theta, patches, R, eps_delta):
    """Per-row smooth reconstruction MSE; ``theta (B, 5)``, ``patches (B, R, R, k)``."""
    vertex = theta[:, :2]
    angles = render.canonicalize_angles(theta[:, 2:])
    weights = render.wedge_weights(vertex, angles, R, eps_delta)
    colors = render.least_squares_colors(patches, weights)
    recon = render.render_colors(weights, colors)
    return ((recon - patches) ** 2).mean(dim=(1, 2, 3))


def structure_tensor_start(patch):
    """Junction guess from the dominant gradient orientation of ``(R, R, k)`` patch.

    Two rays run along the dominant edge direction through the
    gradient-weighted centroid; the third points along the gradient.
    """
    gray = np.asarray(patch, dtype=np.float64).mean(axis=2)
    gray = gaussian_filter(gray, 1.0)
    gy, gx = np.gradient(gray)
    jxx, jyy, jxy = (gx * gx).sum(), (gy * gy).sum(), (gx * gy).sum()
    theta_g = 0.5 * np.arctan2(2.0 * jxy, jxx - jyy)
    mag = gx * gx + gy * gy
    x, y = foj.patch_coordinates(gray.shape[0])
    if mag.sum() > 0:
        vertex = np.array([(mag * x).sum(), (mag * y).sum()]) / mag.sum()
    else:
        vertex = np.zeros(2)
    edge = theta_g + np.pi / 2.0
    return np.concatenate([vertex, [edge, edge + np.pi, theta_g]])


def initial_guesses(patch, config, rng):
    """``(restarts, 5)`` starting points; the first is the structure-tensor guess."""
    R = patch.shape[0]
    starts = [structure_tensor_start(patch)]
    for _ in range(config.restarts - 1):
        vertex = np.clip(rng.normal(0.0, R / 6.0, 2), -R / 2.0, R / 2.0)
        starts.append(np.concatenate([vertex, np.sort(rng.uniform(0.0, 2 * np.pi, 3))]))
    return np.stack(starts)


def _descend(theta, patches, R, config):
    """Batched backtracking gradient descent; returns ``(theta, final objective, trace)``."""
    B = theta.shape[0]
    # angles move edges by ~R/4 pixels per radian
    precond = torch.tensor([1.0, 1.0] + [1.0 / (R / 4.0) ** 2] * 3, dtype=theta.dtype)
    step = torch.full((B,), config.step_size, dtype=theta.dtype)
    trace = []
    for eps in config.schedule():
        theta = theta.detach().requires_grad_(True)
        f = _objective(theta, patches, R, eps)
        (grad,) = torch.autograd.grad(f.sum(), theta)
        theta = theta.detach()
        f = f.detach()
        direction = grad * precond
        decrease = (grad * direction).sum(dim=1)
        accepted = torch.zeros(B, dtype=torch.bool)
        new_theta, new_f = theta.clone(), f.clone()
        with torch.no_grad():
            for _ in range(config.max_backtracks):
                pending = ~accepted
                if not pending.any():
                    break
                cand = theta[pending] - step[pending, None] * direction[pending]
                fc = _objective(cand, patches[pending], R, eps)
                ok = fc <= f[pending] - 1e-4 * step[pending] * decrease[pending]
                idx = pending.nonzero().squeeze(1)
                good = idx[ok]
                new_theta[good] = cand[ok]
                new_f[good] = fc[ok]
                accepted[good] = True
                step[idx[~ok]] *= 0.5
        step[accepted] *= 2.0
        # rows with no acceptable step keep their parameters, so f never increases
        theta, f = new_theta, new_f
        trace.append(f.clone())
    return theta, f, torch.stack(trace, dim=1)


@dataclass
class PatchFit:
    params: foj.JunctionParams
    objective: float
    trace: np.ndarray   # objective after every iteration for the winning restart


def fit_patches(patches, config=None, scales=None):
    """Fit every patch of ``(n, R, R[, k])`` counts; returns a list of :class:`PatchFit`.

    ``scales`` (per patch) normalize counts before fitting, defaulting to each
    patch's high percentile.  Colors in the result are in count units.
    """
    config = config or SolverConfig()
    patches = np.asarray(patches, dtype=np.float64)
    if patches.ndim == 3:
        patches = patches[..., None]
    n, R = patches.shape[0], patches.shape[1]
    if R < 5:
        raise InvalidParameterError(f"patch size must be >= 5, got {R}")
    if scales is None:
        scales = [intensity_scale(p) for p in patches]
    scales = np.broadcast_to(np.asarray(scales, dtype=np.float64), (n,))
    normalized = patches / scales[:, None, None, None]
    rng = np.random.default_rng(config.seed)
    starts = np.stack([initial_guesses(p, config, rng) for p in normalized])
    results = []
    for lo in range(0, n, config.chunk):
        hi = min(n, lo + config.chunk)
        rs = config.restarts
        theta = torch.as_tensor(starts[lo:hi].reshape(-1, 5))
        batch = torch.as_tensor(np.repeat(normalized[lo:hi], rs, axis=0))
        theta, f, trace = _descend(theta, batch, R, config)
        theta = theta.reshape(hi - lo, rs, 5).numpy()
        f = f.reshape(hi - lo, rs).numpy()
        trace = trace.reshape(hi - lo, rs, -1).numpy()
        best = f.argmin(axis=1)
        for i in range(hi - lo):
            g = theta[i, best[i]]
            colors = foj.estimate_wedge_colors(patches[lo + i], g[:2], g[2:])
            results.append(PatchFit(foj.JunctionParams(g[:2], g[2:], colors),
                                    float(f[i, best[i]]), trace[i, best[i]]))
    return results


def fit_patch(patch, config=None, alpha=None):
    """Best-of-restarts junction for one count patch and its final objective."""
    patch = as_counts(patch)
    fit = fit_patches(patch[None], config, None if alpha is None else [alpha])[0]
    return fit.params, fit.objective


def fit_image(image, grid, config=None, alpha=None, eps=DEFAULT_BOUNDARY_EPS, percentile=99.0):
    """Fit every patch of ``image`` directly; output matches :func:`ctbound.pipeline.infer`."""
    image = as_counts(image)
    scale = intensity_scale(image, alpha, percentile)
    timings = {}
    t = time.perf_counter()
    patches, _ = extract_patches(image, grid)
    timings["extract"] = (time.perf_counter() - t) * 1e3
    t = time.perf_counter()
    fits = fit_patches(patches, config, [scale] * len(patches))
    geometry = np.stack([f.params.geometry() for f in fits])
    params = _grid_from_geometry(geometry, patches, grid)
    timings["fit"] = (time.perf_counter() - t) * 1e3
    t = time.perf_counter()
    boundary, color = render_maps(params, grid, eps)
    timings["aggregate"] = (time.perf_counter() - t) * 1e3
    return InferenceResult(boundary, color, params, grid, scale, None, timings,
                           {"patch_fits": len(fits)})
