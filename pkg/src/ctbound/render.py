"""Differentiable (torch) rendering of junction patches.

Batched counterparts of the hard operations in :mod:`ctbound.foj`.  Hard
wedge indicators are replaced by :func:`wedge_weights`, arctangent-smoothed
signed distances to each wedge, so that losses carry gradients to the vertex and
the angles.  Shapes: ``vertex (B, 2)``, ``angles (B, 3)``, patches
``(B, R, R, k)``.
"""
from __future__ import annotations

import math

import torch
import torch.nn.functional as F

from .exceptions import InvalidParameterError

TWO_PI = 2.0 * math.pi


def patch_coordinates(R, dtype=torch.float64, device=None):
    c = torch.arange(R, dtype=dtype, device=device) - (R - 1) / 2.0
    y, x = torch.meshgrid(c, c, indexing="ij")
    return x, y


def canonicalize_angles(raw):
    """Wrap into ``[0, 2*pi)`` and sort along the last axis (differentiable a.e.)."""
    wrapped = torch.remainder(raw, TWO_PI)
    return torch.sort(wrapped, dim=-1).values


def smooth_heaviside(d, eps):
    return 0.5 + torch.atan(d / eps) / math.pi


def hard_labels(vertex, angles, R):
    """0-based wedge label of every pixel, ``(B, R, R)``; same sign tests as the NumPy path."""
    x, y = patch_coordinates(R, vertex.dtype, vertex.device)
    dx = (x - vertex[:, 0, None, None])[..., None]
    dy = (y - vertex[:, 1, None, None])[..., None]
    a = angles.detach()
    s = dy * torch.cos(a)[:, None, None] - dx * torch.sin(a)[:, None, None]
    s_next = torch.roll(s, -1, dims=-1)
    gap = torch.roll(a, -1, dims=-1) - a
    gap = torch.cat([gap[:, :2], TWO_PI + gap[:, 2:]], dim=-1)
    convex = (gap <= math.pi)[:, None, None]
    inside = torch.where(convex, (s >= 0) & (s_next <= 0), (s >= 0) | (s_next <= 0))
    return torch.argmax(inside.to(torch.uint8), dim=-1)


def wedge_weights(vertex, angles, R, eps_delta):
    """Soft wedge memberships ``(B, 3, R, R)`` summing to one over the wedge axis.

    Each wedge gets the smoothed Heaviside of its signed distance: the
    distance to the nearer of its two rays, positive inside.  ``angles`` must
    already be canonical (sorted, in ``[0, 2*pi)``).
    """
    if eps_delta <= 0:
        raise InvalidParameterError(f"eps_delta must be positive, got {eps_delta}")
    r = ray_distances(vertex, angles, R)
    d = torch.minimum(r, r[:, [1, 2, 0]])
    inside = hard_labels(vertex, angles, R)[:, None] == torch.arange(3, device=r.device)[:, None, None]
    raw = smooth_heaviside(torch.where(inside, d, -d), eps_delta)
    return raw / raw.sum(dim=1, keepdim=True)


def wedge_colors(patches, weights, empty_mass=1e-3):
    """Weighted wedge means ``(B, 3, k)``; nearly empty wedges fall back to the patch mean."""
    mean = patches.mean(dim=(1, 2))
    mass = weights.sum(dim=(2, 3))
    total = torch.einsum("bjhw,bhwk->bjk", weights, patches)
    return (total + empty_mass * mean[:, None, :]) / (mass + empty_mass)[..., None]


def least_squares_colors(patches, weights, ridge=1e-3):
    """Colors ``(B, 3, k)`` minimizing the smooth reconstruction error for fixed weights.

    Solves ``(W^T W + ridge I) c = W^T p + ridge * mean`` per patch, so an empty
    wedge falls back to the patch mean.  Equals the wedge mean when the
    weights are hard.
    """
    mean = patches.mean(dim=(1, 2))
    gram = torch.einsum("bihw,bjhw->bij", weights, weights)
    rhs = torch.einsum("bjhw,bhwk->bjk", weights, patches)
    eye = torch.eye(3, dtype=weights.dtype, device=weights.device)
    return torch.linalg.solve(gram + ridge * eye, rhs + ridge * mean[:, None, :])


def render_colors(weights, colors):
    """Color maps ``(B, R, R, k)`` from soft weights and wedge colors."""
    return torch.einsum("bjhw,bjk->bhwk", weights, colors)


def ray_distances(vertex, angles, R):
    """Distance of every pixel to every edge ray, ``(B, 3, R, R)``."""
    x, y = patch_coordinates(R, vertex.dtype, vertex.device)
    dx = (x - vertex[:, 0, None, None])[:, None]
    dy = (y - vertex[:, 1, None, None])[:, None]
    cos, sin = torch.cos(angles)[..., None, None], torch.sin(angles)[..., None, None]
    along = dx * cos + dy * sin
    across = dy * cos - dx * sin
    # sqrt(x^2 + tiny) keeps the gradient finite on the ray itself
    across = torch.sqrt(across * across + 1e-12)
    radial = torch.sqrt(dx * dx + dy * dy + 1e-12)
    return torch.where(along >= 0, across, radial)


def boundary_maps(vertex, angles, R, eps):
    """Per-patch boundary maps ``(B, R, R)``, optionally differentiable."""
    if eps <= 0:
        raise InvalidParameterError(f"eps must be positive, got {eps}")
    d = ray_distances(vertex, angles, R).min(dim=1).values
    return eps * eps / (eps * eps + d * d)


def fold_sum(per_patch, grid):
    """Overlap-add ``(M*N, R, R, c)`` patch tensors into an ``(H, W, c)`` image."""
    R, s = grid.patch_size, grid.stride
    P, _, _, c = per_patch.shape
    cols = per_patch.permute(3, 1, 2, 0).reshape(1, c * R * R, P)
    out = F.fold(cols, (grid.image_height, grid.image_width), R, stride=s)
    return out[0].permute(1, 2, 0)


def unfold_patches(image, grid):
    """``(H, W, c)`` tensor to ``(M*N, R, R, c)`` patches, row-major in ``(m, n)``."""
    R, s = grid.patch_size, grid.stride
    c = image.shape[2]
    cols = F.unfold(image.permute(2, 0, 1)[None], R, stride=s)[0]
    return cols.reshape(c, R, R, -1).permute(3, 1, 2, 0)


def fold_mean(per_patch, grid):
    """Average of overlapping patch values; uncovered pixels are zero."""
    ones = torch.ones(per_patch.shape[:3] + (1,), dtype=per_patch.dtype)
    counts = fold_sum(ones, grid)
    return fold_sum(per_patch, grid) / counts.clamp_min(1.0)
