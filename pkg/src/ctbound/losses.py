"""Training objectives for the two stages.

All losses take torch tensors and stay differentiable with respect to the
vertex and the angles.  Image values are in photon-level-normalized units
(counts divided by ``alpha``).
"""
from __future__ import annotations

import math

import torch

from . import render

TWO_PI = 2.0 * math.pi


def render_smooth(vertex, angles, colors, R, eps_delta):
    """Smoothly rendered color maps ``(B, R, R, k)``; angles must be canonical."""
    weights = render.wedge_weights(vertex, angles, R, eps_delta)
    return render.render_colors(weights, colors)


def loss_init(pred_vertex, pred_angles, pred_colors, true_vertex, true_angles, true_colors,
              R, eps_delta=0.05):
    """Mean squared difference between predicted and true patch color maps.

    Both sides go through the same smooth renderer, so identical parameters
    give exactly zero.  Averaged over the batch, the pixels and the channels.
    """
    pred = render_smooth(pred_vertex, render.canonicalize_angles(pred_angles), pred_colors,
                         R, eps_delta)
    true = render_smooth(true_vertex, render.canonicalize_angles(true_angles), true_colors,
                         R, eps_delta)
    return torch.mean((pred - true) ** 2)


def wrap_angle(d):
    """Map angle differences to ``(-pi, pi]``."""
    return math.pi - torch.remainder(math.pi - d, TWO_PI)


def loss_ref1(pred_geometry, true_geometry):
    """Direct parameter supervision, averaged over patches.

    ``||dx||^2`` plus the squared wrapped angle differences.  Both angle
    triples are sorted first, and the best of the three cyclic alignments is
    used, because a sorted triple can start at any of its edges.
    """
    pred_geometry = pred_geometry.reshape(-1, 5)
    true_geometry = true_geometry.reshape(-1, 5)
    vertex_term = ((pred_geometry[:, :2] - true_geometry[:, :2]) ** 2).sum(-1)
    pa = render.canonicalize_angles(pred_geometry[:, 2:])
    ta = render.canonicalize_angles(true_geometry[:, 2:])
    shifts = torch.stack([(wrap_angle(torch.roll(pa, k, dims=-1) - ta) ** 2).sum(-1)
                          for k in range(3)], dim=-1)
    return torch.mean(vertex_term + shifts.min(dim=-1).values)


def loss_ref2(vertex, angles, image, grid, lambda_b=0.5, lambda_c=0.1, eps=0.75,
              eps_delta=0.05, reduction="sum", return_terms=False):
    """Image-consistency loss ``l_p + lambda_b * l_b + lambda_c * l_c`` for one image.

    ``vertex (M*N, 2)`` and ``angles (M*N, 3)`` are the refined geometry of
    every patch in row-major order and ``image`` is ``(H, W, k)``.  Wedge
    colors are re-estimated from the image under that geometry.

    * ``l_p``: wedge colors against the image pixels they cover,
    * ``l_b``: each patch's boundary map against the global average,
    * ``l_c``: each wedge color against the global color map.

    With ``reduction="sum"`` the terms are the plain sums over patches,
    wedges and pixels; ``"mean"`` divides all three by ``M*N*R*R``.
    """
    R = grid.patch_size
    angles = render.canonicalize_angles(angles)
    patches = render.unfold_patches(image, grid)
    weights = render.wedge_weights(vertex, angles, R, eps_delta)
    colors = render.wedge_colors(patches, weights)

    diff_p = ((colors[:, :, None, None, :] - patches[:, None]) ** 2).sum(-1)
    l_p = (weights * diff_p).sum()

    bmaps = render.boundary_maps(vertex, angles, R, eps)
    global_b = render.fold_mean(bmaps[..., None], grid)
    l_b = ((render.unfold_patches(global_b, grid)[..., 0] - bmaps) ** 2).sum()

    cmaps = render.render_colors(weights, colors)
    global_c = render.fold_mean(cmaps, grid)
    gc = render.unfold_patches(global_c, grid)
    diff_c = ((colors[:, :, None, None, :] - gc[:, None]) ** 2).sum(-1)
    l_c = (weights * diff_c).sum()

    if reduction == "mean":
        scale = float(vertex.shape[0] * R * R)
        l_p, l_b, l_c = l_p / scale, l_b / scale, l_c / scale
    elif reduction != "sum":
        raise ValueError(f"unknown reduction {reduction!r}")
    total = l_p + lambda_b * l_b + lambda_c * l_c
    if return_terms:
        return total, {"l_p": l_p, "l_b": l_b, "l_c": l_c}
    return total
