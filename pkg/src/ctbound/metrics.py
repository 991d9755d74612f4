"""Evaluation: edge contrast, boundary selection, localization error, color-map scores."""
from __future__ import annotations

import csv
import io
import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.ndimage import distance_transform_edt, gaussian_filter

from . import foj
from .exceptions import InputError, InvalidParameterError
from .pipeline import DEFAULT_BOUNDARY_EPS

THRESHOLDS = (0.0, 0.1, 0.2)
BINARIZE_THRESHOLD = 0.5


class EmptyPredictionWarning(UserWarning):
    """A binarized prediction had no boundary pixels; its error is reported as NaN."""


def relative_color_difference(colors, alpha):
    """Per-edge contrast ``||c_j - c_{j+1}|| / alpha`` for colors of shape ``(..., 3, k)``.

    Accepts a :class:`~ctbound.foj.JunctionParams`, a params grid, or a raw
    color array.  Entry ``j`` compares wedges ``j`` and ``j+1`` (mod 3); that
    pair is separated by ray ``j+1``.
    """
    if not alpha > 0:
        raise InvalidParameterError(f"alpha must be positive, got {alpha}")
    colors = np.asarray(getattr(colors, "colors", colors), dtype=np.float64)
    if colors.ndim < 2 or colors.shape[-2] != 3:
        raise InputError(f"expected colors of shape (..., 3, k), got {colors.shape}")
    return np.linalg.norm(colors - np.roll(colors, -1, axis=-2), axis=-1) / alpha


def edge_mask(params_grid, threshold, alpha):
    """``(M, N, 3)`` mask of rays whose two adjacent wedges differ by at least ``threshold``."""
    dc = relative_color_difference(params_grid.colors, alpha)
    # ray r separates wedges r-1 and r, whose contrast is entry r-1
    return np.roll(dc, 1, axis=-1) >= threshold


def select_boundaries(params_grid, threshold, grid, alpha=1.0, eps=DEFAULT_BOUNDARY_EPS):
    """Global boundary field keeping only edges with contrast ``>= threshold``."""
    if not threshold >= 0:
        raise InvalidParameterError(f"threshold must be >= 0, got {threshold}")
    per_patch = foj.render_grid_boundaries(params_grid, grid.patch_size, eps,
                                           edge_mask=edge_mask(params_grid, threshold, alpha))
    return foj.aggregate_boundary(per_patch, grid)


def _check_truth(truth_mask, shape):
    truth = np.asarray(truth_mask, dtype=bool)
    if truth.shape != shape:
        raise InputError(f"prediction {shape} and truth {truth.shape} differ in shape")
    if not truth.any():
        raise InputError("truth boundary mask is empty")
    return truth


def edge_localization_error(pred, truth_mask, threshold=BINARIZE_THRESHOLD):
    """Mean distance from each predicted boundary pixel to the nearest truth pixel.

    ``pred`` is binarized with ``pred >= threshold``.  An empty prediction
    yields NaN and an :class:`EmptyPredictionWarning`.
    """
    pred = np.asarray(pred, dtype=np.float64)
    truth = _check_truth(truth_mask, pred.shape)
    on = pred >= threshold
    if not on.any():
        warnings.warn("prediction has no boundary pixels above the threshold",
                      EmptyPredictionWarning, stacklevel=2)
        return math.nan
    return float(distance_transform_edt(~truth)[on].mean())


def chamfer_distance(pred, truth_mask, threshold=BINARIZE_THRESHOLD):
    """Symmetric variant: average of the pred-to-truth and truth-to-pred mean distances."""
    pred = np.asarray(pred, dtype=np.float64)
    truth = _check_truth(truth_mask, pred.shape)
    on = pred >= threshold
    if not on.any():
        warnings.warn("prediction has no boundary pixels above the threshold",
                      EmptyPredictionWarning, stacklevel=2)
        return math.nan
    forward = distance_transform_edt(~truth)[on].mean()
    backward = distance_transform_edt(~on)[truth].mean()
    return float(0.5 * (forward + backward))


_SSIM_SIGMA = 1.5
_SSIM_RADIUS = 5      # 11x11 window
_K1, _K2 = 0.01, 0.03


def _ssim_channel(a, b, peak):
    def blur(z):
        return gaussian_filter(z, _SSIM_SIGMA, mode="reflect", truncate=_SSIM_RADIUS / _SSIM_SIGMA)

    c1, c2 = (_K1 * peak) ** 2, (_K2 * peak) ** 2
    mu_a, mu_b = blur(a), blur(b)
    var_a = blur(a * a) - mu_a ** 2
    var_b = blur(b * b) - mu_b ** 2
    cov = blur(a * b) - mu_a * mu_b
    s = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2))
    r = _SSIM_RADIUS
    return s[r:-r, r:-r].mean()


def ssim(pred, truth, peak):
    """Mean SSIM over the fully-covered window positions, averaged over channels."""
    pred, truth = _pair(pred, truth)
    if min(pred.shape[:2]) <= 2 * _SSIM_RADIUS:
        raise InputError(f"images must be larger than 11x11 for SSIM, got {pred.shape[:2]}")
    return float(np.mean([_ssim_channel(pred[..., c], truth[..., c], peak)
                          for c in range(pred.shape[2])]))


def _pair(pred, truth):
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise InputError(f"prediction {pred.shape} and truth {truth.shape} differ in shape")
    if pred.ndim == 2:
        pred, truth = pred[..., None], truth[..., None]
    return pred, truth


def color_map_quality(pred, truth, peak=1.0):
    """``(SSIM, PSNR in dB, MSE)``; PSNR is ``inf`` for identical images."""
    if not peak > 0:
        raise InvalidParameterError(f"peak must be positive, got {peak}")
    pred, truth = _pair(pred, truth)
    mse = float(np.mean((pred - truth) ** 2))
    psnr = math.inf if mse == 0 else 10.0 * math.log10(peak * peak / mse)
    return ssim(pred, truth, peak), psnr, mse


REPORT_COLUMNS = ("label", "D(0)", "D(0.1)", "D(0.2)", "SSIM", "PSNR", "MSE", "time_s")


@dataclass
class EvalReport:
    d: dict                     # threshold -> mean localization error in pixels
    ssim: float
    psnr: float
    mse: float
    wall_time: float = math.nan
    label: str = ""
    images: int = 1
    empty: dict = field(default_factory=dict)   # threshold -> count of empty predictions
    binarize_threshold: float = BINARIZE_THRESHOLD
    peak: float = 1.0

    def row(self):
        return [self.label] + [self.d.get(t, math.nan) for t in THRESHOLDS] + \
               [self.ssim, self.psnr, self.mse, self.wall_time]

    def header_note(self):
        flagged = {t: n for t, n in self.empty.items() if n}
        note = (f"binarize >= {self.binarize_threshold}, PSNR peak {self.peak} "
                f"(normalized units), images {self.images}")
        if flagged:
            note += ", empty predictions " + ", ".join(f"D({t:g}): {n}" for t, n in flagged.items())
        return note

    def as_dict(self):
        return asdict(self)


def reports_to_csv(reports):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(REPORT_COLUMNS)
    for rep in reports:
        writer.writerow([v if isinstance(v, str) else repr(float(v)) for v in rep.row()])
    return buf.getvalue()


def format_table(reports):
    """Fixed-width table in the column order D(0), D(0.1), D(0.2), SSIM, PSNR, MSE."""
    width = max([len(REPORT_COLUMNS[0])] + [len(r.label) for r in reports])
    lines = [f"# {reports[0].header_note()}" if reports else "# no reports",
             f"{REPORT_COLUMNS[0]:<{width}}" + "".join(f"{c:>10}" for c in REPORT_COLUMNS[1:])]
    for rep in reports:
        values = rep.row()
        lines.append(f"{values[0]:<{width}}" + "".join(f"{v:>10.4f}" for v in values[1:]))
    return "\n".join(lines) + "\n"


def evaluate_params(pred_params, pred_color, pred_alpha, truth_params, truth_color, grid,
                    thresholds=THRESHOLDS, eps=DEFAULT_BOUNDARY_EPS,
                    binarize=BINARIZE_THRESHOLD):
    """Per-image scores: ``({threshold: D}, ssim, psnr, mse, {threshold: empty?})``.

    Prediction colors are photon counts at ``pred_alpha``; truth colors are in
    clean units, so both sides are compared in normalized units.
    """
    d, empty = {}, {}
    for t in thresholds:
        truth_mask = select_boundaries(truth_params, t, grid, 1.0, eps) >= binarize
        field_ = select_boundaries(pred_params, t, grid, pred_alpha, eps)
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always", EmptyPredictionWarning)
            d[t] = edge_localization_error(field_, truth_mask, binarize)
        empty[t] = any(issubclass(w.category, EmptyPredictionWarning) for w in caught)
    quality = color_map_quality(np.asarray(pred_color) / pred_alpha, truth_color, 1.0)
    return d, quality, empty


def summarize(per_image, label="", wall_time=math.nan, thresholds=THRESHOLDS,
              binarize=BINARIZE_THRESHOLD):
    """Average :func:`evaluate_params` outputs over images into one :class:`EvalReport`.

    D averages skip images whose prediction was empty; those are counted in
    ``empty``.  If every image is empty the average is NaN.
    """
    d, empty = {}, {}
    for t in thresholds:
        vals = [r[0][t] for r in per_image if not r[2][t]]
        d[t] = float(np.mean(vals)) if vals else math.nan
        empty[t] = sum(bool(r[2][t]) for r in per_image)
    q = np.array([r[1] for r in per_image], dtype=np.float64)
    return EvalReport(d, float(q[:, 0].mean()), float(q[:, 1].mean()), float(q[:, 2].mean()),
                      wall_time, label, len(per_image), empty, binarize, 1.0)
