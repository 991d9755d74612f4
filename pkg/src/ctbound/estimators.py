"""scikit-learn style wrappers around the two learned stages and the direct solver.

The estimators follow the usual contract: constructor arguments are stored
unchanged (so ``get_params``/``set_params``/``clone`` work), learned state
lives in attributes with a trailing underscore, and ``fit`` returns ``self``.
"""
from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import foj, pipeline, solver, training
from .exceptions import InputError
from .foj import JunctionParams, PatchGridSpec
from .models import InitNet, RefineNet
from .noise import PatchSample, PhotonImage


def check_patches(X):
    """Count patches as float64 ``(n, R, R, k)``; accepts ``(n, R, R)``."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 3:
        X = X[..., None]
    if X.ndim != 4 or X.shape[1] != X.shape[2]:
        raise InputError(f"expected square patches (n, R, R[, k]), got shape {X.shape}")
    if X.shape[0] == 0:
        raise InputError("no patches given")
    if not np.all(np.isfinite(X)) or X.min() < 0:
        raise InputError("patches must hold finite, non-negative counts")
    return X


def check_alpha(alpha, n):
    """Per-sample photon levels ``(n,)``; ``None`` means one percentile scale per sample."""
    if alpha is None:
        return None
    alpha = np.broadcast_to(np.asarray(alpha, dtype=np.float64), (n,)).copy()
    if not np.all(alpha > 0):
        raise InputError("photon levels must be positive")
    return alpha


def check_geometry(y, n):
    y = np.asarray(y, dtype=np.float64)
    if y.shape != (n, 5):
        raise InputError(f"expected geometry of shape ({n}, 5), got {y.shape}")
    return y


def _scales(X, alpha):
    if alpha is not None:
        return alpha
    return np.array([pipeline.intensity_scale(x) for x in X])


class InitStage(BaseEstimator, TransformerMixin):
    """CNN that maps one noisy patch to a junction geometry ``(x0, y0, phi1..3)``."""

    def __init__(self, width=1.0, upsample_size=81, epochs=900, batch_size=32, lr=2e-4,
                 lr_decay=0.5, decay_every=80, eps_delta=0.05, seed=0):
        self.width = width
        self.upsample_size = upsample_size
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.lr_decay = lr_decay
        self.decay_every = decay_every
        self.eps_delta = eps_delta
        self.seed = seed

    def _config(self):
        return training.InitTrainConfig(self.epochs, self.batch_size, self.lr, self.lr_decay,
                                        self.decay_every, self.eps_delta, self.seed)

    def fit(self, X, y, alpha=None, colors=None):
        """Train on count patches ``X`` with true geometry ``y (n, 5)``.

        ``colors (n, 3, k)`` are the true wedge colors in normalized units;
        when omitted they are estimated from ``X`` under the true geometry.
        """
        X = check_patches(X)
        y = check_geometry(y, len(X))
        scales = _scales(X, check_alpha(alpha, len(X)))
        samples = []
        for i, (patch, geo, s) in enumerate(zip(X, y, scales)):
            c = (np.asarray(colors[i], dtype=np.float64) if colors is not None
                 else foj.estimate_wedge_colors(patch / s, geo[:2], geo[2:]))
            truth = JunctionParams(geo[:2], geo[2:], c)
            samples.append(PatchSample(PhotonImage(patch, s), None, truth, self.seed, i))
        data = training.PatchTensors.from_samples(samples)
        torch.manual_seed(self.seed)
        self.model_ = InitNet(X.shape[3], X.shape[1], self.upsample_size, self.width)
        self.history_ = training.train_init(self.model_, data, self._config())
        self.n_channels_ = X.shape[3]
        self.patch_size_ = X.shape[1]
        return self

    def predict(self, X, alpha=None):
        """Geometry ``(n, 5)`` with canonical angles."""
        check_is_fitted(self, "model_")
        X = check_patches(X)
        scales = _scales(X, check_alpha(alpha, len(X)))
        return pipeline.init_geometry(self.model_, X / scales[:, None, None, None], 1.0)

    def transform(self, X, alpha=None):
        return self.predict(X, alpha)

    def score(self, X, y, alpha=None):
        """Negative mean vertex distance to the true geometry, in pixels."""
        pred = self.predict(X, alpha)
        y = check_geometry(y, len(pred))
        return -float(np.mean(np.hypot(*(pred[:, :2] - y[:, :2]).T)))


class RefineStage(BaseEstimator):
    """Transformer refinement on top of a fitted :class:`InitStage`."""

    def __init__(self, init_stage=None, patch_size=21, stride=3, d=128, layers=8, heads=8,
                 d_ff=256, phase1_epochs=100, phase1_lr=5e-5, phase2_epochs=1600,
                 lr_low=1.75e-4, lr_high=3.5e-4, cycle_epochs=20.0, batch_size=16,
                 lambda_b=0.5, lambda_c=0.1, crop_tokens=0, seed=0):
        self.init_stage = init_stage
        self.patch_size = patch_size
        self.stride = stride
        self.d = d
        self.layers = layers
        self.heads = heads
        self.d_ff = d_ff
        self.phase1_epochs = phase1_epochs
        self.phase1_lr = phase1_lr
        self.phase2_epochs = phase2_epochs
        self.lr_low = lr_low
        self.lr_high = lr_high
        self.cycle_epochs = cycle_epochs
        self.batch_size = batch_size
        self.lambda_b = lambda_b
        self.lambda_c = lambda_c
        self.crop_tokens = crop_tokens
        self.seed = seed

    def _grid(self, image):
        return PatchGridSpec.for_image(image, self.patch_size, self.stride)

    def fit(self, images, truths, alpha):
        """``images``: count arrays; ``truths``: matching params grids; ``alpha``: levels."""
        check_is_fitted(self.init_stage, "model_")
        alphas = check_alpha(alpha, len(images))
        items = []
        for image, truth, a in zip(images, truths, alphas):
            image = pipeline.as_counts(image)
            items.append(training.prepare_refine_item(self.init_stage.model_, image, a,
                                                      self._grid(image), truth))
        cfg = training.RefineTrainConfig(
            self.phase1_epochs, self.phase1_lr, self.phase2_epochs, self.lr_low, self.lr_high,
            self.cycle_epochs, self.batch_size, self.lambda_b, self.lambda_c,
            pipeline.DEFAULT_BOUNDARY_EPS, 0.05, self.crop_tokens, self.seed)
        torch.manual_seed(self.seed)
        self.model_ = RefineNet(items[0].image.shape[2], self.patch_size, self.d, self.layers,
                                self.heads, self.d_ff)
        self.history_ = training.train_refine(self.model_, items, cfg)
        return self

    def predict(self, image, alpha=None):
        """Refined params grid for one count image."""
        check_is_fitted(self, "model_")
        image = pipeline.as_counts(image)
        return pipeline.infer(image, self._grid(image), self.init_stage.model_, self.model_,
                              alpha=alpha).params


class CTBound(BaseEstimator, TransformerMixin):
    """Two-stage boundary detector: images in, boundary maps out.

    ``fit`` only checks that the supplied stages are trained; use the stage
    estimators (or the CLI) to train them.
    """

    def __init__(self, init_stage=None, refine_stage=None, patch_size=21, stride=3,
                 boundary_eps=pipeline.DEFAULT_BOUNDARY_EPS):
        self.init_stage = init_stage
        self.refine_stage = refine_stage
        self.patch_size = patch_size
        self.stride = stride
        self.boundary_eps = boundary_eps

    def fit(self, X=None, y=None):
        check_is_fitted(self.init_stage, "model_")
        if self.refine_stage is not None:
            check_is_fitted(self.refine_stage, "model_")
        self.is_fitted_ = True
        return self

    def predict(self, image, alpha=None):
        """Full :class:`~ctbound.pipeline.InferenceResult` for one count image."""
        check_is_fitted(self, "is_fitted_")
        image = pipeline.as_counts(image)
        grid = PatchGridSpec.for_image(image, self.patch_size, self.stride)
        refine = self.refine_stage.model_ if self.refine_stage is not None else None
        return pipeline.infer(image, grid, self.init_stage.model_, refine, alpha=alpha,
                              eps=self.boundary_eps)

    def transform(self, X, alpha=None):
        """Boundary maps ``(n, H, W)`` for a stack of images."""
        return np.stack([self.predict(x, alpha).boundary for x in X])


class DirectFoJ(BaseEstimator, TransformerMixin):
    """Per-patch direct fitting; needs no training, so ``fit`` only validates settings."""

    def __init__(self, restarts=4, iterations=100, step_size=1.0, eps_start=0.5, eps_end=0.05,
                 anneal_stages=4, seed=0, patch_size=21, stride=3,
                 boundary_eps=pipeline.DEFAULT_BOUNDARY_EPS):
        self.restarts = restarts
        self.iterations = iterations
        self.step_size = step_size
        self.eps_start = eps_start
        self.eps_end = eps_end
        self.anneal_stages = anneal_stages
        self.seed = seed
        self.patch_size = patch_size
        self.stride = stride
        self.boundary_eps = boundary_eps

    def fit(self, X=None, y=None):
        self.config_ = solver.SolverConfig(self.restarts, self.iterations, self.step_size,
                                           self.eps_start, self.eps_end, self.anneal_stages,
                                           seed=self.seed)
        return self

    def fit_patches(self, X, alpha=None):
        """Fitted geometry ``(n, 5)`` for count patches."""
        check_is_fitted(self, "config_")
        X = check_patches(X)
        fits = solver.fit_patches(X, self.config_, check_alpha(alpha, len(X)))
        return np.stack([f.params.geometry() for f in fits])

    def predict(self, image, alpha=None):
        check_is_fitted(self, "config_")
        image = pipeline.as_counts(image)
        grid = PatchGridSpec.for_image(image, self.patch_size, self.stride)
        return solver.fit_image(image, grid, self.config_, alpha, self.boundary_eps)

    def transform(self, X, alpha=None):
        return np.stack([self.predict(x, alpha).boundary for x in X])
