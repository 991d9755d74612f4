"""Training loops for the initialization and refinement stages."""
from __future__ import annotations

import copy
import csv
import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import losses, render
from .exceptions import ConfigurationError, InputError, TrainingError
from .foj import PatchGridSpec
from .models import save_model
from .nn import Adam, positional_encoding_grid
from .pipeline import extract_patches, init_geometry, intensity_scale, _grid_from_geometry

log = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "phase", "lr", "loss", "wall_ms")


def step_decay_lr(epoch, lr, decay, every):
    """``lr * decay ** floor(epoch / every)``."""
    return lr * decay ** (epoch // every)


def triangular_lr(epoch, low, high, cycle):
    """Linear ramp ``low -> high -> low`` over ``cycle`` epochs (fractional epochs allowed)."""
    frac = (epoch % cycle) / cycle
    return low + (high - low) * (1.0 - abs(2.0 * frac - 1.0))


@dataclass
class InitTrainConfig:
    epochs: int = 900
    batch_size: int = 32
    lr: float = 2e-4
    lr_decay: float = 0.5
    decay_every: int = 80
    eps_delta: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.decay_every < 1:
            raise ConfigurationError("epochs, batch_size and decay_every must be positive")
        if self.lr <= 0 or not 0 < self.lr_decay <= 1:
            raise ConfigurationError(f"invalid learning-rate settings {self.lr}, {self.lr_decay}")

    def lr_at(self, epoch):
        return step_decay_lr(epoch, self.lr, self.lr_decay, self.decay_every)


@dataclass
class RefineTrainConfig:
    phase1_epochs: int = 100
    phase1_lr: float = 5e-5
    phase2_epochs: int = 1600
    lr_low: float = 1.75e-4
    lr_high: float = 3.5e-4
    cycle_epochs: float = 20.0
    batch_size: int = 16
    lambda_b: float = 0.5
    lambda_c: float = 0.1
    boundary_eps: float = 0.75
    eps_delta: float = 0.05
    crop_tokens: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.phase1_epochs < 0 or self.phase2_epochs < 0 or self.batch_size < 1:
            raise ConfigurationError("phase epochs must be >= 0 and batch_size >= 1")
        if self.lambda_b < 0 or self.lambda_c < 0:
            raise ConfigurationError("loss weights must be non-negative")
        if not 0 < self.lr_low <= self.lr_high or self.phase1_lr <= 0 or self.cycle_epochs <= 0:
            raise ConfigurationError("invalid refinement learning-rate settings")

    def lr_at(self, phase, epoch):
        if phase == "ref1":
            return self.phase1_lr
        return triangular_lr(epoch, self.lr_low, self.lr_high, self.cycle_epochs)


def write_log(path, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(LOG_COLUMNS)
        for row in rows:
            writer.writerow([row[0], row[1], f"{row[2]:.6g}", f"{row[3]:.8g}", f"{row[4]:.1f}"])


# ------------------------------------------------------------------ init stage


@dataclass
class PatchTensors:
    """Training arrays for the initialization stage."""

    patches: torch.Tensor       # (n, R, R, k), counts / alpha
    vertex: torch.Tensor        # (n, 2)
    angles: torch.Tensor        # (n, 3)
    colors: torch.Tensor        # (n, 3, k), clean units

    @classmethod
    def from_samples(cls, samples):
        if not samples:
            raise InputError("empty training set")
        patches = np.stack([s.noisy.normalized() for s in samples])
        return cls(torch.as_tensor(patches, dtype=torch.float32),
                   torch.as_tensor(np.stack([s.truth.vertex for s in samples]), dtype=torch.float32),
                   torch.as_tensor(np.stack([s.truth.angles for s in samples]), dtype=torch.float32),
                   torch.as_tensor(np.stack([s.truth.colors for s in samples]), dtype=torch.float32))

    def __len__(self):
        return self.patches.shape[0]


def _init_batch_loss(model, data, idx, eps_delta):
    x = data.patches[idx]
    geometry = model(x)
    vertex = geometry[:, :2]
    angles = render.canonicalize_angles(geometry[:, 2:])
    weights = render.wedge_weights(vertex, angles, x.shape[1], eps_delta)
    colors = render.wedge_colors(x, weights)
    return losses.loss_init(vertex, angles, colors, data.vertex[idx], data.angles[idx],
                            data.colors[idx], x.shape[1], eps_delta)


def init_stage_loss(model, data, eps_delta=0.05, batch_size=256):
    """Mean reconstruction loss of ``model`` over a whole :class:`PatchTensors` set."""
    total = 0.0
    with torch.no_grad():
        for start in range(0, len(data), batch_size):
            idx = torch.arange(start, min(start + batch_size, len(data)))
            total += float(_init_batch_loss(model, data, idx, eps_delta)) * len(idx)
    return total / len(data)


def train_init(model, data, config, checkpoint_dir=None, callback=None):
    """Adam on the reconstruction loss with a step-decay schedule.

    Deterministic for a fixed ``config.seed`` on one worker.  Saves a
    checkpoint at every decay boundary when ``checkpoint_dir`` is given.  A
    non-finite loss restores the last good weights and raises
    :class:`TrainingError`.  Returns the per-epoch log rows.
    """
    if not isinstance(data, PatchTensors):
        data = PatchTensors.from_samples(data)
    rng = np.random.default_rng(config.seed)
    opt = Adam(model.named_parameters(), lr=config.lr)
    rows = []
    last_good = copy.deepcopy(model.state_dict())
    model.train()
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        opt.lr = config.lr_at(epoch)
        order = rng.permutation(len(data))
        total = 0.0
        for start in range(0, len(data), config.batch_size):
            idx = torch.as_tensor(order[start:start + config.batch_size])
            loss = _init_batch_loss(model, data, idx, config.eps_delta)
            if not torch.isfinite(loss):
                _abort(model, last_good, checkpoint_dir, "init", epoch)
            opt.zero_grad()
            loss.backward()
            try:
                opt.step()
            except TrainingError:
                _abort(model, last_good, checkpoint_dir, "init", epoch)
            total += loss.item() * len(idx)
        wall = (time.perf_counter() - t0) * 1e3
        rows.append((epoch, "init", opt.lr, total / len(data), wall))
        log.info("init epoch %d lr %.3g loss %.6f", epoch, opt.lr, total / len(data))
        last_good = copy.deepcopy(model.state_dict())
        if checkpoint_dir is not None and (epoch + 1) % config.decay_every == 0:
            save_model(model, Path(checkpoint_dir) / f"init_epoch{epoch + 1:04d}.ckpt")
        if callback is not None:
            callback(rows[-1])
    model.eval()
    return rows


def _abort(model, last_good, checkpoint_dir, stage, epoch):
    model.load_state_dict(last_good)
    model.eval()
    if checkpoint_dir is not None:
        save_model(model, Path(checkpoint_dir) / f"{stage}_last_good.ckpt")
    raise TrainingError(f"{stage} training diverged in epoch {epoch}; restored last good weights")


# --------------------------------------------------------------- refine stage


@dataclass
class RefineItem:
    """One training image prepared for the refinement stage (all arrays in alpha units)."""

    image: np.ndarray           # (H, W, k) counts / scale
    grid: PatchGridSpec
    init_geometry: np.ndarray   # (M, N, 5)
    init_colors: np.ndarray     # (M, N, 3, k) / scale
    truth_geometry: np.ndarray  # (M, N, 5)


def prepare_refine_item(init_model, counts, alpha, grid, truth):
    """Run the frozen initialization stage on one image and pair it with its truth grid."""
    scale = intensity_scale(counts, alpha)
    patches, _ = extract_patches(counts, grid)
    geometry = init_geometry(init_model, patches, scale)
    params = _grid_from_geometry(geometry, patches, grid)
    return RefineItem(np.asarray(counts, dtype=np.float64).reshape(
                          grid.image_height, grid.image_width, -1) / scale,
                      grid, params.geometry(), params.colors / scale, truth.geometry())


def _crop(item, size, rng):
    M, N = item.grid.shape
    if not size or (size >= M and size >= N):
        return item, 0, 0
    tm, tn = min(size, M), min(size, N)
    m0 = int(rng.integers(0, M - tm + 1))
    n0 = int(rng.integers(0, N - tn + 1))
    g = item.grid
    sub = PatchGridSpec((tm - 1) * g.stride + g.patch_size, (tn - 1) * g.stride + g.patch_size,
                        g.patch_size, g.stride, g.channels)
    r0, c0 = m0 * g.stride, n0 * g.stride
    cropped = RefineItem(item.image[r0:r0 + sub.image_height, c0:c0 + sub.image_width], sub,
                         item.init_geometry[m0:m0 + tm, n0:n0 + tn],
                         item.init_colors[m0:m0 + tm, n0:n0 + tn],
                         item.truth_geometry[m0:m0 + tm, n0:n0 + tn])
    return cropped, m0, n0


def _refine_batch(model, items, offsets):
    """Stack same-size crops and run the encoder once; returns refined ``(B, T, 5)``."""
    geometry = torch.as_tensor(np.stack([it.init_geometry.reshape(-1, 5) for it in items]),
                               dtype=torch.float32)
    k = items[0].init_colors.shape[-1]
    colors = torch.as_tensor(np.stack([it.init_colors.reshape(-1, 3, k) for it in items]),
                             dtype=torch.float32)
    pos = []
    for it, (m0, n0) in zip(items, offsets):
        M, N = it.grid.shape
        rows, cols = np.meshgrid(np.arange(m0, m0 + M), np.arange(n0, n0 + N), indexing="ij")
        pos.append(positional_encoding_grid(rows, cols, model.d))
    pos = torch.as_tensor(np.stack(pos), dtype=torch.float32)
    return model(geometry, colors, pos)


def _refine_loss(model, items, offsets, phase, config):
    refined = _refine_batch(model, items, offsets)
    if phase == "ref1":
        truth = torch.as_tensor(np.stack([it.truth_geometry.reshape(-1, 5) for it in items]),
                                dtype=torch.float32)
        return losses.loss_ref1(refined, truth)
    total = 0.0
    for b, it in enumerate(items):
        image = torch.as_tensor(it.image, dtype=torch.float32)
        total = total + losses.loss_ref2(
            refined[b, :, :2], refined[b, :, 2:], image, it.grid, config.lambda_b,
            config.lambda_c, config.boundary_eps, config.eps_delta, reduction="mean")
    return total / len(items)


def train_refine(model, items, config, checkpoint_dir=None, callback=None):
    """Two sequential phases: parameter supervision, then image consistency.

    Each epoch visits every image once, as a random crop of ``crop_tokens``
    patches per side when that is set.  The optimizer state is reset between
    phases.  Returns the per-epoch log rows.
    """
    if not items:
        raise InputError("empty refinement training set")
    shapes = {it.grid.shape for it in items}
    if len(shapes) > 1 and not config.crop_tokens:
        raise ConfigurationError("images of different sizes need crop_tokens > 0")
    rng = np.random.default_rng(config.seed)
    rows = []
    last_good = copy.deepcopy(model.state_dict())
    model.train()
    for phase, epochs in (("ref1", config.phase1_epochs), ("ref2", config.phase2_epochs)):
        opt = Adam(model.named_parameters(), lr=config.lr_at(phase, 0))
        steps = math.ceil(len(items) / config.batch_size)
        for epoch in range(epochs):
            t0 = time.perf_counter()
            order = rng.permutation(len(items))
            total = 0.0
            for step in range(steps):
                opt.lr = config.lr_at(phase, epoch + step / steps)
                batch = [_crop(items[i], config.crop_tokens, rng)
                         for i in order[step * config.batch_size:(step + 1) * config.batch_size]]
                crops = [b[0] for b in batch]
                offsets = [(b[1], b[2]) for b in batch]
                loss = _refine_loss(model, crops, offsets, phase, config)
                if not torch.isfinite(loss):
                    _abort(model, last_good, checkpoint_dir, "refine", epoch)
                opt.zero_grad()
                loss.backward()
                try:
                    opt.step()
                except TrainingError:
                    _abort(model, last_good, checkpoint_dir, "refine", epoch)
                total += loss.item() * len(crops)
            wall = (time.perf_counter() - t0) * 1e3
            rows.append((epoch, phase, opt.lr, total / len(items), wall))
            log.info("%s epoch %d lr %.3g loss %.6f", phase, epoch, opt.lr, total / len(items))
            last_good = copy.deepcopy(model.state_dict())
            if callback is not None:
                callback(rows[-1])
        if checkpoint_dir is not None and epochs:
            save_model(model, Path(checkpoint_dir) / f"refine_{phase}.ckpt")
    model.eval()
    return rows
