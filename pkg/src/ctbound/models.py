"""The two CT-Bound networks.

:class:`InitNet` is the AlexNet-style CNN that maps one (upsampled) patch to
vertex and angles.  :class:`RefineNet` embeds every patch's junction, adds
the 2D positional encoding and runs a transformer encoder over all patches
of an image at once.  Neither network predicts colors.
"""
from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import nn as tnn
from .exceptions import ConfigurationError, DimensionError

# (kind, full-width channels, kernel, stride, pad)
CNN_LAYOUT = [
    ("conv", 96, 5, 4, 2),
    ("pool", None, 3, 2, 0),
    ("conv", 256, 5, 1, 2),
    ("pool", None, 2, 2, 0),
    ("conv", 384, 3, 1, 1),
    ("conv", 384, 3, 1, 1),
    ("conv", 256, 3, 1, 1),
    ("pool", None, 3, 2, 0),
]
FC_LAYOUT = [4096, 1024]
GEOMETRY_SIZE = 5


def _scaled(channels, width):
    return max(1, int(round(channels * width)))


class InitNet(nn.Module):
    """CNN from patch pixels to ``(x0, y0, phi1, phi2, phi3)``.

    ``width`` scales every channel and hidden-unit count; ``width=1`` is the
    full-size network.  Patches are bilinearly resized to ``upsample_size``
    before the first convolution.  Vertex outputs are in pixels, angle
    outputs in radians and not yet wrapped or sorted.
    """

    def __init__(self, channels=1, patch_size=21, upsample_size=81, width=1.0):
        super().__init__()
        if width <= 0:
            raise ConfigurationError(f"width must be positive, got {width}")
        self.channels, self.patch_size = channels, patch_size
        self.upsample_size, self.width = upsample_size, width
        layers, c = [], channels
        for kind, c_out, kernel, stride, pad in CNN_LAYOUT:
            if kind == "conv":
                c_out = _scaled(c_out, width)
                layers += [tnn.Conv2d(c, c_out, kernel, stride, pad), nn.ReLU()]
                c = c_out
            else:
                layers.append(tnn.MaxPool2d(kernel, stride))
        self.features = nn.Sequential(*layers)
        spatial = self._feature_side(upsample_size)
        if spatial < 1:
            raise ConfigurationError(f"upsample_size {upsample_size} is too small for the CNN")
        n_in = c * spatial * spatial
        fc = []
        for units in FC_LAYOUT:
            units = _scaled(units, width)
            fc += [tnn.Linear(n_in, units), nn.ReLU()]
            n_in = units
        self.hidden = nn.Sequential(*fc)
        self.head = tnn.Linear(n_in, GEOMETRY_SIZE)
        with torch.no_grad():
            self.head.weight.mul_(0.1)
            # start from a centered, evenly spread junction
            self.head.bias.copy_(torch.tensor([0.0, 0.0, 0.0, 2.0 / 3.0, 4.0 / 3.0]))
        self.patch_evals = 0

    @staticmethod
    def _feature_side(size):
        for kind, _, kernel, stride, pad in CNN_LAYOUT:
            size = (size + 2 * pad - kernel) // stride + 1
        return size

    def prepare(self, patches):
        """``(B, R, R, k)`` normalized patches to the ``(B, k, U, U)`` network input."""
        if patches.dim() != 4 or patches.shape[3] != self.channels:
            raise DimensionError(
                f"expected patches shaped (B, R, R, {self.channels}), got {tuple(patches.shape)}")
        x = patches.permute(0, 3, 1, 2)
        if x.shape[-1] != self.upsample_size:
            x = F.interpolate(x, size=(self.upsample_size,) * 2, mode="bilinear",
                              align_corners=False)
        return x

    def forward(self, patches):
        x = self.prepare(patches)
        self.patch_evals += x.shape[0]
        raw = self.head(self.hidden(torch.flatten(self.features(x), 1)))
        half = self.patch_size / 2.0
        return torch.cat([raw[:, :2] * half, raw[:, 2:] * math.pi], dim=1)

    def layer_shapes(self, x):
        """Output shape of every conv/pool/fc layer for input ``x`` ``(B, k, U, U)``."""
        shapes = []
        for layer in self.features:
            x = layer(x)
            if not isinstance(layer, nn.ReLU):
                shapes.append(tuple(x.shape[1:]))
        x = torch.flatten(x, 1)
        for layer in self.hidden:
            x = layer(x)
            if not isinstance(layer, nn.ReLU):
                shapes.append(tuple(x.shape[1:]))
        shapes.append(tuple(self.head(x).shape[1:]))
        return shapes

    def hparams(self):
        return {"kind": "init", "channels": self.channels, "patch_size": self.patch_size,
                "upsample_size": self.upsample_size, "width": self.width}


class RefineNet(nn.Module):
    """Transformer refinement over all patches of an image.

    Input tokens are ``[x0/(R/2), y0/(R/2), phi/pi, colors/alpha]`` mapped to
    ``d`` dims plus the positional encoding.  The head predicts a correction
    that is added to the incoming geometry; it starts at zero, so an untrained
    model returns its input unchanged.
    """

    def __init__(self, channels=1, patch_size=21, d=128, layers=8, heads=8, d_ff=256):
        super().__init__()
        self.channels, self.patch_size = channels, patch_size
        self.d = d
        n_in = GEOMETRY_SIZE + 3 * channels
        self.embed = tnn.Linear(n_in, d)
        self.encoder = tnn.TransformerEncoder(d, layers, heads, d_ff)
        self.head = tnn.Linear(d, GEOMETRY_SIZE)
        with torch.no_grad():
            self.head.weight.zero_()
            self.head.bias.zero_()
        self.encoder_passes = 0

    def tokens(self, geometry, colors):
        """Per-patch input vectors ``(..., 5 + 3k)`` before embedding."""
        half = self.patch_size / 2.0
        return torch.cat([geometry[..., :2] / half, geometry[..., 2:] / math.pi,
                          colors.flatten(-2)], dim=-1)

    def forward(self, geometry, colors, pos):
        """Refine ``geometry (B, T, 5)`` given ``colors (B, T, 3, k)`` in alpha units.

        ``pos`` is the positional encoding, ``(T, d)`` or ``(B, T, d)``.
        """
        if geometry.shape[-1] != GEOMETRY_SIZE:
            raise DimensionError(f"geometry last axis must be 5, got {geometry.shape[-1]}")
        h = self.embed(self.tokens(geometry, colors)) + pos
        self.encoder_passes += 1
        h = self.encoder(h)
        delta = self.head(h)
        half = self.patch_size / 2.0
        return geometry + torch.cat([delta[..., :2] * half, delta[..., 2:] * math.pi], dim=-1)

    def hparams(self):
        return {"kind": "refine", "channels": self.channels, "patch_size": self.patch_size,
                "d": self.d, "layers": self.encoder.n_layers, "heads": self.encoder.heads,
                "d_ff": self.encoder.d_ff}


def build_model(hparams):
    kind = hparams.get("kind")
    args = {k: v for k, v in hparams.items() if k != "kind"}
    if kind == "init":
        return InitNet(**args)
    if kind == "refine":
        return RefineNet(**args)
    raise ConfigurationError(f"unknown model kind {kind!r}")


def save_model(model, path):
    tnn.save_checkpoint(path, dict(model.state_dict()), model.hparams())


def load_model(path, expect=None):
    hparams, tensors = tnn.load_checkpoint(path)
    if expect is not None and hparams.get("kind") != expect:
        raise ConfigurationError(
            f"{path}: expected a {expect} checkpoint, found {hparams.get('kind')!r}")
    model = build_model(hparams)
    state = {k: torch.from_numpy(np.asarray(v)) for k, v in tensors.items()}
    missing = set(model.state_dict()) - set(state)
    if missing:
        raise ConfigurationError(f"{path}: checkpoint lacks parameters {sorted(missing)}")
    model.load_state_dict(state)
    model.eval()
    return model
