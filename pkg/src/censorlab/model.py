"""Task pathway: encoder, classifier head and projector."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import nn
from .rng import RngStream

PROJECTIONS = ("trivial", "nontrivial")


class ConfigError(ValueError):
    pass


@dataclass
class LatentSplit:
    z: np.ndarray
    w: np.ndarray


def split_latent(z: np.ndarray) -> LatentSplit:
    """First half of the columns is ``z``, second half ``w``."""
    k = z.shape[1]
    if k % 2:
        raise ConfigError(f"complementary censoring needs an even latent size, got {k}")
    return LatentSplit(z[:, : k // 2], z[:, k // 2:])


def build_encoder(input_shape: Sequence[int], latent_dim: int, rng: RngStream, *,
                  hidden: Sequence[int] = (256, 256), conv_channels: Sequence[int] = (16, 32),
                  kernel_width: int = 7, conv_stride: int = 2) -> nn.Sequential:
    """MLP encoder for vector trials, conv stack + pooling for ``(channels, time)`` trials."""
    if len(input_shape) == 1:
        return nn.mlp([input_shape[0], *hidden, latent_dim], rng)
    if len(input_shape) != 2:
        raise ConfigError(f"unsupported input shape {tuple(input_shape)}")
    channels, length = input_shape
    layers = []
    c_in = channels
    for c_out in conv_channels:
        conv = nn.Conv1D(c_in, c_out, kernel_width, conv_stride, "relu", rng)
        length = conv.output_length(length)
        layers.append(conv)
        c_in = c_out
    layers.append(nn.GlobalAvgPool())
    layers.append(nn.Dense(c_in, latent_dim, "identity", rng))
    return nn.Sequential(layers)


class TaskModel:
    """Encoder ``F``, classifier ``G`` and projector ``P``.

    ``G`` reads the hidden features directly; ``P`` only feeds the censor.
    """

    def __init__(self, input_shape: Sequence[int], n_classes: int, rng: RngStream, *,
                 latent_dim: int = 128, projection: str = "trivial",
                 encoder_hidden: Sequence[int] = (256, 256),
                 classifier_hidden: Sequence[int] = (128, 128),
                 projector_hidden: Sequence[int] = (128, 128),
                 conv_channels: Sequence[int] = (16, 32), kernel_width: int = 7,
                 conv_stride: int = 2):
        if projection not in PROJECTIONS:
            raise ConfigError(f"projection must be one of {PROJECTIONS}, got {projection!r}")
        self.input_shape = tuple(input_shape)
        self.n_classes = n_classes
        self.latent_dim = latent_dim
        self.projection = projection
        self.encoder = build_encoder(self.input_shape, latent_dim, rng.derive("encoder"),
                                     hidden=encoder_hidden, conv_channels=conv_channels,
                                     kernel_width=kernel_width, conv_stride=conv_stride)
        self.classifier = nn.mlp([latent_dim, *classifier_hidden, n_classes], rng.derive("classifier"))
        if projection == "trivial":
            self.projector = nn.Sequential()
        else:
            self.projector = nn.mlp([latent_dim, *projector_hidden, latent_dim], rng.derive("projector"))

    @property
    def parts(self) -> dict:
        return {"encoder": self.encoder, "classifier": self.classifier, "projector": self.projector}

    def _check_input(self, x):
        if tuple(x.shape[1:]) != self.input_shape:
            raise nn.ShapeError(
                f"model expects trials of shape {self.input_shape}, got {tuple(x.shape[1:])}")

    def encode(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        self._check_input(x)
        return self.encoder.forward(x)

    def logits(self, hidden) -> np.ndarray:
        return self.classifier.forward(hidden)

    def classify(self, hidden) -> np.ndarray:
        return nn.softmax(self.logits(hidden))

    def project(self, hidden) -> np.ndarray:
        if hidden.ndim != 2 or hidden.shape[1] != self.latent_dim:
            raise nn.ShapeError(f"projector expects (batch, {self.latent_dim}), got {hidden.shape}")
        return self.projector.forward(hidden)

    def predict(self, x, batch_size: int = 1024) -> np.ndarray:
        out = []
        for i in range(0, len(x), batch_size):
            out.append(self.logits(self.encode(x[i:i + batch_size])).argmax(axis=1))
        return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)

    def features(self, x, batch_size: int = 1024) -> np.ndarray:
        """Projected features ``z`` for a whole dataset."""
        out = [self.project(self.encode(x[i:i + batch_size])) for i in range(0, len(x), batch_size)]
        return np.concatenate(out)

    def named_parameters(self):
        for part, net in self.parts.items():
            for name, p in net.named_parameters():
                yield f"{part}.{name}", p

    def parameters(self) -> list[np.ndarray]:
        return [p for _, p in self.named_parameters()]

    def gradients(self) -> list[np.ndarray]:
        return [g for net in self.parts.values() for g in net.gradients()]
