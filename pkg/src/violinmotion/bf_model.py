"""Per-frame bowing/fingering classifiers (one CRNN per label stream).

Architecture: three convolution blocks (Conv2d -> BatchNorm2d -> max-pool
over the FREQUENCY axis only -> LeakyReLU), flatten channels x remaining
frequency bins, a 2-layer bidirectional LSTM, dropout, a LeakyReLU-activated
hidden FC layer, and a softmax output head. Pooling never touches the time
axis, so the output keeps one probability row per input frame.

Decoding picks the per-frame argmax class, breaking ties toward the lowest
class index. The training criterion is per-frame cross-entropy averaged
over time; probabilities are clamped to [1e-8, 1] inside the loss so exact
one-hot predictions stay finite.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .errors import ConfigError, DimensionMismatch

LEAKY_SLOPE = 0.01
CE_CLAMP_MIN = 1e-8


@dataclass(frozen=True)
class BfBranchConfig:
    n_classes: int
    conv_channels: tuple[int, ...] = (32, 64, 128)
    conv_kernels: tuple[tuple[int, int], ...] = ((1, 1), (3, 3), (3, 3))
    pool_freq: tuple[int, ...] = (4, 2, 2)
    rnn_layers: int = 2
    rnn_hidden: int = 512
    dropout: float = 0.3
    fc_hidden: int = 64
    n_mels: int = 128

    def __post_init__(self):
        if self.n_classes not in (3, 5, 6, 13):
            raise ConfigError(
                f"n_classes must be one of 3/5/6/13, got {self.n_classes}")
        if not (len(self.conv_channels) == len(self.conv_kernels)
                == len(self.pool_freq)):
            raise ConfigError("conv_channels/conv_kernels/pool_freq lengths differ")
        if not 0 <= self.dropout < 1:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        total_pool = math.prod(self.pool_freq)
        if self.n_mels % total_pool != 0:
            raise ConfigError(
                f"n_mels={self.n_mels} not divisible by the total frequency "
                f"pooling factor {total_pool}")

    @property
    def rnn_input_dim(self) -> int:
        return self.conv_channels[-1] * (self.n_mels // math.prod(self.pool_freq))


@dataclass
class BfProbabilities:
    """T×n_classes row-stochastic per-frame class probabilities."""

    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2:
            raise DimensionMismatch(
                f"probabilities must be T×n, got shape {self.data.shape}")
        if self.data.shape[0] == 0:
            raise DimensionMismatch("probabilities must cover >= 1 frame")
        sums = self.data.sum(axis=1)
        if np.any(self.data < 0) or np.any(np.abs(sums - 1.0) > 1e-6):
            raise DimensionMismatch("rows must be probability distributions")

    @property
    def n_frames(self) -> int:
        return self.data.shape[0]


class BfNet(nn.Module):
    def __init__(self, config: BfBranchConfig):
        super().__init__()
        self.config = config
        blocks = []
        in_ch = 1
        for out_ch, kernel, pool in zip(config.conv_channels,
                                        config.conv_kernels, config.pool_freq):
            blocks += [
                nn.Conv2d(in_ch, out_ch, kernel_size=kernel,
                          padding=(kernel[0] // 2, kernel[1] // 2)),
                nn.BatchNorm2d(out_ch),
                nn.MaxPool2d(kernel_size=(1, pool)),
                nn.LeakyReLU(LEAKY_SLOPE),
            ]
            in_ch = out_ch
        self.conv = nn.Sequential(*blocks)
        self.rnn = nn.LSTM(config.rnn_input_dim, config.rnn_hidden,
                           num_layers=config.rnn_layers, bidirectional=True,
                           batch_first=True)
        self.drop = nn.Dropout(config.dropout)
        self.fc1 = nn.Linear(2 * config.rnn_hidden, config.fc_hidden)
        self.act = nn.LeakyReLU(LEAKY_SLOPE)
        self.fc2 = nn.Linear(config.fc_hidden, config.n_classes)

    def forward(self, mel: torch.Tensor) -> torch.Tensor:
        """(B, T, F) -> (B, T, n_classes) row-stochastic probabilities."""
        if mel.dim() != 3 or mel.shape[-1] != self.config.n_mels:
            raise DimensionMismatch(
                f"expected (B, T, {self.config.n_mels}), got {tuple(mel.shape)}")
        x = self.conv(mel.unsqueeze(1))          # (B, C, T, F/16)
        b, c, t, f = x.shape
        x = x.permute(0, 2, 1, 3).reshape(b, t, c * f)
        x, _ = self.rnn(x)
        x = self.act(self.fc1(self.drop(x)))
        return torch.softmax(self.fc2(x), dim=-1)

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())


def build_bf_network(config: BfBranchConfig) -> BfNet:
    return BfNet(config)


@torch.no_grad()
def bf_forward(network: BfNet, mel: np.ndarray) -> BfProbabilities:
    """Run a frozen classifier on one T×F sequence."""
    mel = np.asarray(mel, dtype=np.float32)
    if mel.ndim != 2:
        raise DimensionMismatch(f"expected T×F input, got shape {mel.shape}")
    if mel.shape[0] < 1:
        raise DimensionMismatch("need at least one frame")
    was_training = network.training
    network.eval()
    try:
        probs = network(torch.from_numpy(mel)[None])[0]
    finally:
        network.train(was_training)
    return BfProbabilities(data=probs.double().numpy())


def decode_onehot(probs) -> np.ndarray:
    """Per-frame argmax as one-hot rows; ties go to the LOWEST class index."""
    data = np.asarray(getattr(probs, "data", probs), dtype=np.float64)
    if data.ndim != 2:
        raise DimensionMismatch(f"expected T×n probabilities, got {data.shape}")
    out = np.zeros_like(data, dtype=np.float32)
    out[np.arange(data.shape[0]), data.argmax(axis=1)] = 1.0
    return out


def ce_loss(probs: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """-(1/T) sum_t sum_c target * log(clamp(p)); mean over batch if batched."""
    if probs.shape != target.shape:
        raise DimensionMismatch(
            f"shape mismatch: {tuple(probs.shape)} vs {tuple(target.shape)}")
    if probs.dim() not in (2, 3):
        raise DimensionMismatch(
            f"expected (T, n) or (B, T, n), got {tuple(probs.shape)}")
    t = probs.shape[-2]
    logp = torch.log(probs.clamp(CE_CLAMP_MIN, 1.0))
    per_seq = -(target * logp).sum(dim=(-1, -2)) / t
    return per_seq.mean()
