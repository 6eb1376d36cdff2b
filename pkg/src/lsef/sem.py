"""Stability encoding block.

Splits features into a smooth low-frequency base (separable 3D Gaussian
low-pass) and the high-frequency residual, refines the residual with a
channel-attention gate times a depthwise energy convolution, and fuses the
two branches with a learnable sigmoid-bounded coefficient.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .conv import conv3d, global_mean
from .errors import ConfigurationError, DimensionError
from .tensor import Tensor, active_dtype, matmul, relu, sigmoid


def gaussian_kernel_1d(kernel_size):
    """Unit-sum 1D Gaussian taps, sigma = k/3 (3-sigma support)."""
    if kernel_size < 1 or kernel_size % 2 == 0:
        raise ConfigurationError(f"Gaussian window must be odd and >= 1, got {kernel_size}")
    if kernel_size == 1:
        return np.ones(1, dtype=np.float64)
    sigma = kernel_size / 3.0
    offsets = np.arange(kernel_size, dtype=np.float64) - kernel_size // 2
    taps = np.exp(-0.5 * (offsets / sigma) ** 2)
    return taps / taps.sum()


def _check_window(extent, kernel_size, axis_name):
    pad = kernel_size // 2
    if extent > 1 and pad > extent - 1:
        raise ConfigurationError(
            f"window {kernel_size} needs reflect padding {pad} but {axis_name} extent is {extent}"
        )


def gaussian_lowpass(x, kernel_size=3):
    """Separable per-channel Gaussian smoothing; shape-preserving.

    kernel_size == 1 is a bit-exact identity.
    """
    if x.ndim != 5:
        raise DimensionError(f"expected (B, C, T, H, W), got shape {x.shape}")
    taps = gaussian_kernel_1d(kernel_size)
    if kernel_size == 1:
        return x
    channels = x.shape[1]
    for extent, axis_name in zip(x.shape[2:], ("T", "H", "W")):
        _check_window(extent, kernel_size, axis_name)
    dtype = x.dtype
    k = kernel_size
    along_t = Tensor(np.broadcast_to(taps.reshape(1, 1, k, 1, 1), (channels, 1, k, 1, 1)).astype(dtype))
    along_h = Tensor(np.broadcast_to(taps.reshape(1, 1, 1, k, 1), (channels, 1, 1, k, 1)).astype(dtype))
    along_w = Tensor(np.broadcast_to(taps.reshape(1, 1, 1, 1, k), (channels, 1, 1, 1, k)).astype(dtype))
    out = conv3d(x, along_t, groups=channels, padding="reflect")
    out = conv3d(out, along_h, groups=channels, padding="reflect")
    out = conv3d(out, along_w, groups=channels, padding="reflect")
    return out


def decompose(x, kernel_size=3):
    """Additive split x == x_low + x_high (exact by construction)."""
    x_low = gaussian_lowpass(x, kernel_size)
    x_high = x - x_low
    return x_low, x_high


@dataclass
class SemState:
    """Parameters of one stability encoding block."""

    kernel_size: int
    sigma: float
    ca_reduce: Tensor   # (C, C/r)
    ca_expand: Tensor   # (C/r, C)
    energy_kernel: Tensor  # depthwise (C, 1, 3, 3, 3), identity-initialised
    lambda_raw: Tensor  # scalar; sigmoid gives the fusion coefficient
    channels: int

    @classmethod
    def create(cls, channels, rng, kernel_size=3, reduction=4):
        if kernel_size < 1 or kernel_size % 2 == 0:
            raise ConfigurationError(f"kernel_size must be odd, got {kernel_size}")
        reduced = max(1, channels // reduction)
        dtype = active_dtype()
        lim_in = 1.0 / np.sqrt(channels)
        lim_mid = 1.0 / np.sqrt(reduced)
        energy = np.zeros((channels, 1, 3, 3, 3), dtype=dtype)
        energy[:, 0, 1, 1, 1] = 1.0
        return cls(
            kernel_size=kernel_size,
            sigma=kernel_size / 3.0,
            ca_reduce=Tensor(rng.uniform(-lim_in, lim_in, (channels, reduced)).astype(dtype),
                             requires_grad=True),
            ca_expand=Tensor(rng.uniform(-lim_mid, lim_mid, (reduced, channels)).astype(dtype),
                             requires_grad=True),
            energy_kernel=Tensor(energy, requires_grad=True),
            lambda_raw=Tensor(np.zeros((), dtype=dtype), requires_grad=True),
            channels=channels,
        )

    def named_parameters(self, prefix="sem"):
        return [
            (f"{prefix}.ca_reduce", self.ca_reduce),
            (f"{prefix}.ca_expand", self.ca_expand),
            (f"{prefix}.energy_kernel", self.energy_kernel),
            (f"{prefix}.lambda_raw", self.lambda_raw),
        ]

    def fusion_coefficient(self):
        """Current value of the sigmoid-bounded mixing weight."""
        return float(0.5 * (1.0 + np.tanh(0.5 * self.lambda_raw.data)))


def channel_gate(x, state):
    """Squeeze-excite gate in (0, 1) per (batch, channel)."""
    pooled = global_mean(x)                      # (B, C)
    hidden = relu(matmul(pooled, state.ca_reduce))
    logits = matmul(hidden, state.ca_expand)     # (B, C)
    gate = sigmoid(logits)
    b, c = gate.shape
    return gate.reshape((b, c, 1, 1, 1))


def refine_high(x_high, state):
    """Gate the depthwise energy response of the high-frequency residual."""
    if x_high.shape[1] != state.channels:
        raise DimensionError(
            f"state built for {state.channels} channels, input has {x_high.shape[1]}"
        )
    gate = channel_gate(x_high, state)
    energy = conv3d(x_high, state.energy_kernel, groups=state.channels, padding="zeros")
    return gate * energy


def sem_forward(x, state):
    """Convex fusion of the smooth base and the refined residual."""
    x_low, x_high = decompose(x, state.kernel_size)
    lam = sigmoid(state.lambda_raw)
    one = Tensor(np.asarray(1.0, dtype=x.dtype))
    refined = refine_high(x_high, state)
    b, c, t, h, w = x.shape
    lam5 = lam.reshape((1, 1, 1, 1, 1))
    return lam5 * x_low + (one - lam).reshape((1, 1, 1, 1, 1)) * refined
