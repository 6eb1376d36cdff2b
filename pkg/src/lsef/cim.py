"""Consistency integration block.

Multi-scale depthwise branches are fused back to the input width, a sigmoid
temporal attention rescales frames, and a scaled-dot-product non-local graph
over all T*H*W positions adds a residual correction (residual weight starts
at zero so the untrained block is pass-through).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .conv import conv3d
from .errors import ConfigurationError, DimensionError, ResourceError
from .tensor import Tensor, active_dtype, concat, matmul, sigmoid, softmax

DEFAULT_NODE_CAP = 4096


@dataclass
class CimState:
    """Parameters of one consistency integration block."""

    scale_sizes: tuple      # spatial extents of the depthwise branches, all odd
    scale_kernels: list     # depthwise (C, 1, kt, s, s), identity-initialised
    fuse_kernel: Tensor     # (C, K*C, 1, 1, 1), initialised to average branches
    temp_attn: Tensor       # (1, 1, 3, 1, 1) temporal attention taps, zero-initialised
    theta_proj: Tensor      # (Ca, C, 1, 1, 1)
    phi_proj: Tensor        # (Ca, C, 1, 1, 1); also provides the value pathway
    graph_out: Tensor       # (C, Ca, 1, 1, 1)
    residual_scale: Tensor  # scalar, zero-initialised
    channels: int
    attn_channels: int
    node_cap: int

    @classmethod
    def create(cls, channels, rng, scale_sizes=(1, 3, 5), attn_channels=None,
               node_cap=DEFAULT_NODE_CAP):
        if not scale_sizes:
            raise ConfigurationError("need at least one branch scale")
        if any(s < 1 or s % 2 == 0 for s in scale_sizes):
            raise ConfigurationError(f"branch scales must be odd, got {scale_sizes}")
        ca = attn_channels or max(1, channels // 2)
        dtype = active_dtype()
        k = len(scale_sizes)
        kernels = []
        for s in scale_sizes:
            kt = 1 if s == 1 else 3
            kernel = np.zeros((channels, 1, kt, s, s), dtype=dtype)
            kernel[:, 0, kt // 2, s // 2, s // 2] = 1.0
            kernels.append(Tensor(kernel, requires_grad=True))
        fuse = np.zeros((channels, k * channels, 1, 1, 1), dtype=dtype)
        for i in range(k):
            for c in range(channels):
                fuse[c, i * channels + c, 0, 0, 0] = 1.0 / k
        lim_c = 1.0 / np.sqrt(channels)
        lim_a = 1.0 / np.sqrt(ca)

        def uniform(shape, lim):
            return Tensor(rng.uniform(-lim, lim, shape).astype(dtype), requires_grad=True)

        return cls(
            scale_sizes=tuple(scale_sizes),
            scale_kernels=kernels,
            fuse_kernel=Tensor(fuse, requires_grad=True),
            temp_attn=Tensor(np.zeros((1, 1, 3, 1, 1), dtype=dtype), requires_grad=True),
            theta_proj=uniform((ca, channels, 1, 1, 1), lim_c),
            phi_proj=uniform((ca, channels, 1, 1, 1), lim_c),
            graph_out=uniform((channels, ca, 1, 1, 1), lim_a),
            residual_scale=Tensor(np.zeros((), dtype=dtype), requires_grad=True),
            channels=channels,
            attn_channels=ca,
            node_cap=node_cap,
        )

    def named_parameters(self, prefix="cim"):
        named = [
            (f"{prefix}.scale_kernel{s}", kern)
            for s, kern in zip(self.scale_sizes, self.scale_kernels)
        ]
        named += [
            (f"{prefix}.fuse_kernel", self.fuse_kernel),
            (f"{prefix}.temp_attn", self.temp_attn),
            (f"{prefix}.theta_proj", self.theta_proj),
            (f"{prefix}.phi_proj", self.phi_proj),
            (f"{prefix}.graph_out", self.graph_out),
            (f"{prefix}.residual_scale", self.residual_scale),
        ]
        return named


def multiscale(x, state):
    """Concatenate the depthwise branch outputs on channels, then fuse to C."""
    if x.shape[1] != state.channels:
        raise DimensionError(
            f"state built for {state.channels} channels, input has {x.shape[1]}"
        )
    branches = [
        conv3d(x, kernel, groups=state.channels, padding="zeros")
        for kernel in state.scale_kernels
    ]
    stacked = concat(branches, axis=1) if len(branches) > 1 else branches[0]
    return conv3d(stacked, state.fuse_kernel, padding="zeros")


def temporal_recalibrate(x_ms, state):
    """Multiply by a sigmoid attention over frames (context = global mean per frame)."""
    b, c, t, h, w = x_ms.shape
    context = x_ms.mean(axis=(1, 3, 4))                     # (B, T)
    context = context.reshape((b, 1, t, 1, 1))
    logits = conv3d(context, state.temp_attn, padding="reflect")
    attention = sigmoid(logits)                              # (B, 1, T, 1, 1)
    return x_ms * attention


def nonlocal_graph(x_ta, state):
    """Residual non-local aggregation over all spatiotemporal positions."""
    b, c, t, h, w = x_ta.shape
    m = t * h * w
    if m > state.node_cap:
        raise ResourceError(
            f"{m} spatiotemporal nodes exceed the cap of {state.node_cap}; "
            "use smaller inputs or raise node_cap"
        )
    ca = state.attn_channels
    queries = conv3d(x_ta, state.theta_proj, padding="zeros").reshape((b, ca, m))
    keys = conv3d(x_ta, state.phi_proj, padding="zeros").reshape((b, ca, m))
    logits = matmul(queries.permute((0, 2, 1)), keys) * (1.0 / np.sqrt(ca))
    affinity = softmax(logits, axis=-1)                      # (B, M, M)
    mixed = matmul(keys, affinity.permute((0, 2, 1)))        # (B, Ca, M)
    mixed = mixed.reshape((b, ca, t, h, w))
    correction = conv3d(mixed, state.graph_out, padding="zeros")
    scale = state.residual_scale.reshape((1, 1, 1, 1, 1))
    return x_ta + scale * correction


def cim_forward(x, state):
    """multiscale -> temporal attention -> non-local residual; shape-preserving."""
    return nonlocal_graph(temporal_recalibrate(multiscale(x, state), state), state)
