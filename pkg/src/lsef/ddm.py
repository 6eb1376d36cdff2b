"""Dynamic decoupling block.

A two-layer temporal gate reweights frames, a pair of L2-normalised pointwise
projections builds a softmax affinity over spatial positions per frame, and a
pointwise fusion merges the local / graph / global-context subspaces back to
the input width.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .conv import conv3d
from .errors import DimensionError
from .tensor import (
    Tensor,
    active_dtype,
    broadcast_to,
    concat,
    l2_normalize,
    matmul,
    relu,
    sigmoid,
    softmax,
)


@dataclass
class DdmState:
    """Parameters of one dynamic decoupling block for a fixed clip length."""

    w1: Tensor             # (T, T) gate layer 1, zero-initialised
    w2: Tensor             # (T, T) gate layer 2, zero-initialised
    phi_g: Tensor          # (Cg, C, 1, 1, 1) affinity-source projection
    phi_o: Tensor          # (Cg, C, 1, 1, 1) node-feature projection
    theta_local: Tensor    # depthwise (C, 1, 3, 3, 3)
    theta_global: Tensor   # (C, C, 1, 1, 1) applied to the temporal-mean context
    psi_fuse: Tensor       # (C, 2C + Cg, 1, 1, 1)
    channels: int
    frames: int
    graph_channels: int

    @classmethod
    def create(cls, channels, frames, rng, graph_channels=None):
        cg = graph_channels or max(1, channels // 2)
        dtype = active_dtype()
        lim_c = 1.0 / np.sqrt(channels)
        lim_local = 1.0 / np.sqrt(27.0)
        lim_fuse = 1.0 / np.sqrt(2 * channels + cg)

        def uniform(shape, lim):
            return Tensor(rng.uniform(-lim, lim, shape).astype(dtype), requires_grad=True)

        return cls(
            w1=Tensor(np.zeros((frames, frames), dtype=dtype), requires_grad=True),
            w2=Tensor(np.zeros((frames, frames), dtype=dtype), requires_grad=True),
            phi_g=uniform((cg, channels, 1, 1, 1), lim_c),
            phi_o=uniform((cg, channels, 1, 1, 1), lim_c),
            theta_local=uniform((channels, 1, 3, 3, 3), lim_local),
            theta_global=uniform((channels, channels, 1, 1, 1), lim_c),
            psi_fuse=uniform((channels, 2 * channels + cg, 1, 1, 1), lim_fuse),
            channels=channels,
            frames=frames,
            graph_channels=cg,
        )

    def named_parameters(self, prefix="ddm"):
        return [
            (f"{prefix}.w1", self.w1),
            (f"{prefix}.w2", self.w2),
            (f"{prefix}.phi_g", self.phi_g),
            (f"{prefix}.phi_o", self.phi_o),
            (f"{prefix}.theta_local", self.theta_local),
            (f"{prefix}.theta_global", self.theta_global),
            (f"{prefix}.psi_fuse", self.psi_fuse),
        ]


def temporal_gate(x, state):
    """Frame gate g in (0, 1)^(B, T); returns (x * g, g).

    The per-frame descriptor averages over channels and space, so the two
    square gate matrices act on a length-T vector.
    """
    b, c, t, h, w = x.shape
    if t != state.frames:
        raise DimensionError(f"state built for {state.frames} frames, input has {t}")
    pooled = x.mean(axis=(1, 3, 4))                      # (B, T)
    hidden = relu(matmul(pooled, state.w1.permute((1, 0))))
    gate = sigmoid(matmul(hidden, state.w2.permute((1, 0))))
    routed = x * gate.reshape((b, 1, t, 1, 1))
    return routed, gate


def graph_interact(x_routed, state):
    """Softmax-affinity aggregation over the N = H*W positions of each frame.

    Both projections are normalised to the unit sphere per position; the
    affinity rows are a distribution over source positions and mix the
    normalised node features.
    """
    b, c, t, h, w = x_routed.shape
    n = h * w
    cg = state.graph_channels
    src = conv3d(x_routed, state.phi_g, padding="zeros")
    nodes = conv3d(x_routed, state.phi_o, padding="zeros")
    src = src.permute((0, 2, 1, 3, 4)).reshape((b, t, cg, n))
    nodes = nodes.permute((0, 2, 1, 3, 4)).reshape((b, t, cg, n))
    src = l2_normalize(src, axis=2)
    nodes = l2_normalize(nodes, axis=2)
    affinity = softmax(matmul(src.permute((0, 1, 3, 2)), nodes), axis=-1)   # (B, T, N, N)
    mixed = matmul(nodes, affinity.permute((0, 1, 3, 2)))                    # (B, T, Cg, N)
    return mixed.reshape((b, t, cg, h, w)).permute((0, 2, 1, 3, 4))


def orthogonality_diagnostic(x_routed, state):
    """Mean |<src_col, node_col>| after normalisation (0 = fully orthogonal)."""
    b, c, t, h, w = x_routed.shape
    n = h * w
    cg = state.graph_channels
    src = conv3d(x_routed, state.phi_g, padding="zeros")
    nodes = conv3d(x_routed, state.phi_o, padding="zeros")
    src = l2_normalize(src.permute((0, 2, 1, 3, 4)).reshape((b, t, cg, n)), axis=2)
    nodes = l2_normalize(nodes.permute((0, 2, 1, 3, 4)).reshape((b, t, cg, n)), axis=2)
    return float(np.abs((src.data * nodes.data).sum(axis=2)).mean())


def ddm_forward(x, state):
    """Fuse local, graph and broadcast global-context subspaces; shape-preserving."""
    b, c, t, h, w = x.shape
    routed, _ = temporal_gate(x, state)
    local = conv3d(routed, state.theta_local, groups=c, padding="zeros")
    graph = graph_interact(routed, state)
    context = routed.mean(axis=2, keepdims=True)                 # (B, C, 1, H, W)
    context = conv3d(context, state.theta_global, padding="zeros")
    global_part = broadcast_to(context, (b, c, t, h, w))
    stacked = concat([local, graph, global_part], axis=1)
    return conv3d(stacked, state.psi_fuse, padding="zeros")
