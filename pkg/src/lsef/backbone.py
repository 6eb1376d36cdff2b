"""Three-stage depthwise-separable spatiotemporal backbone with plug-in blocks.

Stage convolutions carry the features; the stability-encoding, dynamic
decoupling and consistency-integration blocks slot in between stages when
enabled and are shape preserving, so any subset composes. Heads map the final
features either to 7 class logits or to a per-frame (valence, arousal) pair
squashed into [-1, 1].
"""

from __future__ import annotations

import hashlib
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import cim as cim_mod
from . import ddm as ddm_mod
from . import sem as sem_mod
from .container import load_bundle, save_bundle
from .conv import conv3d, global_mean, spatial_mean
from .errors import ConfigurationError, DataError, DimensionError
from .tensor import Tensor, active_dtype, log_softmax, matmul, precision_mode, relu, tanh

HEADS = ("categorical", "valence-arousal")
MODULE_ORDER = ("sem", "ddm", "cim")


@dataclass(frozen=True)
class BackboneConfig:
    in_channels: int = 4
    stage_widths: tuple = (8, 16, 32)
    frames: int = 8
    height: int = 16
    width: int = 16
    modules: tuple = ("sem", "ddm", "cim")
    head: str = "categorical"
    num_classes: int = 7
    sem_kernel: int = 3
    ca_reduction: int = 4
    cim_scales: tuple = (1, 3, 5)
    node_cap: int = cim_mod.DEFAULT_NODE_CAP

    def __post_init__(self):
        if self.head not in HEADS:
            raise ConfigurationError(f"head must be one of {HEADS}, got {self.head!r}")
        if len(self.stage_widths) != 3:
            raise ConfigurationError("exactly three stage widths expected")
        unknown = set(self.modules) - set(MODULE_ORDER)
        if unknown:
            raise ConfigurationError(f"unknown modules {sorted(unknown)}")

    def canonical_text(self):
        pairs = {
            "in_channels": self.in_channels,
            "stage_widths": ",".join(str(w) for w in self.stage_widths),
            "frames": self.frames,
            "height": self.height,
            "width": self.width,
            "modules": ",".join(m for m in MODULE_ORDER if m in self.modules),
            "head": self.head,
            "num_classes": self.num_classes,
            "sem_kernel": self.sem_kernel,
            "ca_reduction": self.ca_reduction,
            "cim_scales": ",".join(str(s) for s in self.cim_scales),
            "node_cap": self.node_cap,
        }
        return "\n".join(f"{k} = {pairs[k]}" for k in sorted(pairs)) + "\n"

    def fingerprint(self):
        """64-bit hash of the canonicalised config text."""
        return hashlib.blake2b(self.canonical_text().encode(), digest_size=8).hexdigest()

    @classmethod
    def from_text(cls, text):
        values = {}
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, raw = line.partition("=")
            values[key.strip()] = raw.strip()

        def ints(s):
            return tuple(int(v) for v in s.split(",")) if s else ()

        return cls(
            in_channels=int(values["in_channels"]),
            stage_widths=ints(values["stage_widths"]),
            frames=int(values["frames"]),
            height=int(values["height"]),
            width=int(values["width"]),
            modules=tuple(values["modules"].split(",")) if values["modules"] else (),
            head=values["head"],
            num_classes=int(values["num_classes"]),
            sem_kernel=int(values["sem_kernel"]),
            ca_reduction=int(values["ca_reduction"]),
            cim_scales=ints(values["cim_scales"]),
            node_cap=int(values["node_cap"]),
        )


def _child_rng(seed, name):
    digest = hashlib.blake2b(f"{seed}:{name}".encode(), digest_size=8).digest()
    return np.random.default_rng(int.from_bytes(digest, "little"))


@dataclass
class StageState:
    depthwise: Tensor   # (Cin, 1, 3, 3, 3)
    pointwise: Tensor   # (Cout, Cin, 1, 1, 1)
    stride: tuple

    @classmethod
    def create(cls, c_in, c_out, stride, rng):
        dtype = active_dtype()
        lim_dw = 1.0 / np.sqrt(27.0)
        lim_pw = 1.0 / np.sqrt(c_in)
        return cls(
            depthwise=Tensor(rng.uniform(-lim_dw, lim_dw, (c_in, 1, 3, 3, 3)).astype(dtype),
                             requires_grad=True),
            pointwise=Tensor(rng.uniform(-lim_pw, lim_pw, (c_out, c_in, 1, 1, 1)).astype(dtype),
                             requires_grad=True),
            stride=tuple(stride),
        )

    def forward(self, x):
        c_in = x.shape[1]
        x = conv3d(x, self.depthwise, groups=c_in, stride=self.stride, padding="zeros")
        x = conv3d(x, self.pointwise, padding="zeros")
        return relu(x)

    def named_parameters(self, prefix):
        return [(f"{prefix}.depthwise", self.depthwise), (f"{prefix}.pointwise", self.pointwise)]


@dataclass
class HeadState:
    weight: Tensor
    bias: Tensor

    @classmethod
    def create(cls, c_in, c_out, rng):
        dtype = active_dtype()
        lim = 1.0 / np.sqrt(c_in)
        return cls(
            weight=Tensor(rng.uniform(-lim, lim, (c_in, c_out)).astype(dtype), requires_grad=True),
            bias=Tensor(np.zeros((c_out,), dtype=dtype), requires_grad=True),
        )

    def named_parameters(self, prefix):
        return [(f"{prefix}.weight", self.weight), (f"{prefix}.bias", self.bias)]


class AffectModel:
    """Backbone + enabled blocks + head, built deterministically from a seed.

    Each component draws from its own seed stream, so the stage weights do not
    depend on which blocks are enabled; disabling a block is exactly routing
    around it.
    """

    def __init__(self, cfg: BackboneConfig, seed: int):
        self.cfg = cfg
        self.seed = int(seed)
        w1, w2, w3 = cfg.stage_widths
        self.stages = [
            StageState.create(cfg.in_channels, w1, (1, 1, 1), _child_rng(seed, "stage1")),
            StageState.create(w1, w2, (1, 2, 2), _child_rng(seed, "stage2")),
            StageState.create(w2, w3, (1, 1, 1), _child_rng(seed, "stage3")),
        ]
        self.sem_state = None
        self.ddm_state = None
        self.cim_state = None
        if "sem" in cfg.modules:
            self.sem_state = sem_mod.SemState.create(
                w1, _child_rng(seed, "sem"),
                kernel_size=cfg.sem_kernel, reduction=cfg.ca_reduction,
            )
        if "ddm" in cfg.modules:
            self.ddm_state = ddm_mod.DdmState.create(w2, cfg.frames, _child_rng(seed, "ddm"))
        if "cim" in cfg.modules:
            self.cim_state = cim_mod.CimState.create(
                w3, _child_rng(seed, "cim"),
                scale_sizes=cfg.cim_scales, node_cap=cfg.node_cap,
            )
        out_dim = cfg.num_classes if cfg.head == "categorical" else 2
        self.head = HeadState.create(w3, out_dim, _child_rng(seed, "head"))

    # -- parameters ----------------------------------------------------------

    def named_parameters(self):
        named = []
        for i, stage in enumerate(self.stages, start=1):
            named += stage.named_parameters(f"stage{i}")
        if self.sem_state is not None:
            named += self.sem_state.named_parameters()
        if self.ddm_state is not None:
            named += self.ddm_state.named_parameters()
        if self.cim_state is not None:
            named += self.cim_state.named_parameters()
        named += self.head.named_parameters("head")
        return named

    # -- forward ---------------------------------------------------------------

    def forward(self, clip):
        if not isinstance(clip, Tensor):
            clip = Tensor(clip)
        if clip.ndim != 5:
            raise DimensionError(f"expected (B, C, T, H, W) clip, got shape {clip.shape}")
        if clip.shape[1] != self.cfg.in_channels:
            raise DimensionError(
                f"model expects {self.cfg.in_channels} input channels, got {clip.shape[1]}"
            )
        x = self.stages[0].forward(clip)
        if self.sem_state is not None:
            x = sem_mod.sem_forward(x, self.sem_state)
        x = self.stages[1].forward(x)
        if self.ddm_state is not None:
            x = ddm_mod.ddm_forward(x, self.ddm_state)
        x = self.stages[2].forward(x)
        if self.cim_state is not None:
            x = cim_mod.cim_forward(x, self.cim_state)
        if self.cfg.head == "categorical":
            pooled = global_mean(x)                                  # (B, C)
            bias = self.head.bias.reshape((1, self.cfg.num_classes))
            return matmul(pooled, self.head.weight) + bias
        pooled = spatial_mean(x, keepdims=False)                     # (B, C, T)
        b, c, t = pooled.shape
        frames = pooled.permute((0, 2, 1)).reshape((b * t, c))
        out = matmul(frames, self.head.weight) + self.head.bias.reshape((1, 2))
        return tanh(out.reshape((b, t, 2)))

    # -- checkpointing ------------------------------------------------------------

    def save(self, path):
        tensors = {name: tensor.data for name, tensor in self.named_parameters()}
        meta = {
            "kind": "lsef-checkpoint",
            "config_text": self.cfg.canonical_text(),
            "config_fingerprint": self.cfg.fingerprint(),
            "seed": self.seed,
            "precision": precision_mode(),
        }
        save_bundle(path, tensors, meta)

    @classmethod
    def load(cls, path, modules=None):
        tensors, meta = load_bundle(path)
        if meta.get("kind") != "lsef-checkpoint":
            raise DataError(f"{path} is not a model checkpoint")
        cfg = BackboneConfig.from_text(meta["config_text"])
        if modules is not None:
            cfg = BackboneConfig(**{**cfg.__dict__, "modules": tuple(modules)})
        model = cls(cfg, meta.get("seed", 0))
        own = dict(model.named_parameters())
        for name, array in tensors.items():
            if name not in own:
                prefix = name.split(".", 1)[0]
                if prefix in MODULE_ORDER and prefix not in cfg.modules:
                    warnings.warn(
                        f"checkpoint supplies state for disabled module {prefix!r}; ignoring",
                        stacklevel=2,
                    )
                    continue
                raise ConfigurationError(f"checkpoint tensor {name!r} has no slot in the model")
            if own[name].data.shape != array.shape:
                raise ConfigurationError(
                    f"checkpoint tensor {name!r} has shape {array.shape}, "
                    f"model expects {own[name].data.shape}"
                )
            own[name].data = array.astype(active_dtype())
        missing = [name for name in own if name not in tensors]
        if missing:
            raise ConfigurationError(f"checkpoint is missing tensors: {missing[:4]}...")
        return model


# -- losses ----------------------------------------------------------------------


def cross_entropy(logits, labels):
    """Mean softmax cross-entropy; labels are integer class ids."""
    labels = np.asarray(labels)
    b, k = logits.shape
    if labels.shape != (b,):
        raise DimensionError(f"labels shape {labels.shape} does not match batch {b}")
    if labels.min() < 0 or labels.max() >= k:
        raise DataError(f"label out of range 0..{k - 1}")
    onehot = np.zeros((b, k), dtype=logits.dtype)
    onehot[np.arange(b), labels] = 1.0
    logp = log_softmax(logits, axis=1)
    return -(Tensor(onehot) * logp).sum() * (1.0 / b)


def trajectory_mse(pred, target):
    """Mean squared error over frames and both affect dimensions."""
    if not isinstance(target, Tensor):
        target = Tensor(target)
    if pred.shape != target.shape:
        raise DimensionError(f"prediction {pred.shape} vs target {target.shape}")
    diff = pred - target
    return (diff * diff).mean()
