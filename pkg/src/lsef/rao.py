"""Rank-aware two-phase sharpness optimizer.

Each step measures two structural sensitivities per parameter tensor from its
matricised singular spectrum and entry magnitudes, scales the perturbation
radius with them, climbs along the normalised gradient, and descends with the
gradient taken at the perturbed point. A feedback term adapts the base radius
from the relative loss change between the two phases.

Degenerate settings recover simpler optimizers exactly: alpha = beta =
gamma = 0 is fixed-radius sharpness-aware minimisation, and rho_base = 0 is
the plain base optimizer (the second evaluation is skipped, so the update is
bitwise identical).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigurationError, OptimizerError
from .linalg import matricize, svd_values

GRAD_NORM_FLOOR = 1e-12
SMALL_TENSOR_SIZE = 8


@dataclass(frozen=True)
class RaoConfig:
    lr: float = 0.01
    rho_base: float = 0.05
    alpha: float = 0.5
    beta: float = 0.5
    gamma: float = 0.1
    tau_r_rel: float = 0.01
    tau_s_rel: float = 0.1
    rho_min: float = 1e-4
    rho_max: float = 0.5
    base: str = "adam"           # "sgd" (plain descent) or "adam" (adaptive moment)
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    svd_dim_cap: int = 4096      # above this matricised extent, cache the spectrum
    svd_refresh: int = 10        # refresh cadence (steps) for cached spectra

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigurationError("lr must be positive")
        if self.alpha < 0 or self.beta < 0:
            raise ConfigurationError("alpha and beta must be non-negative")
        if not (self.rho_min <= self.rho_max):
            raise ConfigurationError("rho_min must not exceed rho_max")
        # rho_base == 0 disables perturbation entirely and sits outside the
        # adaptation band on purpose.
        if self.rho_base != 0.0 and not (self.rho_min <= self.rho_base <= self.rho_max):
            raise ConfigurationError(
                f"rho_base {self.rho_base} outside [{self.rho_min}, {self.rho_max}]"
            )
        if self.base not in ("sgd", "adam"):
            raise ConfigurationError(f"base optimizer must be 'sgd' or 'adam', got {self.base!r}")


def rank_sensitivity(weights, tau_r_rel, singular_values=None):
    """Fraction of singular values above tau_r_rel * sigma_max.

    Vectors/scalars and tiny tensors skip the SVD: their sensitivity is 1 if
    any entry is non-zero, else 0.
    """
    arr = np.asarray(weights, dtype=np.float64)
    if arr.size == 0:
        raise ConfigurationError("rank_sensitivity of an empty tensor")
    if arr.ndim <= 1 or arr.size < SMALL_TENSOR_SIZE:
        return (1.0 if np.any(arr != 0.0) else 0.0), []
    values = singular_values if singular_values is not None else svd_values(matricize(arr))
    top = values[0]
    if top == 0.0:
        return 0.0, values
    threshold = tau_r_rel * top
    above = sum(1 for v in values if v > threshold)
    return above / len(values), values


def sparsity_sensitivity(weights, tau_s_rel):
    """Fraction of entries with |w| strictly below tau_s_rel * max|w|.

    An all-zero tensor is fully sparse by convention (returns 1).
    """
    arr = np.asarray(weights, dtype=np.float64)
    if arr.size == 0:
        raise ConfigurationError("sparsity_sensitivity of an empty tensor")
    magnitudes = np.abs(arr)
    top = magnitudes.max()
    if top == 0.0:
        return 1.0
    threshold = tau_s_rel * top
    return float((magnitudes < threshold).sum()) / arr.size


def dynamic_radius(rho_base, rho_r, rho_s, alpha, beta):
    """rho_base * (1 + alpha*rho_r - beta*rho_s), clamped below at zero."""
    return max(0.0, rho_base * (1.0 + alpha * rho_r - beta * rho_s))


@dataclass
class TensorSensitivity:
    name: str
    rho_r: float
    rho_s: float
    rho_dyn: float
    singular_values: list
    tau_r: float
    tau_s: float
    spectrum_refreshed: bool
    perturbation_norm: float = 0.0


@dataclass
class SensitivityReport:
    step: int
    entries: list = field(default_factory=list)
    loss: float = math.nan
    perturbed_loss: float = math.nan

    def mean(self, attr):
        if not self.entries:
            return math.nan
        return sum(getattr(e, attr) for e in self.entries) / len(self.entries)

    def to_lines(self):
        lines = []
        for e in self.entries:
            lines.append(
                f"step={self.step} tensor={e.name} rho_r={e.rho_r!r} rho_s={e.rho_s!r} "
                f"rho_dyn={e.rho_dyn!r} L={self.loss!r} Lp={self.perturbed_loss!r}"
            )
        return lines


class PlainDescent:
    """w <- w - lr * g."""

    def __init__(self, lr):
        self.lr = lr

    def apply(self, params, grads):
        for name, tensor in params:
            tensor.data -= self.lr * grads[name]


class AdaptiveMoment:
    """Standard bias-corrected adaptive-moment update."""

    def __init__(self, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {}
        self.v = {}

    def apply(self, params, grads):
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        correction1 = 1.0 - b1 ** self.step_count
        correction2 = 1.0 - b2 ** self.step_count
        for name, tensor in params:
            g = grads[name]
            m = self.m.get(name)
            if m is None:
                m = np.zeros_like(tensor.data)
                v = np.zeros_like(tensor.data)
            else:
                v = self.v[name]
            m = b1 * m + (1.0 - b1) * g
            v = b2 * v + (1.0 - b2) * (g * g)
            self.m[name] = m
            self.v[name] = v
            m_hat = m / correction1
            v_hat = v / correction2
            tensor.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def make_base_optimizer(cfg):
    if cfg.base == "sgd":
        return PlainDescent(cfg.lr)
    return AdaptiveMoment(cfg.lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)


class RankAwareOptimizer:
    """Drives rank-aware two-phase steps over a named parameter list.

    `eval_fn` must rebuild the loss graph from the current parameter values;
    the optimizer owns gradient zeroing and the two backward passes.
    """

    def __init__(self, params, cfg: RaoConfig):
        self.params = list(params)
        self.cfg = cfg
        self.rho_base = cfg.rho_base
        self.base = make_base_optimizer(cfg)
        self.step_count = 0
        self._spectrum_cache = {}
        self.last_report = None

    # -- sensitivities -----------------------------------------------------

    def _sensitivities(self):
        entries = []
        for name, tensor in self.params:
            arr = tensor.data
            mat = matricize(arr)
            use_cache = max(mat.shape) > self.cfg.svd_dim_cap and arr.ndim > 1 and \
                arr.size >= SMALL_TENSOR_SIZE
            refreshed = True
            cached = None
            if use_cache:
                cached = self._spectrum_cache.get(name)
                if cached is not None and self.step_count % self.cfg.svd_refresh != 0:
                    refreshed = False
                else:
                    cached = None
            rho_r, values = rank_sensitivity(
                arr, self.cfg.tau_r_rel,
                singular_values=cached,
            )
            if use_cache and refreshed:
                self._spectrum_cache[name] = values
            rho_s = sparsity_sensitivity(arr, self.cfg.tau_s_rel)
            rho_dyn = dynamic_radius(self.rho_base, rho_r, rho_s, self.cfg.alpha, self.cfg.beta)
            entries.append(TensorSensitivity(
                name=name,
                rho_r=rho_r,
                rho_s=rho_s,
                rho_dyn=rho_dyn,
                singular_values=list(values),
                tau_r=self.cfg.tau_r_rel * (values[0] if values else 0.0),
                tau_s=self.cfg.tau_s_rel * float(np.abs(arr).max()) if arr.size else 0.0,
                spectrum_refreshed=refreshed,
            ))
        return entries

    # -- the two-phase step --------------------------------------------------

    def _evaluate(self, eval_fn, phase, report):
        for _, tensor in self.params:
            tensor.zero_grad()
        loss = eval_fn()
        value = loss.item()
        if not math.isfinite(value):
            raise OptimizerError(
                f"non-finite loss ({value}) in {phase} evaluation at step {self.step_count}",
                phase=phase, report=report,
            )
        loss.backward()
        grads = {}
        for name, tensor in self.params:
            g = tensor.grad
            grads[name] = np.zeros_like(tensor.data) if g is None else g.copy()
            if not np.all(np.isfinite(grads[name])):
                raise OptimizerError(
                    f"non-finite gradient for {name} in {phase} evaluation",
                    phase=phase, report=report,
                )
        return value, grads

    def step(self, eval_fn):
        report = SensitivityReport(step=self.step_count)
        report.entries = self._sensitivities()
        by_name = {e.name: e for e in report.entries}

        loss, grads = self._evaluate(eval_fn, "first-phase", report)
        report.loss = loss

        # Climb along the per-tensor normalised gradient.
        offsets = {}
        for name, tensor in self.params:
            entry = by_name[name]
            norm = float(np.sqrt((grads[name] * grads[name]).sum()))
            if entry.rho_dyn > 0.0 and norm >= GRAD_NORM_FLOOR:
                eps = (entry.rho_dyn / norm) * grads[name]
                tensor.data += eps
                offsets[name] = eps
                entry.perturbation_norm = float(np.sqrt((eps * eps).sum()))

        if offsets:
            perturbed_loss, grads2 = self._evaluate(eval_fn, "second-phase", report)
            for name, tensor in self.params:
                eps = offsets.get(name)
                if eps is not None:
                    tensor.data -= eps
        else:
            # No perturbation anywhere: reuse the first-phase gradients so the
            # update is bitwise the base optimizer's.
            perturbed_loss, grads2 = loss, grads
        report.perturbed_loss = perturbed_loss

        self.base.apply(self.params, grads2)

        if self.rho_base > 0.0 and self.cfg.gamma != 0.0:
            delta = (perturbed_loss - loss) / max(abs(loss), 1e-8)
            delta = min(1.0, max(-1.0, delta))
            self.rho_base = min(
                self.cfg.rho_max,
                max(self.cfg.rho_min, self.rho_base * (1.0 + self.cfg.gamma * delta)),
            )

        self.step_count += 1
        self.last_report = report
        return loss, perturbed_loss, report


def sam_config(cfg: RaoConfig) -> RaoConfig:
    """Fixed-radius SAM: disable the structural and feedback terms."""
    return replace(cfg, alpha=0.0, beta=0.0, gamma=0.0)


def base_config(cfg: RaoConfig) -> RaoConfig:
    """Pure base optimizer: no perturbation at all."""
    return replace(cfg, rho_base=0.0, alpha=0.0, beta=0.0, gamma=0.0)
