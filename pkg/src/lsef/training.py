"""Deterministic minibatch training driven by the rank-aware optimizer.

The base / fixed-radius-SAM / full configurations are all the same two-phase
optimizer with the corresponding terms disabled, which keeps the degeneracy
chain exact.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .backbone import AffectModel, BackboneConfig, cross_entropy, trajectory_mse
from .errors import ConfigurationError
from .metrics import MetricsBundle, categorical_bundle, regression_bundle
from .rao import RankAwareOptimizer, RaoConfig
from .tensor import Tensor, active_dtype, no_grad, precision, precision_mode

OPTIMIZER_KINDS = ("base", "sam", "rao")


@dataclass
class TrainSettings:
    epochs: int = 30
    batch_size: int = 16
    seed: int = 0
    optimizer: str = "rao"
    rao: RaoConfig = field(default_factory=RaoConfig)
    modules: tuple = ("sem", "ddm", "cim")
    stage_widths: tuple = (8, 16, 32)
    precision: str = "f32"
    val_fraction: float = 0.0
    log_every: int = 1

    def optimizer_config(self):
        if self.optimizer == "base":
            return replace(self.rao, rho_base=0.0, alpha=0.0, beta=0.0, gamma=0.0)
        if self.optimizer == "sam":
            return replace(self.rao, alpha=0.0, beta=0.0, gamma=0.0)
        if self.optimizer == "rao":
            return self.rao
        raise ConfigurationError(f"optimizer must be one of {OPTIMIZER_KINDS}")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_metrics: MetricsBundle
    val_metrics: MetricsBundle | None
    mean_rho_r: float
    mean_rho_s: float
    mean_rho_dyn: float

    def to_line(self):
        fields = [f"epoch={self.epoch:03d}", f"loss={self.train_loss!r}"]
        fields += self.train_metrics.format_fields()
        if self.val_metrics is not None:
            fields += self.val_metrics.format_fields(prefix="val_")
        if not math.isnan(self.mean_rho_dyn):
            fields += [
                f"rho_r={self.mean_rho_r!r}",
                f"rho_s={self.mean_rho_s!r}",
                f"rho_dyn={self.mean_rho_dyn!r}",
            ]
        return " ".join(fields)


@dataclass
class TrainResult:
    model: AffectModel
    history: list
    sensitivity_lines: list
    split_hash: str


def _task_of(samples):
    return "categorical" if samples[0].label is not None else "regression"


def _stack_features(samples, indices):
    return np.stack([samples[i].features for i in indices]).astype(active_dtype())


def _targets(samples, indices, task):
    if task == "categorical":
        return np.array([samples[i].label for i in indices])
    return np.stack([samples[i].trajectory for i in indices]).astype(active_dtype())


def _batch_loss(model, features, targets, task):
    out = model.forward(Tensor(features))
    if task == "categorical":
        return cross_entropy(out, targets)
    return trajectory_mse(out, Tensor(targets))


def evaluate(model, samples, indices, task, batch_size=32):
    """Metrics of the current model over `indices`, without recording a graph."""
    preds = []
    truths = []
    with no_grad():
        for start in range(0, len(indices), batch_size):
            chunk = indices[start:start + batch_size]
            feats = _stack_features(samples, chunk)
            out = model.forward(Tensor(feats)).data
            if task == "categorical":
                preds.append(out.argmax(axis=1))
                truths.append(np.array([samples[i].label for i in chunk]))
            else:
                preds.append(np.asarray(out, dtype=np.float64))
                truths.append(np.stack([samples[i].trajectory for i in chunk]))
    preds = np.concatenate(preds)
    truths = np.concatenate(truths)
    if task == "categorical":
        return categorical_bundle(preds, truths)
    return regression_bundle(preds, truths)


def split_indices(n, val_fraction, seed):
    rng = np.random.default_rng(np.uint64(seed) + np.uint64(0x5EED))
    order = rng.permutation(n)
    val_count = int(round(n * val_fraction))
    return np.sort(order[val_count:]), np.sort(order[:val_count])


def split_hash(samples, train_idx, val_idx):
    import hashlib

    digest = hashlib.blake2b(digest_size=8)
    digest.update(np.asarray(train_idx, dtype=np.int64).tobytes())
    digest.update(np.asarray(val_idx, dtype=np.int64).tobytes())
    for sample in samples:
        digest.update(sample.features.astype("<f8").tobytes())
    return digest.hexdigest()


def run_training(samples, settings: TrainSettings, backbone_overrides=None,
                 log_fn=None, sensitivity_every=0):
    """Train a model on the samples; returns model, history and log material."""
    task = _task_of(samples)
    with precision(settings.precision):
        shape = samples[0].features.shape
        cfg = BackboneConfig(
            in_channels=shape[0],
            frames=shape[1],
            height=shape[2],
            width=shape[3],
            modules=tuple(settings.modules),
            head="categorical" if task == "categorical" else "valence-arousal",
            stage_widths=tuple(settings.stage_widths),
            **(backbone_overrides or {}),
        )
        model = AffectModel(cfg, seed=settings.seed)
        params = model.named_parameters()
        optimizer = RankAwareOptimizer(params, settings.optimizer_config())
        train_idx, val_idx = split_indices(len(samples), settings.val_fraction, settings.seed)
        shash = split_hash(samples, train_idx, val_idx)

        rng = np.random.default_rng(np.uint64(settings.seed) + np.uint64(0xBA7C4))
        history = []
        sensitivity_lines = []
        track_rho = settings.optimizer != "base"
        for epoch in range(1, settings.epochs + 1):
            order = train_idx[rng.permutation(len(train_idx))]
            losses = []
            rho_r_sum = rho_s_sum = rho_dyn_sum = 0.0
            rho_n = 0
            for start in range(0, len(order), settings.batch_size):
                chunk = order[start:start + settings.batch_size]
                feats = _stack_features(samples, chunk)
                targets = _targets(samples, chunk, task)
                loss, _, report = optimizer.step(
                    lambda: _batch_loss(model, feats, targets, task))
                losses.append(loss)
                if track_rho:
                    for entry in report.entries:
                        rho_r_sum += entry.rho_r
                        rho_s_sum += entry.rho_s
                        rho_dyn_sum += entry.rho_dyn
                        rho_n += 1
                if sensitivity_every and optimizer.step_count % sensitivity_every == 0:
                    sensitivity_lines.extend(report.to_lines())
            train_metrics = evaluate(model, samples, train_idx, task)
            val_metrics = evaluate(model, samples, val_idx, task) if len(val_idx) else None
            record = EpochRecord(
                epoch=epoch,
                train_loss=float(np.mean(losses)),
                train_metrics=train_metrics,
                val_metrics=val_metrics,
                mean_rho_r=rho_r_sum / rho_n if rho_n else math.nan,
                mean_rho_s=rho_s_sum / rho_n if rho_n else math.nan,
                mean_rho_dyn=rho_dyn_sum / rho_n if rho_n else math.nan,
            )
            history.append(record)
            if log_fn is not None and epoch % settings.log_every == 0:
                log_fn(record.to_line())
        return TrainResult(
            model=model,
            history=history,
            sensitivity_lines=sensitivity_lines,
            split_hash=shash,
        )
