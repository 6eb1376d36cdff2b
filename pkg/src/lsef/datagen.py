"""Synthetic affect-sequence generator.

Each sample is a rank-r spatiotemporal base (outer products of smooth
temporal profiles and spatial patterns, class- or trajectory-dependent) plus
up to three single-frame sparse bursts, plus optional Gaussian noise. The
per-sample seed is `seed XOR index`, so any sample regenerates in isolation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .container import load_bundle, save_bundle
from .errors import DataError, UsageError

NUM_CLASSES = 7
TASKS = ("categorical", "regression")


@dataclass
class SequenceSample:
    features: np.ndarray            # (C, T, H, W) float64
    seed: int
    label: int | None = None        # categorical task
    trajectory: np.ndarray | None = None  # (T, 2) in [-1, 1], regression task
    meta: dict = field(default_factory=dict)


def _spatial_blob(height, width, center_h, center_w, sigma):
    hh = np.arange(height, dtype=np.float64)[:, None]
    ww = np.arange(width, dtype=np.float64)[None, :]
    blob = np.exp(-((hh - center_h) ** 2 + (ww - center_w) ** 2) / (2.0 * sigma * sigma))
    return blob / np.sqrt((blob * blob).sum())


def _class_profile(class_id, channels, frames, height, width):
    """Deterministic per-class building blocks: r temporal curves x spatial maps.

    Term 0 is the stable tone: a constant-in-time broad pattern whose channel
    signature is a sign code of the class, so classes stay distinguishable
    after aggressive pooling. Later terms add class-specific oscillations at
    class-specific locations.
    """
    rank = 1 + class_id % 3
    base_rng = np.random.default_rng(9000 + class_id)
    terms = []
    signature = np.full(channels, 0.15)
    for bit in range(min(3, channels)):
        signature[bit] = 0.8 if (class_id >> bit) & 1 else -0.8
    broad = _spatial_blob(height, width, height / 2.0, width / 2.0, sigma=height / 2.5)
    broad = broad + 0.5 * broad.max()
    broad /= np.sqrt((broad * broad).sum())
    terms.append((np.ones(frames), signature[:, None, None] * broad[None]))
    for i in range(1, rank):
        freq = 0.5 + 0.5 * ((class_id + 2 * i) % 4)
        phase = 2.0 * np.pi * ((class_id * 3 + i) % 7) / 7.0
        t = np.arange(frames, dtype=np.float64)
        temporal = np.sin(2.0 * np.pi * freq * t / frames + phase) + 0.3
        center_h = height * (0.2 + 0.6 * ((class_id + i * 3) % 5) / 4.0)
        center_w = width * (0.2 + 0.6 * ((class_id * 2 + i) % 5) / 4.0)
        spatial = _spatial_blob(height, width, center_h, center_w, sigma=max(1.5, height / 5.0))
        channel_mix = base_rng.uniform(0.2, 1.0, channels)
        channel_mix /= np.sqrt((channel_mix * channel_mix).sum())
        terms.append((temporal, channel_mix[:, None, None] * spatial[None]))
    return terms


def _categorical_sample(index, class_id, rng, channels, frames, height, width, noise):
    features = np.zeros((channels, frames, height, width), dtype=np.float64)
    terms = _class_profile(class_id, channels, frames, height, width)
    for temporal, pattern in terms:
        amplitude = 1.0 + 0.2 * rng.uniform(-1.0, 1.0)
        features += amplitude * temporal[None, :, None, None] * pattern[:, None]
    burst_count = int(rng.integers(1, 4))
    bursts = []
    for _ in range(burst_count):
        frame = int(rng.integers(0, frames))
        ch = rng.uniform(0.0, height - 1.0)
        cw = rng.uniform(0.0, width - 1.0)
        blob = _spatial_blob(height, width, ch, cw, sigma=1.2)
        channel_mix = rng.uniform(-1.0, 1.0, channels)
        channel_mix /= max(1e-9, np.sqrt((channel_mix * channel_mix).sum()))
        amplitude = float(rng.choice([-1.0, 1.0]) * rng.uniform(0.35, 0.6))
        features[:, frame] += amplitude * channel_mix[:, None, None] * blob
        bursts.append({"frame": frame, "h": round(ch, 3), "w": round(cw, 3)})
    if noise > 0.0:
        features += noise * rng.standard_normal(features.shape)
    return SequenceSample(
        features=features,
        seed=index,
        label=class_id,
        meta={"pattern": class_id, "rank": len(terms), "bursts": bursts},
    )


def _regression_sample(index, rng, channels, frames, height, width, noise):
    t = np.arange(frames, dtype=np.float64)
    fv = rng.uniform(0.5, 1.5)
    fa = rng.uniform(0.5, 1.5)
    pv = rng.uniform(0.0, 2.0 * np.pi)
    pa = rng.uniform(0.0, 2.0 * np.pi)
    valence = 0.55 * np.sin(2.0 * np.pi * fv * t / frames + pv)
    arousal = 0.55 * np.sin(2.0 * np.pi * fa * t / frames + pa)
    burst_count = int(rng.integers(1, 4))
    bursts = []
    for _ in range(burst_count):
        frame = int(rng.integers(0, frames))
        valence[frame] += float(rng.uniform(-0.25, 0.25))
        arousal[frame] += float(rng.uniform(-0.25, 0.25))
        bursts.append({"frame": frame})
    valence = np.clip(valence, -0.95, 0.95)
    arousal = np.clip(arousal, -0.95, 0.95)

    # Valence drives channel 0, arousal channel 1; burst blobs live on the
    # remaining channels so the trajectory stays linearly decodable.
    pattern_v = _spatial_blob(height, width, height * 0.35, width * 0.35, sigma=max(1.5, height / 5.0))
    pattern_a = _spatial_blob(height, width, height * 0.65, width * 0.65, sigma=max(1.5, height / 5.0))
    features = np.zeros((channels, frames, height, width), dtype=np.float64)
    features[0] = valence[:, None, None] * pattern_v[None]
    features[min(1, channels - 1)] += arousal[:, None, None] * pattern_a[None]
    if channels > 2:
        for burst in bursts:
            blob = _spatial_blob(
                height, width,
                rng.uniform(0.0, height - 1.0), rng.uniform(0.0, width - 1.0), sigma=1.2,
            )
            channel = 2 + int(rng.integers(0, channels - 2))
            features[channel, burst["frame"]] += float(rng.choice([-1.0, 1.0]) * 0.5) * blob
    if noise > 0.0:
        features += noise * rng.standard_normal(features.shape)
    trajectory = np.stack([valence, arousal], axis=1)
    return SequenceSample(
        features=features,
        seed=index,
        trajectory=trajectory,
        meta={"pattern": -1, "rank": 2, "bursts": bursts},
    )


def class_counts(n, imbalance=None):
    """Balanced counts, or a geometric profile (largest remainder rounding)."""
    if imbalance is None:
        base = [n // NUM_CLASSES] * NUM_CLASSES
        for i in range(n % NUM_CLASSES):
            base[i] += 1
        return base
    weights = np.array([imbalance ** c for c in range(NUM_CLASSES)], dtype=np.float64)
    weights /= weights.sum()
    raw = weights * n
    counts = np.floor(raw).astype(int)
    remainder = n - counts.sum()
    order = np.argsort(-(raw - counts))
    for i in range(remainder):
        counts[order[i]] += 1
    return counts.tolist()


def generate(n, task, seed, noise=0.05, channels=4, frames=8, height=16, width=16,
             imbalance=None):
    """Deterministic list of samples; sample i uses seed ^ i."""
    if n <= 0:
        raise UsageError("n must be positive")
    if task not in TASKS:
        raise UsageError(f"task must be one of {TASKS}, got {task!r}")
    samples = []
    if task == "categorical":
        labels = []
        for class_id, count in enumerate(class_counts(n, imbalance)):
            labels += [class_id] * count
        for i in range(n):
            rng = np.random.default_rng(np.uint64(seed) ^ np.uint64(i))
            samples.append(_categorical_sample(
                i, labels[i], rng, channels, frames, height, width, noise))
    else:
        for i in range(n):
            rng = np.random.default_rng(np.uint64(seed) ^ np.uint64(i))
            samples.append(_regression_sample(i, rng, channels, frames, height, width, noise))
    return samples


def save_dataset(path, samples, task, seed, noise):
    tensors = {}
    labels = []
    metas = []
    for i, sample in enumerate(samples):
        tensors[f"sample{i:05d}"] = sample.features
        if task == "categorical":
            labels.append(int(sample.label))
        else:
            tensors[f"traj{i:05d}"] = sample.trajectory
        metas.append(sample.meta)
    first = samples[0].features
    meta = {
        "kind": "lsef-dataset",
        "task": task,
        "n": len(samples),
        "seed": seed,
        "noise": noise,
        "shape": list(first.shape),
        "labels": labels,
        "sample_meta": metas,
    }
    save_bundle(path, tensors, meta)


def load_dataset(path):
    tensors, meta = load_bundle(path)
    if meta.get("kind") != "lsef-dataset":
        raise DataError(f"{path} is not a dataset bundle")
    samples = []
    task = meta["task"]
    for i in range(meta["n"]):
        features = tensors[f"sample{i:05d}"]
        sample_meta = meta["sample_meta"][i]
        if task == "categorical":
            samples.append(SequenceSample(
                features=features, seed=i, label=meta["labels"][i], meta=sample_meta))
        else:
            samples.append(SequenceSample(
                features=features, seed=i, trajectory=tensors[f"traj{i:05d}"], meta=sample_meta))
    return samples, meta
