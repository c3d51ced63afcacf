"""Training protocol: class-weighted pixel cross-entropy, SGD with momentum,
affine augmentation, deterministic 70/30 splitting, and the training loop.

Determinism contract: for a fixed seed and single-threaded numerics, two runs
produce bitwise-identical parameters.  Every random draw flows from seeded
generators — network init from the train seed, the per-epoch shuffle from
(seed, epoch), and augmentation from a per-sample stream keyed by
(seed, epoch, crc32(sample id)) so prefetch order can never matter.
"""

from __future__ import annotations

import json
import time
import zlib
from dataclasses import dataclass, field, replace

import numpy as np

from .data import DatasetManifest, load_image, load_mask, resize_pair

__all__ = [
    "AugmentPolicy",
    "AugmentDraw",
    "TrainConfig",
    "compute_class_weights",
    "weighted_cross_entropy",
    "init_momentum_state",
    "sgd_momentum_step",
    "augment_sample",
    "split_dataset",
    "fit",
]


@dataclass(frozen=True)
class AugmentPolicy:
    """One random affine per sample: scale, axis shifts, rotation.

    Ranges follow the usual radiograph recipe: 80-120% scaling, shifts up to
    10% of each axis, rotations up to 10 degrees.  Exposed image pixels take
    ``fill_value``; exposed mask pixels become background.
    """

    scale_range: tuple[float, float] = (0.8, 1.2)
    shift_range: float = 0.10
    rotation_range: float = 10.0
    fill_value: float = 0.0

    def validate(self):
        lo, hi = self.scale_range
        if not (0 < lo <= hi):
            raise ValueError(f"bad scale_range {self.scale_range}")
        if self.shift_range < 0 or self.rotation_range < 0:
            raise ValueError("shift_range and rotation_range must be >= 0")

    def sample(self, rng) -> "AugmentDraw":
        return AugmentDraw(
            scale=rng.uniform(*self.scale_range),
            shift_x=rng.uniform(-self.shift_range, self.shift_range),
            shift_y=rng.uniform(-self.shift_range, self.shift_range),
            angle_deg=rng.uniform(-self.rotation_range, self.rotation_range),
        )

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentPolicy":
        d = dict(d)
        if "scale_range" in d:
            d["scale_range"] = tuple(d["scale_range"])
        return cls(**d)


@dataclass(frozen=True)
class AugmentDraw:
    scale: float = 1.0
    shift_x: float = 0.0  # fraction of the x axis
    shift_y: float = 0.0
    angle_deg: float = 0.0


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 8
    learning_rate: float = 0.0100
    momentum: float = 0.9
    epochs: int = 40
    seed: int = 0
    class_weight_mode: str = "median-frequency"
    augment: AugmentPolicy | None = field(default_factory=AugmentPolicy)
    input_size: int = 256

    def validate(self):
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if self.class_weight_mode not in ("median-frequency", "uniform"):
            raise ValueError(
                f"unknown class_weight_mode {self.class_weight_mode!r}"
            )
        if self.input_size < 16:
            raise ValueError(f"input_size must be >= 16, got {self.input_size}")
        if self.augment is not None:
            self.augment.validate()

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "augment" in d:
            d["augment"] = (
                AugmentPolicy.from_dict(d["augment"]) if d["augment"] else None
            )
        return cls(**d)


# ---------------------------------------------------------------------------
# loss and class weights

def compute_class_weights(masks, mode="median-frequency") -> np.ndarray:
    """Per-class weights over a set of {0,1} masks.

    Median-frequency balancing: weight_c = median(freq) / freq_c with
    freq_c the fraction of pixels belonging to class c.  Uniform mode
    returns ones.
    """
    if mode == "uniform":
        return np.ones(2, dtype=np.float64)
    if mode != "median-frequency":
        raise ValueError(f"unknown class weight mode {mode!r}")
    counts = np.zeros(2, dtype=np.int64)
    for mask in masks:
        mask = np.asarray(mask)
        fg = int(np.count_nonzero(mask))
        counts[1] += fg
        counts[0] += mask.size - fg
    for cls_id, name in enumerate(("background", "lung")):
        if counts[cls_id] == 0:
            raise ValueError(f"class {name!r} has no pixels in the training masks")
    freq = counts / counts.sum()
    return np.median(freq) / freq


def weighted_cross_entropy(logits, labels, weights):
    """Class-weighted pixel cross-entropy, normalized by the applied weight.

        loss = sum_px w[label] * (-log softmax(logits)[label]) / sum_px w[label]

    The normalizer makes the value invariant to rescaling all weights.
    Returns ``(loss, logit_grads)`` with the exact adjoint.
    """
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    if logits.ndim != 4:
        raise ValueError(f"logits must be 4-D, got shape {logits.shape}")
    n, c, h, w = logits.shape
    if labels.shape != (n, h, w):
        raise ValueError(
            f"labels shape {labels.shape} does not match logits spatial dims "
            f"{(n, h, w)}"
        )
    if labels.min() < 0 or labels.max() >= c:
        raise ValueError(
            f"labels must lie in [0, {c}), got range "
            f"[{labels.min()}, {labels.max()}]"
        )
    weights = np.asarray(weights, dtype=logits.dtype)
    if weights.shape != (c,):
        raise ValueError(f"need one weight per class, got shape {weights.shape}")

    labels = labels.astype(np.intp)
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    softmax = exp / exp.sum(axis=1, keepdims=True)
    log_softmax = shifted - np.log(exp.sum(axis=1, keepdims=True))

    ni, hi, wi = np.ix_(np.arange(n), np.arange(h), np.arange(w))
    nll = -log_softmax[ni, labels, hi, wi]
    px_weight = weights[labels]
    weight_sum = px_weight.sum(dtype=np.float64)
    loss = float((px_weight * nll).sum(dtype=np.float64) / weight_sum)

    grads = softmax.copy()
    grads[ni, labels, hi, wi] -= 1.0
    grads *= (px_weight / weight_sum)[:, None, :, :].astype(logits.dtype)
    return loss, grads


# ---------------------------------------------------------------------------
# optimizer

def init_momentum_state(params) -> dict[str, np.ndarray]:
    """Zero velocity per parameter, mirroring shapes."""
    return {name: np.zeros_like(p) for name, p in params.items()}


def sgd_momentum_step(params, grads, state, lr, momentum):
    """One heavy-ball update, in place:  v <- m*v + g;  p <- p - lr*v."""
    if params.keys() != grads.keys() or params.keys() != state.keys():
        missing = set(params) ^ set(grads) | set(params) ^ set(state)
        raise ValueError(f"parameter/gradient/state key mismatch: {sorted(missing)}")
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(
                f"gradient shape {g.shape} != parameter shape {p.shape} for {name}"
            )
        v = state[name]
        v *= momentum
        v += g.astype(v.dtype, copy=False)
        p -= lr * v
    return params, state


# ---------------------------------------------------------------------------
# augmentation

def augment_sample(image, mask, policy: AugmentPolicy, draw: AugmentDraw):
    """Apply one affine (scale, shift, rotation about the center) by inverse
    mapping: the image is sampled bilinearly, the mask nearest-neighbour.

    Exposed image pixels take ``policy.fill_value``; exposed mask pixels
    become background.  The identity draw reproduces both inputs exactly.
    """
    image = np.asarray(image)
    mask = np.asarray(mask)
    if image.shape != mask.shape:
        raise ValueError(
            f"image {image.shape} and mask {mask.shape} dimensions differ"
        )
    h, w = image.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    ty = draw.shift_y * h
    tx = draw.shift_x * w
    theta = np.deg2rad(draw.angle_deg)
    cos_t, sin_t = np.cos(theta), np.sin(theta)

    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    # invert dst = C + R(theta) * s * (src - C) + t
    u = xx - cx - tx
    v = yy - cy - ty
    src_x = (cos_t * u + sin_t * v) / draw.scale + cx
    src_y = (-sin_t * u + cos_t * v) / draw.scale + cy

    # image: bilinear with fill outside the source frame
    x0 = np.floor(src_x).astype(np.intp)
    y0 = np.floor(src_y).astype(np.intp)
    fx = src_x - x0
    fy = src_y - y0
    out_img = np.zeros((h, w), dtype=np.float64)
    for dy, dx, wgt in (
        (0, 0, (1 - fy) * (1 - fx)),
        (0, 1, (1 - fy) * fx),
        (1, 0, fy * (1 - fx)),
        (1, 1, fy * fx),
    ):
        ys = y0 + dy
        xs = x0 + dx
        inside = (ys >= 0) & (ys < h) & (xs >= 0) & (xs < w)
        vals = np.where(
            inside, image[np.clip(ys, 0, h - 1), np.clip(xs, 0, w - 1)],
            policy.fill_value,
        )
        out_img += wgt * vals

    # mask: nearest neighbour, background outside
    ny = np.floor(src_y + 0.5).astype(np.intp)
    nx = np.floor(src_x + 0.5).astype(np.intp)
    inside = (ny >= 0) & (ny < h) & (nx >= 0) & (nx < w)
    out_mask = np.where(
        inside, mask[np.clip(ny, 0, h - 1), np.clip(nx, 0, w - 1)], 0
    ).astype(mask.dtype)
    return out_img.astype(image.dtype), out_mask


# ---------------------------------------------------------------------------
# dataset split

def split_dataset(manifest: DatasetManifest, ratio=0.70, seed=0):
    """Seeded-shuffle split: the first round(ratio * N) samples train.

    Returns (train manifest, test manifest) with split tags set; the two are
    disjoint and together exhaustive.
    """
    n = len(manifest)
    if n == 0:
        raise ValueError("cannot split an empty manifest")
    if not 0 < ratio < 1:
        raise ValueError(f"ratio must lie in (0, 1), got {ratio}")
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(np.floor(ratio * n + 0.5))  # round half up
    train_idx = order[:n_train]
    test_idx = order[n_train:]
    train = DatasetManifest(
        samples=[replace(manifest.samples[i], split="train") for i in train_idx],
        provenance=manifest.provenance,
    )
    test = DatasetManifest(
        samples=[replace(manifest.samples[i], split="test") for i in test_idx],
        provenance=manifest.provenance,
    )
    return train, test


# ---------------------------------------------------------------------------
# the training loop

def _sample_stream(seed, epoch, sample_id):
    return np.random.default_rng([seed, 1, epoch, zlib.crc32(sample_id.encode())])


def fit(net, manifest: DatasetManifest, config: TrainConfig, event_sink=None):
    """Run the full training protocol over the manifest's samples.

    Per epoch: seeded shuffle into mini-batches, per-sample augmentation
    draw, forward in train mode, weighted cross-entropy, backward, one
    momentum step.  Emits per-iteration and per-epoch events (dicts) to
    ``event_sink`` and returns ``(net, log)`` with the full event list.
    """
    config.validate()
    if len(manifest) == 0:
        raise ValueError("training manifest is empty")

    log = []

    def emit(event):
        log.append(event)
        if event_sink is not None:
            event_sink(event)

    # load and resize everything once; augmentation works on the cached pairs
    cache = []
    for sample in manifest.samples:
        if sample.mask_path is None:
            raise ValueError(f"sample {sample.id!r} has no mask; cannot train on it")
        try:
            image = load_image(sample.image_path)
            mask = load_mask(sample.mask_path)
        except Exception as exc:
            raise RuntimeError(f"failed to load sample {sample.id!r}: {exc}") from exc
        image, mask = resize_pair(image, mask, config.input_size)
        cache.append((sample.id, image, mask))

    weights = compute_class_weights(
        (mask for _, _, mask in cache), config.class_weight_mode
    )

    params = net.parameters()
    state = init_momentum_state(params)
    started = time.time()
    iteration = 0
    mean_loss = float("nan")

    for epoch in range(config.epochs):
        order = np.random.default_rng([config.seed, 0, epoch]).permutation(len(cache))
        epoch_losses = []
        for lo in range(0, len(order), config.batch_size):
            batch_idx = order[lo : lo + config.batch_size]
            images = []
            labels = []
            for i in batch_idx:
                sid, image, mask = cache[i]
                if config.augment is not None:
                    draw = config.augment.sample(
                        _sample_stream(config.seed, epoch, sid)
                    )
                    image, mask = augment_sample(image, mask, config.augment, draw)
                images.append(image)
                labels.append(mask)
            x = np.stack(images)[:, None, :, :].astype(np.float32)
            y = np.stack(labels).astype(np.int64)

            logits = net.forward(x, "train")
            loss, logit_grads = weighted_cross_entropy(logits, y, weights)
            if not np.isfinite(loss):
                raise RuntimeError(f"non-finite loss at iteration {iteration}")
            grads = net.backward(logit_grads)
            sgd_momentum_step(
                params, grads, state, config.learning_rate, config.momentum
            )
            epoch_losses.append(loss)
            emit(
                {
                    "event": "iteration",
                    "iteration": iteration,
                    "epoch": epoch,
                    "loss": loss,
                    "learning_rate": config.learning_rate,
                    "timestamp": time.time(),
                }
            )
            iteration += 1
        mean_loss = float(np.mean(epoch_losses))
        emit(
            {
                "event": "epoch",
                "epoch": epoch,
                "mean_loss": mean_loss,
                "iterations": iteration,
                "timestamp": time.time(),
            }
        )

    emit(
        {
            "event": "summary",
            "epochs": config.epochs,
            "iterations": iteration,
            "wall_time_s": time.time() - started,
            "final_mean_loss": mean_loss,
        }
    )
    return net, log


def jsonl_sink(path):
    """Event sink appending one JSON object per line to ``path``."""
    fh = open(path, "a")

    def sink(event):
        fh.write(json.dumps(event) + "\n")
        fh.flush()

    return sink
