"""Tiny victim classifiers with hand-written forward and backward passes.

Three architectures cover the white-box source and black-box target roles:
a linear-softmax probe (closed-form gradients, the oracle-friendly case)
and two small convnets that differ in width. All math is double precision
and batched channel-last (B, H, W, C); the input gradient produced by
backprop is the quantity every attack consumes, so it is finite-difference
checked in the tests.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .numerics import RandomStream
from .serial import FileFormatError, read_framed, write_framed

__all__ = [
    "ARCHITECTURES",
    "Dataset",
    "ModelHandle",
    "accuracy",
    "forward",
    "forward_batch",
    "init_model",
    "load_model",
    "loss_and_gradient",
    "loss_and_gradient_batch",
    "predict",
    "save_model",
    "train",
]

ARCHITECTURES = ("linear_softmax", "cnn_small", "cnn_wide")
_CNN_CHANNELS = {"cnn_small": (8, 16), "cnn_wide": (16, 32)}

_MODEL_MAGIC = b"FSAM"
_MODEL_VERSION = 1
_HEADER = struct.Struct("<BHHHHQ")  # arch id, H, W, C, num_classes, param count


@dataclass
class Dataset:
    """Images with labels and a train/eval split tag per sample."""

    images: np.ndarray  # (N, H, W, C) float64 in [0, 1]
    labels: np.ndarray  # (N,) int64
    split: np.ndarray  # (N,) unicode tags, "train" or "eval"
    num_classes: int

    def validate(self) -> None:
        n = len(self.images)
        if len(self.labels) != n or len(self.split) != n:
            raise ValueError("images, labels and split tags must have equal length")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError("labels out of range")
        if self.images.size and not (
            np.isfinite(self.images).all()
            and self.images.min() >= 0.0
            and self.images.max() <= 1.0
        ):
            raise ValueError("image values must be finite and lie in [0, 1]")
        bad = set(np.unique(self.split)) - {"train", "eval"}
        if bad:
            raise ValueError(f"unknown split tags {sorted(bad)}")

    def subset(self, tag: str) -> tuple[np.ndarray, np.ndarray]:
        mask = self.split == tag
        return self.images[mask], self.labels[mask]

    def train_set(self) -> tuple[np.ndarray, np.ndarray]:
        return self.subset("train")

    def eval_set(self) -> tuple[np.ndarray, np.ndarray]:
        return self.subset("eval")


@dataclass
class ModelHandle:
    """Architecture id, named parameter tensors, and training provenance."""

    architecture: str
    input_shape: tuple  # (H, W, C)
    num_classes: int
    params: dict
    training_meta: dict = field(default_factory=dict)


def _layer_shapes(architecture: str, input_shape: tuple, num_classes: int) -> list:
    """Canonical (name, shape) layout; also fixes serialization order."""
    h, w, c = input_shape
    if architecture == "linear_softmax":
        return [("dense_w", (h * w * c, num_classes)), ("dense_b", (num_classes,))]
    if architecture not in _CNN_CHANNELS:
        raise ValueError(f"unknown architecture {architecture!r}")
    if h % 4 or w % 4:
        raise ValueError("convnet input dimensions must be divisible by 4 (two 2x2 pools)")
    c1, c2 = _CNN_CHANNELS[architecture]
    return [
        ("conv1_w", (3, 3, c, c1)),
        ("conv1_b", (c1,)),
        ("conv2_w", (3, 3, c1, c2)),
        ("conv2_b", (c2,)),
        ("dense_w", ((h // 4) * (w // 4) * c2, num_classes)),
        ("dense_b", (num_classes,)),
    ]


def init_model(
    architecture: str,
    input_shape: tuple = (32, 32, 3),
    num_classes: int = 10,
    seed: int = 0,
) -> ModelHandle:
    """He-scaled random weights, zero biases, deterministic in the seed."""
    layout = _layer_shapes(architecture, input_shape, num_classes)
    stream = RandomStream(seed)
    params = {}
    for i, (name, shape) in enumerate(layout):
        if name.endswith("_b"):
            params[name] = np.zeros(shape)
            continue
        fan_in = int(np.prod(shape[:-1]))
        std = np.sqrt(2.0 / fan_in) if architecture != "linear_softmax" else 1.0 / np.sqrt(fan_in)
        params[name] = stream.child(i).generator().standard_normal(shape) * std
    return ModelHandle(architecture, tuple(input_shape), num_classes, params)


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------


def _conv3_forward(x, w, b):
    """Same-padded 3x3 convolution as nine shifted (Cin x Cout) matmuls."""
    bsz, h, wd, cin = x.shape
    cout = w.shape[-1]
    xp = np.zeros((bsz, h + 2, wd + 2, cin))
    xp[:, 1:-1, 1:-1, :] = x
    out = np.zeros((bsz, h, wd, cout))
    for di in range(3):
        for dj in range(3):
            seg = xp[:, di : di + h, dj : dj + wd, :].reshape(-1, cin)
            out += (seg @ w[di, dj]).reshape(bsz, h, wd, cout)
    return out + b, xp


def _conv3_backward(dout, xp, w):
    bsz, h, wd, cout = dout.shape
    cin = w.shape[2]
    dxp = np.zeros_like(xp)
    dw = np.zeros_like(w)
    dflat = dout.reshape(-1, cout)
    for di in range(3):
        for dj in range(3):
            seg = xp[:, di : di + h, dj : dj + wd, :].reshape(-1, cin)
            dw[di, dj] = seg.T @ dflat
            dxp[:, di : di + h, dj : dj + wd, :] += (dflat @ w[di, dj].T).reshape(
                bsz, h, wd, cin
            )
    db = dout.sum(axis=(0, 1, 2))
    return dxp[:, 1:-1, 1:-1, :], dw, db


def _pool2_forward(x):
    """2x2 max pooling, stride 2; the argmax index is kept for routing."""
    bsz, h, wd, c = x.shape
    xr = (
        x.reshape(bsz, h // 2, 2, wd // 2, 2, c)
        .transpose(0, 1, 3, 5, 2, 4)
        .reshape(bsz, h // 2, wd // 2, c, 4)
    )
    idx = xr.argmax(axis=-1)
    out = np.take_along_axis(xr, idx[..., None], axis=-1)[..., 0]
    return out, idx


def _pool2_backward(dout, idx, in_shape):
    bsz, h, wd, c = in_shape
    dxr = np.zeros((bsz, h // 2, wd // 2, c, 4))
    np.put_along_axis(dxr, idx[..., None], dout[..., None], axis=-1)
    return (
        dxr.reshape(bsz, h // 2, wd // 2, c, 2, 2)
        .transpose(0, 1, 4, 2, 5, 3)
        .reshape(bsz, h, wd, c)
    )


def _softmax(logits):
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _cross_entropy(logits, labels):
    """Per-sample -log softmax[label], stable for logits up to ~1e3."""
    m = logits.max(axis=-1)
    lse = m + np.log(np.exp(logits - m[:, None]).sum(axis=-1))
    return lse - logits[np.arange(len(labels)), labels]


# ---------------------------------------------------------------------------
# forward / backward per architecture
# ---------------------------------------------------------------------------


def _forward_pass(model: ModelHandle, xb: np.ndarray):
    p = model.params
    if model.architecture == "linear_softmax":
        flat = xb.reshape(len(xb), -1)
        return flat @ p["dense_w"] + p["dense_b"], (flat,)
    a1, xp1 = _conv3_forward(xb, p["conv1_w"], p["conv1_b"])
    r1 = np.maximum(a1, 0.0)
    p1, idx1 = _pool2_forward(r1)
    a2, xp2 = _conv3_forward(p1, p["conv2_w"], p["conv2_b"])
    r2 = np.maximum(a2, 0.0)
    p2, idx2 = _pool2_forward(r2)
    flat = p2.reshape(len(xb), -1)
    logits = flat @ p["dense_w"] + p["dense_b"]
    return logits, (xp1, a1, idx1, r1.shape, xp2, a2, idx2, r2.shape, flat, p2.shape)


def _backward_pass(model: ModelHandle, cache, dlogits):
    """Input gradients per sample plus parameter gradients of the summed loss."""
    p = model.params
    if model.architecture == "linear_softmax":
        (flat,) = cache
        grads = {"dense_w": flat.T @ dlogits, "dense_b": dlogits.sum(axis=0)}
        dx = (dlogits @ p["dense_w"].T).reshape((len(flat),) + model.input_shape)
        return dx, grads
    xp1, a1, idx1, r1s, xp2, a2, idx2, r2s, flat, p2s = cache
    grads = {"dense_w": flat.T @ dlogits, "dense_b": dlogits.sum(axis=0)}
    dp2 = (dlogits @ p["dense_w"].T).reshape(p2s)
    dr2 = _pool2_backward(dp2, idx2, r2s)
    da2 = dr2 * (a2 > 0.0)
    dp1, grads["conv2_w"], grads["conv2_b"] = _conv3_backward(da2, xp2, p["conv2_w"])
    dr1 = _pool2_backward(dp1, idx1, r1s)
    da1 = dr1 * (a1 > 0.0)
    dx, grads["conv1_w"], grads["conv1_b"] = _conv3_backward(da1, xp1, p["conv1_w"])
    return dx, grads


def _as_batch(model: ModelHandle, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape == model.input_shape:
        return x[None]
    if x.ndim == 4 and x.shape[1:] == model.input_shape:
        return x
    raise ValueError(f"input shape {x.shape} does not match model input {model.input_shape}")


def _check_labels(model: ModelHandle, yb: np.ndarray) -> np.ndarray:
    yb = np.asarray(yb, dtype=np.int64).reshape(-1)
    if yb.size and (yb.min() < 0 or yb.max() >= model.num_classes):
        raise ValueError(f"labels must lie in [0, {model.num_classes})")
    return yb


# ---------------------------------------------------------------------------
# public inference API
# ---------------------------------------------------------------------------


def forward_batch(model: ModelHandle, xb: np.ndarray):
    logits, _ = _forward_pass(model, _as_batch(model, xb))
    return logits, _softmax(logits)


def forward(model: ModelHandle, x: np.ndarray):
    """Logits and softmax probabilities for one image."""
    logits, probs = forward_batch(model, x[None] if np.asarray(x).ndim == 3 else x)
    return logits[0], probs[0]


def predict(model: ModelHandle, images: np.ndarray, batch_size: int = 128) -> np.ndarray:
    xb = _as_batch(model, images)
    out = np.empty(len(xb), dtype=np.int64)
    for lo in range(0, len(xb), batch_size):
        logits, _ = _forward_pass(model, xb[lo : lo + batch_size])
        out[lo : lo + batch_size] = logits.argmax(axis=-1)
    return out


def accuracy(model: ModelHandle, images: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(predict(model, images) == np.asarray(labels)))


def loss_and_gradient_batch(model: ModelHandle, xb: np.ndarray, yb: np.ndarray):
    """Per-sample cross-entropy losses and per-sample input gradients."""
    xb = _as_batch(model, xb)
    yb = _check_labels(model, yb)
    if len(yb) != len(xb):
        raise ValueError("batch and label counts differ")
    logits, cache = _forward_pass(model, xb)
    losses = _cross_entropy(logits, yb)
    dlogits = _softmax(logits)
    dlogits[np.arange(len(yb)), yb] -= 1.0
    dx, _ = _backward_pass(model, cache, dlogits)
    return losses, dx


def loss_and_gradient(model: ModelHandle, x: np.ndarray, y: int):
    """Cross-entropy loss and its gradient with respect to one input image."""
    losses, dx = loss_and_gradient_batch(model, np.asarray(x)[None], [int(y)])
    return float(losses[0]), dx[0]


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def train(
    dataset: Dataset,
    architecture: str,
    seed: int,
    epochs: int = 30,
    learning_rate: float = 0.05,
    momentum: float = 0.9,
    batch_size: int = 32,
    adversarial_eps: float | None = None,
) -> ModelHandle:
    """Minibatch momentum SGD on cross-entropy, deterministic in the seed.

    With adversarial_eps set, the first half of every batch is replaced by
    single-step FGSM examples at that budget before the update (the cheap
    adversarial-training recipe used for the hardened target).
    """
    dataset.validate()
    train_x, train_y = dataset.train_set()
    if len(train_x) == 0:
        raise ValueError("empty train split")
    h, w, c = train_x.shape[1:]
    model = init_model(architecture, (h, w, c), dataset.num_classes, seed)
    velocity = {k: np.zeros_like(v) for k, v in model.params.items()}
    stream = RandomStream(seed)
    epoch_losses = []
    for epoch in range(epochs):
        order = stream.child(1, epoch).generator().permutation(len(train_x))
        running, seen = 0.0, 0
        for lo in range(0, len(order), batch_size):
            idx = order[lo : lo + batch_size]
            xb, yb = train_x[idx], train_y[idx]
            if adversarial_eps is not None and len(xb) > 1:
                k = len(xb) // 2
                _, dxk = loss_and_gradient_batch(model, xb[:k], yb[:k])
                xb = xb.copy()
                xb[:k] = np.clip(xb[:k] + adversarial_eps * np.sign(dxk), 0.0, 1.0)
            logits, cache = _forward_pass(model, xb)
            losses = _cross_entropy(logits, yb)
            dlogits = _softmax(logits)
            dlogits[np.arange(len(yb)), yb] -= 1.0
            dlogits /= len(yb)  # mean-loss scaling
            _, grads = _backward_pass(model, cache, dlogits)
            for name, g in grads.items():
                velocity[name] = momentum * velocity[name] - learning_rate * g
                model.params[name] += velocity[name]
            running += float(losses.sum())
            seen += len(yb)
        epoch_loss = running / seen
        if not np.isfinite(epoch_loss):
            raise RuntimeError(
                f"training diverged: epoch {epoch} mean loss is {epoch_loss} "
                f"(architecture={architecture}, lr={learning_rate})"
            )
        epoch_losses.append(epoch_loss)
    eval_x, eval_y = dataset.eval_set()
    model.training_meta = {
        "seed": seed,
        "epochs": epochs,
        "learning_rate": learning_rate,
        "momentum": momentum,
        "batch_size": batch_size,
        "adversarial_eps": adversarial_eps,
        "epoch_losses": tuple(epoch_losses),
        "final_train_accuracy": accuracy(model, train_x, train_y),
        "final_eval_accuracy": accuracy(model, eval_x, eval_y) if len(eval_x) else None,
    }
    return model


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------


def save_model(model: ModelHandle, path) -> None:
    """Write magic/version/header, float64 little-endian parameters, CRC-32."""
    layout = _layer_shapes(model.architecture, model.input_shape, model.num_classes)
    flat = np.concatenate(
        [np.ascontiguousarray(model.params[name], dtype="<f8").reshape(-1) for name, _ in layout]
    )
    h, w, c = model.input_shape
    header = _HEADER.pack(
        ARCHITECTURES.index(model.architecture), h, w, c, model.num_classes, flat.size
    )
    write_framed(path, _MODEL_MAGIC, _MODEL_VERSION, header + flat.tobytes())


def load_model(path) -> ModelHandle:
    payload = read_framed(path, _MODEL_MAGIC, _MODEL_VERSION)
    if len(payload) < _HEADER.size:
        raise FileFormatError(f"{path}: header missing")
    arch_id, h, w, c, num_classes, count = _HEADER.unpack_from(payload)
    if arch_id >= len(ARCHITECTURES):
        raise FileFormatError(f"{path}: unknown architecture id {arch_id}")
    architecture = ARCHITECTURES[arch_id]
    layout = _layer_shapes(architecture, (h, w, c), num_classes)
    expected = sum(int(np.prod(shape)) for _, shape in layout)
    if count != expected or len(payload) != _HEADER.size + 8 * expected:
        raise FileFormatError(f"{path}: parameter count does not match the layout")
    flat = np.frombuffer(payload, dtype="<f8", offset=_HEADER.size).astype(np.float64)
    params, pos = {}, 0
    for name, shape in layout:
        size = int(np.prod(shape))
        params[name] = flat[pos : pos + size].reshape(shape)
        pos += size
    return ModelHandle(architecture, (h, w, c), num_classes, params)
