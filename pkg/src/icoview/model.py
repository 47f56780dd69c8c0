"""The differentiable network and its exact-gradient machinery.

Architecture: a small convolutional encoder (3x3 stride-2 convolutions with
ReLU, shared across views) maps each rendered view to an F-vector; a
score-based softmax attention pools the per-view vectors into one; a single
affine head emits 1+K outputs — row 0 the age regression, rows 1..K the class
logits. The loss is squared regression error plus class-weighted
cross-entropy.

Everything runs in double precision. Gradients are computed by hand-written
reverse-mode passes whose contract is the exact gradient of the composed
forward functions; correctness is pinned by finite-difference tests.

Checkpoints serialize a JSON metadata block plus each named tensor as a shape
header and 32-bit little-endian floats; see :func:`save_checkpoint`.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import logsumexp, softmax

from .data import ClassWeights

CHECKPOINT_MAGIC = b"CKP1"
CHECKPOINT_VERSION = 1

KERNEL = 3
STRIDE = 2
PAD = 1


@dataclass(frozen=True)
class EncoderConfig:
    """Shape of the per-view convolutional encoder.

    One stage = 3x3 convolution, stride 2, padding 1, bias, then ReLU. After
    the last stage, global average pooling yields the per-view feature vector,
    so the feature dimension equals the last stage's channel count.
    ``internal_dropout_p`` applies inverted dropout after each stage's ReLU in
    train mode only (default off; input-level dropout lives in the data
    augmentation instead).
    """

    in_channels: int = 4
    stage_channels: tuple[int, ...] = (16, 32, 64, 128)
    internal_dropout_p: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "stage_channels", tuple(int(c) for c in self.stage_channels))
        if self.in_channels < 1:
            raise ValueError(f"in_channels must be >= 1, got {self.in_channels}")
        if not self.stage_channels or any(c < 1 for c in self.stage_channels):
            raise ValueError(f"stage channels must all be >= 1, got {self.stage_channels}")
        if not 0.0 <= self.internal_dropout_p < 1.0:
            raise ValueError(f"internal_dropout_p must be in [0, 1), got {self.internal_dropout_p}")

    @property
    def feature_dim(self) -> int:
        return self.stage_channels[-1]


@dataclass(frozen=True)
class AttentionPool:
    """Scoring parameters for softmax attention over per-view features."""

    score_weights: np.ndarray
    score_bias: float

    def __post_init__(self):
        w = np.asarray(self.score_weights, dtype=np.float64)
        if w.ndim != 1:
            raise ValueError(f"score_weights must be 1-D, got shape {w.shape}")
        b = float(self.score_bias)
        if not (np.isfinite(w).all() and np.isfinite(b)):
            raise ValueError("attention parameters must be finite")
        object.__setattr__(self, "score_weights", w)
        object.__setattr__(self, "score_bias", b)


@dataclass(frozen=True)
class JointHead:
    """Affine head: output row 0 is the regression, rows 1..K class logits."""

    weight: np.ndarray  # (1 + K, F)
    bias: np.ndarray  # (1 + K,)

    def __post_init__(self):
        w = np.asarray(self.weight, dtype=np.float64)
        b = np.asarray(self.bias, dtype=np.float64)
        if w.ndim != 2 or b.shape != (w.shape[0],):
            raise ValueError(f"head weight (1+K, F) and bias (1+K,) mismatch: {w.shape} vs {b.shape}")
        if w.shape[0] < 2:
            raise ValueError("head needs at least 1 regression + 1 logit output")
        if not (np.isfinite(w).all() and np.isfinite(b).all()):
            raise ValueError("head parameters must be finite")
        object.__setattr__(self, "weight", w)
        object.__setattr__(self, "bias", b)

    @property
    def class_count(self) -> int:
        return self.weight.shape[0] - 1


@dataclass(frozen=True)
class LossConfig:
    """Combined loss: squared error + ce_lambda * class-weighted cross-entropy.

    ``class_weights`` of None means uniform weight 1 for every class.
    """

    ce_lambda: float = 1.0
    class_weights: ClassWeights | None = None

    def __post_init__(self):
        if self.ce_lambda < 0:
            raise ValueError(f"ce_lambda must be >= 0, got {self.ce_lambda}")

    def weight_vector(self, class_count: int) -> np.ndarray:
        if self.class_weights is None:
            return np.ones(class_count)
        w = self.class_weights.weights
        if len(w) != class_count:
            raise ValueError(f"class_weights has {len(w)} classes but logits have {class_count}")
        return w


class ParameterStore:
    """Named float64 parameter tensors, each with a same-shaped gradient slot.

    Iteration order is creation order and is preserved by checkpoints, so
    serialization is deterministic. Parameter arrays are mutated in place by
    the optimizer; gradients are overwritten by each backward pass.
    """

    def __init__(self, params: dict[str, np.ndarray]):
        self._params: dict[str, np.ndarray] = {}
        self._grads: dict[str, np.ndarray] = {}
        for name, value in params.items():
            if not name:
                raise ValueError("parameter names must be non-empty")
            arr = np.array(value, dtype=np.float64)
            if not np.isfinite(arr).all():
                raise ValueError(f"parameter {name!r} contains non-finite values")
            self._params[name] = arr
            self._grads[name] = np.zeros_like(arr)

    def __getitem__(self, name: str) -> np.ndarray:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def grad(self, name: str) -> np.ndarray:
        return self._grads[name]

    def set_grad(self, name: str, value: np.ndarray) -> None:
        arr = np.asarray(value, dtype=np.float64)
        if arr.shape != self._params[name].shape:
            raise ValueError(f"gradient shape {arr.shape} != parameter shape {self._params[name].shape} for {name!r}")
        self._grads[name][...] = arr

    def zero_grads(self) -> None:
        for g in self._grads.values():
            g[...] = 0.0

    @property
    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    @property
    def total_parameters(self) -> int:
        return sum(p.size for p in self._params.values())

    def clone(self) -> "ParameterStore":
        return ParameterStore({k: v.copy() for k, v in self._params.items()})

    def state_hash(self) -> str:
        """SHA-256 over names and parameter bytes; cheap mutation detector."""
        h = hashlib.sha256()
        for name, value in self._params.items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(value).tobytes())
        return h.hexdigest()


def init_params(config: EncoderConfig, seed: int, class_count: int = 5) -> ParameterStore:
    """Deterministic parameter initialization.

    Weights are uniform(-b, b) with b = 1/sqrt(fan_in); all biases start at
    zero. The draw order is fixed, so identical (config, seed, class_count)
    give bit-identical stores.
    """
    if class_count < 1:
        raise ValueError(f"class_count must be >= 1, got {class_count}")
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}
    c_in = config.in_channels
    for i, c_out in enumerate(config.stage_channels):
        bound = 1.0 / np.sqrt(c_in * KERNEL * KERNEL)
        params[f"enc{i}.weight"] = rng.uniform(-bound, bound, size=(c_out, c_in, KERNEL, KERNEL))
        params[f"enc{i}.bias"] = np.zeros(c_out)
        c_in = c_out
    f = config.feature_dim
    bound = 1.0 / np.sqrt(f)
    params["pool.weight"] = rng.uniform(-bound, bound, size=f)
    params["pool.bias"] = np.zeros(())
    params["head.weight"] = rng.uniform(-bound, bound, size=(1 + class_count, f))
    params["head.bias"] = np.zeros(1 + class_count)
    return ParameterStore(params)


def pool_from_params(params: ParameterStore) -> AttentionPool:
    return AttentionPool(score_weights=params["pool.weight"], score_bias=float(params["pool.bias"]))


def head_from_params(params: ParameterStore) -> JointHead:
    return JointHead(weight=params["head.weight"], bias=params["head.bias"])


def _conv_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """3x3 stride-2 pad-1 convolution on NCHW input via im2col + matmul."""
    n, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (PAD, PAD), (PAD, PAD)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (KERNEL, KERNEL), axis=(2, 3))[:, :, ::STRIDE, ::STRIDE]
    ho, wo = win.shape[2], win.shape[3]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * KERNEL * KERNEL)
    out = cols @ weight.reshape(len(weight), -1).T + bias
    return out.reshape(n, ho, wo, len(weight)).transpose(0, 3, 1, 2)


def _conv_backward(dout: np.ndarray, x: np.ndarray, weight: np.ndarray):
    """Gradients of :func:`_conv_forward` w.r.t. input, weight and bias."""
    n, c, h, w = x.shape
    c_out = len(weight)
    ho, wo = dout.shape[2], dout.shape[3]
    xp = np.pad(x, ((0, 0), (0, 0), (PAD, PAD), (PAD, PAD)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (KERNEL, KERNEL), axis=(2, 3))[:, :, ::STRIDE, ::STRIDE]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * KERNEL * KERNEL)
    dflat = dout.transpose(0, 2, 3, 1).reshape(-1, c_out)
    dweight = (dflat.T @ cols).reshape(weight.shape)
    dbias = dflat.sum(axis=0)
    dcols = dflat @ weight.reshape(c_out, -1)
    dwin = dcols.reshape(n, ho, wo, c, KERNEL, KERNEL).transpose(0, 3, 1, 2, 4, 5)
    dxp = np.zeros_like(xp)
    for ki in range(KERNEL):
        for kj in range(KERNEL):
            dxp[:, :, ki : ki + STRIDE * ho : STRIDE, kj : kj + STRIDE * wo : STRIDE] += dwin[..., ki, kj]
    return dxp[:, :, PAD : h + PAD, PAD : w + PAD], dweight, dbias


def _check_images(images: np.ndarray, config: EncoderConfig) -> np.ndarray:
    images = np.asarray(images, dtype=np.float64)
    if images.shape[-3] != config.in_channels:
        raise ValueError(f"input has {images.shape[-3]} channels, encoder expects {config.in_channels}")
    if images.shape[-1] != images.shape[-2] or images.shape[-1] < 16:
        raise ValueError(f"images must be square with H = W >= 16, got {images.shape[-2]}x{images.shape[-1]}")
    return images


def _encode(x: np.ndarray, config: EncoderConfig, params: ParameterStore, mode: str, rng, keep_cache: bool):
    """Run the shared encoder on an (N, C, H, W) batch; returns (N, F)."""
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    p_drop = config.internal_dropout_p if mode == "train" else 0.0
    if p_drop > 0 and rng is None:
        raise ValueError("train-mode internal dropout requires an rng")
    caches = []
    for i in range(len(config.stage_channels)):
        pre = _conv_forward(x, params[f"enc{i}.weight"], params[f"enc{i}.bias"])
        relu_mask = pre > 0
        out = pre * relu_mask
        drop_mask = None
        if p_drop > 0:
            drop_mask = rng.random(size=out.shape) >= p_drop
            out = np.where(drop_mask, out / (1.0 - p_drop), 0.0)
        if keep_cache:
            caches.append((x, relu_mask, drop_mask))
        x = out
    feats = x.mean(axis=(2, 3))
    return feats, ((caches, x.shape) if keep_cache else None)


def _encode_backward(dfeats: np.ndarray, cache, config: EncoderConfig, params: ParameterStore):
    """Encoder gradients from d(loss)/d(features); returns {name: grad}."""
    caches, last_shape = cache
    n, f, hh, ww = last_shape
    dx = np.broadcast_to(dfeats[:, :, None, None] / (hh * ww), last_shape).copy()
    grads: dict[str, np.ndarray] = {}
    for i in reversed(range(len(config.stage_channels))):
        x_in, relu_mask, drop_mask = caches[i]
        if drop_mask is not None:
            dx = np.where(drop_mask, dx / (1.0 - config.internal_dropout_p), 0.0)
        dx = dx * relu_mask
        dx, dweight, dbias = _conv_backward(dx, x_in, params[f"enc{i}.weight"])
        grads[f"enc{i}.weight"] = dweight
        grads[f"enc{i}.bias"] = dbias
    return grads


def encoder_forward(
    images: np.ndarray,
    config: EncoderConfig,
    params: ParameterStore,
    mode: str = "eval",
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Per-view features: (V, C, H, W) images -> (V, F) matrix.

    Every view is processed independently by the same weights. Deterministic
    in eval mode; train mode applies internal dropout when configured.
    """
    images = _check_images(images, config)
    if images.ndim != 4:
        raise ValueError(f"expected a (V, C, H, W) stack, got shape {images.shape}")
    feats, _ = _encode(images, config, params, mode, rng, keep_cache=False)
    return feats


def attention_pool(features: np.ndarray, pool: AttentionPool):
    """Softmax-weighted average of per-view feature rows.

    Scores are s_v = score_weights . f_v + score_bias; weights are the
    (max-subtracted, numerically stable) softmax of the scores. Returns
    (pooled F-vector, V weights); the weights are exposed for inspection.
    """
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[0] < 1:
        raise ValueError(f"features must be (V >= 1, F), got shape {features.shape}")
    if features.shape[1] != len(pool.score_weights):
        raise ValueError(f"feature dim {features.shape[1]} != score weight dim {len(pool.score_weights)}")
    scores = features @ pool.score_weights + pool.score_bias
    weights = softmax(scores)
    return weights @ features, weights


def head_forward(pooled: np.ndarray, head: JointHead):
    """Affine head output: (regression scalar, K class logits)."""
    pooled = np.asarray(pooled, dtype=np.float64)
    if pooled.shape != (head.weight.shape[1],):
        raise ValueError(f"pooled shape {pooled.shape} != head input dim ({head.weight.shape[1]},)")
    out = head.weight @ pooled + head.bias
    return float(out[0]), out[1:]


def loss(ga_pred: float, logits: np.ndarray, ga_label: float, class_label: int, cfg: LossConfig) -> float:
    """Single-sample loss: (ga_pred - ga_label)^2 + ce_lambda * w_c * CE.

    Cross-entropy is -log softmax(logits)[class_label], evaluated in the
    log-sum-exp stable form. Batch losses elsewhere are means of this.
    """
    logits = np.asarray(logits, dtype=np.float64)
    k = len(logits)
    class_label = int(class_label)
    if not 0 <= class_label < k:
        raise ValueError(f"class_label {class_label} out of range for {k} classes")
    ce = float(logsumexp(logits) - logits[class_label])
    w = cfg.weight_vector(k)[class_label]
    return float((float(ga_pred) - float(ga_label)) ** 2 + cfg.ce_lambda * w * ce)


@dataclass(frozen=True)
class BatchResult:
    """Network outputs for a batch: predictions, logits, attention weights."""

    ga_pred: np.ndarray  # (B,)
    logits: np.ndarray  # (B, K)
    attention: np.ndarray  # (B, V)


def _full_forward(images, config, params, mode, rng, keep_cache):
    b, v, c, h, w = images.shape
    feats_flat, enc_cache = _encode(images.reshape(b * v, c, h, w), config, params, mode, rng, keep_cache)
    feats = feats_flat.reshape(b, v, -1)
    scores = feats @ params["pool.weight"] + params["pool.bias"]
    attn = softmax(scores, axis=1)
    pooled = np.einsum("bv,bvf->bf", attn, feats)
    out = pooled @ params["head.weight"].T + params["head.bias"]
    result = BatchResult(ga_pred=out[:, 0], logits=out[:, 1:], attention=attn)
    return result, ((enc_cache, feats, attn, pooled) if keep_cache else None)


def forward_batch(
    images: np.ndarray,
    config: EncoderConfig,
    params: ParameterStore,
    mode: str = "eval",
    rng: np.random.Generator | None = None,
) -> BatchResult:
    """Full-network forward pass on a (B, V, C, H, W) batch."""
    images = _check_images(images, config)
    if images.ndim != 5:
        raise ValueError(f"expected a (B, V, C, H, W) batch, got shape {images.shape}")
    result, _ = _full_forward(images, config, params, mode, rng, keep_cache=False)
    return result


def batch_loss(result: BatchResult, ga_labels, class_labels, cfg: LossConfig) -> float:
    """Mean combined loss of a batch from its forward outputs."""
    ga_labels = np.asarray(ga_labels, dtype=np.float64)
    class_labels = np.asarray(class_labels, dtype=np.int64)
    k = result.logits.shape[1]
    if class_labels.min() < 0 or class_labels.max() >= k:
        raise ValueError(f"class labels out of range for {k} classes")
    w = cfg.weight_vector(k)
    lse = logsumexp(result.logits, axis=1)
    ce = lse - result.logits[np.arange(len(class_labels)), class_labels]
    per_sample = (result.ga_pred - ga_labels) ** 2 + cfg.ce_lambda * w[class_labels] * ce
    return float(per_sample.mean())


def evaluate_loss(
    images,
    ga_labels,
    class_labels,
    config: EncoderConfig,
    params: ParameterStore,
    cfg: LossConfig,
    mode: str = "eval",
    rng: np.random.Generator | None = None,
) -> float:
    """Batch loss without touching gradient slots (finite-difference probe)."""
    result = forward_batch(images, config, params, mode=mode, rng=rng)
    return batch_loss(result, ga_labels, class_labels, cfg)


def backward(
    images,
    ga_labels,
    class_labels,
    config: EncoderConfig,
    params: ParameterStore,
    cfg: LossConfig,
    mode: str = "train",
    rng: np.random.Generator | None = None,
):
    """Forward + reverse pass; fills every gradient slot of ``params``.

    Gradients are exact derivatives of the batch-mean loss with respect to
    each parameter. Returns (batch loss, BatchResult).
    """
    images = _check_images(images, config)
    if images.ndim != 5:
        raise ValueError(f"expected a (B, V, C, H, W) batch, got shape {images.shape}")
    ga_labels = np.asarray(ga_labels, dtype=np.float64)
    class_labels = np.asarray(class_labels, dtype=np.int64)
    b = images.shape[0]
    if ga_labels.shape != (b,) or class_labels.shape != (b,):
        raise ValueError("label arrays must match the batch size")

    result, cache = _full_forward(images, config, params, mode, rng, keep_cache=True)
    enc_cache, feats, attn, pooled = cache
    total = batch_loss(result, ga_labels, class_labels, cfg)
    k = result.logits.shape[1]
    w = cfg.weight_vector(k)

    # d(loss)/d(head outputs), batch-mean folded in
    probs = softmax(result.logits, axis=1)
    probs[np.arange(b), class_labels] -= 1.0
    dlogits = probs * (cfg.ce_lambda * w[class_labels] / b)[:, None]
    dga = 2.0 * (result.ga_pred - ga_labels) / b
    dout = np.concatenate([dga[:, None], dlogits], axis=1)  # (B, 1+K)

    head_weight = params["head.weight"]
    dpooled = dout @ head_weight  # (B, F)
    dattn = np.einsum("bf,bvf->bv", dpooled, feats)
    dscores = attn * (dattn - (attn * dattn).sum(axis=1, keepdims=True))
    dfeats = attn[:, :, None] * dpooled[:, None, :] + dscores[:, :, None] * params["pool.weight"]

    grads = _encode_backward(dfeats.reshape(-1, feats.shape[2]), enc_cache, config, params)
    grads["pool.weight"] = np.einsum("bv,bvf->f", dscores, feats)
    grads["pool.bias"] = np.asarray(dscores.sum())
    grads["head.weight"] = dout.T @ pooled
    grads["head.bias"] = dout.sum(axis=0)
    for name in params.names:
        params.set_grad(name, grads[name])
    return total, result


def save_checkpoint(path: str | Path, params: ParameterStore, metadata: dict) -> None:
    """Serialize parameters plus metadata; round-trips bit-exactly.

    Layout: magic ``CKP1``; uint32 little-endian length of a UTF-8 JSON
    metadata block (keys sorted; ``format_version`` added automatically);
    uint32 tensor count; then per tensor, in store order: uint16 name length,
    name bytes, uint8 ndim, ndim uint32 dims, then the values as little-endian
    IEEE-754 float32 in C order.
    """
    meta = dict(metadata)
    meta.setdefault("format_version", CHECKPOINT_VERSION)
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(params.names)))
        for name, value in params.items():
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", value.ndim))
            fh.write(struct.pack(f"<{value.ndim}I", *value.shape))
            fh.write(np.ascontiguousarray(value, dtype="<f4").tobytes())


def load_checkpoint(path: str | Path):
    """Read a checkpoint written by :func:`save_checkpoint`.

    Returns (ParameterStore, metadata dict). Values come back as float64
    copies of the stored float32 tensors, in file order.
    """
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file (bad magic)")
    offset = 4

    def take(count: int) -> bytes:
        nonlocal offset
        if offset + count > len(raw):
            raise ValueError(f"{path}: truncated checkpoint")
        chunk = raw[offset : offset + count]
        offset += count
        return chunk

    (meta_len,) = struct.unpack("<I", take(4))
    metadata = json.loads(take(meta_len).decode("utf-8"))
    (tensor_count,) = struct.unpack("<I", take(4))
    tensors: dict[str, np.ndarray] = {}
    for _ in range(tensor_count):
        (name_len,) = struct.unpack("<H", take(2))
        name = take(name_len).decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        count = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        data = np.frombuffer(take(4 * count), dtype="<f4").reshape(shape)
        if name in tensors:
            raise ValueError(f"{path}: duplicate tensor name {name!r}")
        tensors[name] = data.astype(np.float64)
    if offset != len(raw):
        raise ValueError(f"{path}: {len(raw) - offset} trailing bytes after last tensor")
    return ParameterStore(tensors), metadata
