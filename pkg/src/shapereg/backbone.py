"""Minimal differentiable heatmap predictor and a from-scratch Adam optimizer.

The network is deliberately tiny: the input image is mean-pooled to a 16x16
feature vector, passed through one tanh hidden layer, and expanded to n
sigmoid heatmap grids.  Everything is float64 and the backward pass is exact
reverse-mode differentiation, so finite-difference checks hold tightly.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ShapeMismatch

CHECKPOINT_FORMAT_VERSION = 1


@dataclass(frozen=True)
class BackboneConfig:
    n_landmarks: int
    image_size: int = 64
    pool_size: int = 16
    hidden: int = 128
    heatmap_size: int = 32

    def __post_init__(self):
        if self.image_size % self.pool_size != 0:
            raise ValueError("image_size must be a multiple of pool_size")

    @property
    def feature_dim(self) -> int:
        return self.pool_size * self.pool_size

    @property
    def output_dim(self) -> int:
        return self.n_landmarks * self.heatmap_size * self.heatmap_size


@dataclass
class BackboneParams:
    layer1_weights: np.ndarray  # (feature_dim, hidden)
    layer1_bias: np.ndarray     # (hidden,)
    layer2_weights: np.ndarray  # (hidden, n*H*W)
    layer2_bias: np.ndarray     # (n*H*W,)

    _FIELDS = ("layer1_weights", "layer1_bias", "layer2_weights", "layer2_bias")

    def arrays(self):
        return [getattr(self, name) for name in self._FIELDS]

    def copy(self) -> "BackboneParams":
        return BackboneParams(*[a.copy() for a in self.arrays()])


@dataclass
class AdamState:
    first_moment: BackboneParams
    second_moment: BackboneParams
    step_count: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("Adam betas must lie in (0, 1)")
        if self.step_count < 0:
            raise ValueError("step_count must be non-negative")


def init_params(config: BackboneConfig, rng: np.random.Generator) -> BackboneParams:
    """Weights ~ N(0, 1/fan_in), biases zero."""
    w1 = rng.standard_normal((config.feature_dim, config.hidden))
    w1 /= np.sqrt(config.feature_dim)
    w2 = rng.standard_normal((config.hidden, config.output_dim))
    w2 /= np.sqrt(config.hidden)
    return BackboneParams(
        layer1_weights=w1,
        layer1_bias=np.zeros(config.hidden),
        layer2_weights=w2,
        layer2_bias=np.zeros(config.output_dim),
    )


def zeros_like_params(params: BackboneParams) -> BackboneParams:
    return BackboneParams(*[np.zeros_like(a) for a in params.arrays()])


def init_adam(params: BackboneParams, lr: float = 1e-3, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    return AdamState(first_moment=zeros_like_params(params),
                     second_moment=zeros_like_params(params),
                     step_count=0, lr=lr, beta1=beta1, beta2=beta2, eps=eps)


def _pool(config: BackboneConfig, image: np.ndarray) -> np.ndarray:
    k = config.image_size // config.pool_size
    p = config.pool_size
    return image.reshape(p, k, p, k).mean(axis=(1, 3)).reshape(-1)


def _check_image(config: BackboneConfig, image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.shape != (config.image_size, config.image_size):
        raise ShapeMismatch(
            f"expected {config.image_size}x{config.image_size} image, "
            f"got {image.shape}")
    return image


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def forward(config: BackboneConfig, params: BackboneParams,
            image: np.ndarray) -> np.ndarray:
    """Predict (n, H, W) heatmaps with values strictly in (0, 1)."""
    image = _check_image(config, image)
    feat = _pool(config, image)
    hidden = np.tanh(feat @ params.layer1_weights + params.layer1_bias)
    logits = hidden @ params.layer2_weights + params.layer2_bias
    hm = _sigmoid(logits)
    return hm.reshape(config.n_landmarks, config.heatmap_size, config.heatmap_size)


def forward_batch(config: BackboneConfig, params: BackboneParams,
                  images: np.ndarray) -> np.ndarray:
    """Vectorized forward over a (B, S, S) image stack -> (B, n, H, W)."""
    images = np.asarray(images, dtype=np.float64)
    b = images.shape[0]
    k = config.image_size // config.pool_size
    p = config.pool_size
    feats = images.reshape(b, p, k, p, k).mean(axis=(2, 4)).reshape(b, -1)
    hidden = np.tanh(feats @ params.layer1_weights + params.layer1_bias)
    logits = hidden @ params.layer2_weights + params.layer2_bias
    hm = _sigmoid(logits)
    return hm.reshape(b, config.n_landmarks, config.heatmap_size,
                      config.heatmap_size)


def backward(config: BackboneConfig, params: BackboneParams, image: np.ndarray,
             upstream_grad: np.ndarray) -> BackboneParams:
    """Exact parameter gradients for d(loss)/d(heatmaps) = upstream_grad."""
    grads = backward_batch(config, params, np.asarray(image)[None],
                           np.asarray(upstream_grad)[None])
    return grads


def backward_batch(config: BackboneConfig, params: BackboneParams,
                   images: np.ndarray, upstream_grads: np.ndarray
                   ) -> BackboneParams:
    """Summed parameter gradients over a batch.

    images: (B, S, S); upstream_grads: (B, n, H, W).  The reduction order is
    fixed by the matrix products, so results are deterministic.
    """
    images = np.asarray(images, dtype=np.float64)
    upstream_grads = np.asarray(upstream_grads, dtype=np.float64)
    b = images.shape[0]
    if images.shape[1:] != (config.image_size, config.image_size):
        raise ShapeMismatch(f"expected {config.image_size}x{config.image_size} "
                            f"images, got {images.shape[1:]}")
    expected = (b, config.n_landmarks, config.heatmap_size, config.heatmap_size)
    if upstream_grads.shape != expected:
        raise ShapeMismatch(
            f"upstream gradient shape {upstream_grads.shape}, expected {expected}")

    k = config.image_size // config.pool_size
    p = config.pool_size
    feats = images.reshape(b, p, k, p, k).mean(axis=(2, 4)).reshape(b, -1)
    pre1 = feats @ params.layer1_weights + params.layer1_bias
    hidden = np.tanh(pre1)
    logits = hidden @ params.layer2_weights + params.layer2_bias
    sig = _sigmoid(logits)

    g_hm = upstream_grads.reshape(b, -1)
    d_logits = g_hm * sig * (1.0 - sig)
    d_w2 = hidden.T @ d_logits
    d_b2 = d_logits.sum(axis=0)
    d_hidden = d_logits @ params.layer2_weights.T
    d_pre1 = d_hidden * (1.0 - hidden * hidden)
    d_w1 = feats.T @ d_pre1
    d_b1 = d_pre1.sum(axis=0)
    return BackboneParams(layer1_weights=d_w1, layer1_bias=d_b1,
                          layer2_weights=d_w2, layer2_bias=d_b2)


def adam_step(state: AdamState, params: BackboneParams,
              grads: BackboneParams) -> tuple[BackboneParams, AdamState]:
    """One Adam update with bias correction; returns fresh params and state.

    m <- b1 m + (1-b1) g;  v <- b2 v + (1-b2) g^2;  with bias-corrected
    m_hat, v_hat the update is p - lr * m_hat / (sqrt(v_hat) + eps).
    In-place arithmetic keeps the memory traffic of the big output layer low.
    """
    t = state.step_count + 1
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    new_params = []
    new_m = []
    new_v = []
    for p_arr, g, m, v in zip(params.arrays(), grads.arrays(),
                              state.first_moment.arrays(),
                              state.second_moment.arrays()):
        if g.shape != p_arr.shape:
            raise ShapeMismatch("gradient shape does not match parameters")
        m = m * state.beta1
        m += (1.0 - state.beta1) * g
        v = v * state.beta2
        sq = g * g
        sq *= 1.0 - state.beta2
        v += sq
        np.divide(v, c2, out=sq)
        np.sqrt(sq, out=sq)
        sq += state.eps
        np.divide(m, sq, out=sq)
        sq *= state.lr / c1
        new_params.append(p_arr - sq)
        new_m.append(m)
        new_v.append(v)
    return (BackboneParams(*new_params),
            replace(state, first_moment=BackboneParams(*new_m),
                    second_moment=BackboneParams(*new_v), step_count=t))


def save_checkpoint(path, config: BackboneConfig, params: BackboneParams,
                    adam: AdamState, stage: str, epoch: int, seed: int) -> None:
    """One file: a JSON header line, then the float64 little-endian blob
    (params in declaration order, then Adam first and second moments)."""
    header = {
        "version": CHECKPOINT_FORMAT_VERSION,
        "config": {
            "n_landmarks": config.n_landmarks,
            "image_size": config.image_size,
            "pool_size": config.pool_size,
            "hidden": config.hidden,
            "heatmap_size": config.heatmap_size,
        },
        "stage": stage,
        "epoch": epoch,
        "seed": seed,
        "adam": {
            "step_count": adam.step_count,
            "lr": adam.lr,
            "beta1": adam.beta1,
            "beta2": adam.beta2,
            "eps": adam.eps,
        },
    }
    blob_arrays = (params.arrays() + adam.first_moment.arrays()
                   + adam.second_moment.arrays())
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        for arr in blob_arrays:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[BackboneConfig, BackboneParams, AdamState,
                                   str, int, int]:
    """Inverse of save_checkpoint; returns (config, params, adam, stage,
    epoch, seed)."""
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode())
        if header.get("version") != CHECKPOINT_FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint version "
                             f"{header.get('version')!r}")
        config = BackboneConfig(**header["config"])
        shapes = [
            (config.feature_dim, config.hidden),
            (config.hidden,),
            (config.hidden, config.output_dim),
            (config.output_dim,),
        ]
        groups = []
        for _ in range(3):
            arrays = []
            for shape in shapes:
                count = int(np.prod(shape))
                data = np.frombuffer(fh.read(count * 8), dtype="<f8")
                if data.size != count:
                    raise ValueError("truncated checkpoint blob")
                arrays.append(data.reshape(shape).copy())
            groups.append(BackboneParams(*arrays))
    params, m, v = groups
    meta = header["adam"]
    adam = AdamState(first_moment=m, second_moment=v,
                     step_count=int(meta["step_count"]), lr=float(meta["lr"]),
                     beta1=float(meta["beta1"]), beta2=float(meta["beta2"]),
                     eps=float(meta["eps"]))
    return (config, params, adam, header["stage"], int(header["epoch"]),
            int(header["seed"]))
