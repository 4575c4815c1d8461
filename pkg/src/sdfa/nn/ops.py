"""Layer primitives with exact analytic gradients.

Every function takes and returns :class:`~sdfa.nn.tensor.Tensor` objects of
layout ``(N, C, T, V)`` unless stated otherwise, keeps the input dtype, and
records its backward pass on the active tape.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ConfigError, DataError, SequenceTooShortError, ShapeError
from . import _kernels
from .tensor import Param, Tensor, accumulate, active_tape, make_output


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# Elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    """Broadcasting sum."""
    def backward(g):
        if a.requires_grad:
            accumulate(a, _unbroadcast(g, a.shape))
        if b.requires_grad:
            accumulate(b, _unbroadcast(g, b.shape))

    return make_output(a.data + b.data, (a, b), backward)


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)

    def backward(g):
        accumulate(x, g * (x.data > 0))

    return make_output(out, (x,), backward)


def temporal_diff(x: Tensor) -> Tensor:
    """Forward difference along T with a zero last frame (the motion stream)."""
    if x.shape[2] < 2:
        raise SequenceTooShortError(f"motion needs at least 2 frames, got {x.shape[2]}")
    out = np.zeros_like(x.data)
    out[:, :, :-1] = x.data[:, :, 1:] - x.data[:, :, :-1]

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[:, :, 1:] += g[:, :, :-1]
        gx[:, :, :-1] -= g[:, :, :-1]
        accumulate(x, gx)

    return make_output(out, (x,), backward)


# ---------------------------------------------------------------------------
# Channel mixing


def conv1x1(x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    """``out[n, o, t, v] = sum_c W[o, c] x[n, c, t, v] + b[o]``."""
    N, Ci, T, V = x.shape
    Co = W.shape[0]
    if W.shape[1] != Ci:
        raise ShapeError(f"conv1x1 weight {W.shape} does not match {Ci} input channels")
    if b is not None and b.shape != (Co,):
        raise ShapeError(f"conv1x1 bias {b.shape} does not match {Co} output channels")
    xf = x.data.reshape(N, Ci, T * V)
    out = np.matmul(W.data, xf)
    if b is not None:
        out += b.data[:, None]
    parents = (x, W) if b is None else (x, W, b)

    def backward(g):
        gf = g.reshape(N, Co, T * V)
        if x.requires_grad:
            accumulate(x, np.matmul(np.ascontiguousarray(W.data.T), gf).reshape(x.shape))
        if W.requires_grad:
            accumulate(W, np.matmul(gf, xf.transpose(0, 2, 1)).sum(axis=0))
        if b is not None and b.requires_grad:
            accumulate(b, gf.sum(axis=(0, 2)))

    return make_output(out.reshape(N, Co, T, V), parents, backward)


# ---------------------------------------------------------------------------
# Batch normalisation


@dataclass
class BatchNorm:
    """Per-channel affine normalisation state."""

    gamma: Param
    beta: Param
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def create(cls, channels: int, dtype=np.float32, name: str = "bn") -> BatchNorm:
        return cls(
            gamma=Param(np.ones(channels, dtype=dtype), f"{name}.gamma"),
            beta=Param(np.zeros(channels, dtype=dtype), f"{name}.beta"),
            running_mean=np.zeros(channels, dtype=dtype),
            running_var=np.ones(channels, dtype=dtype),
        )

    def params(self) -> list[Param]:
        return [self.gamma, self.beta]


def batchnorm(x: Tensor, bn: BatchNorm, training: bool) -> Tensor:
    """Normalise each channel over ``(N, T, V)``.

    Training mode uses batch statistics and updates the running estimates by
    an exponential moving average; eval mode uses the running estimates.
    """
    C = x.shape[1]
    if bn.gamma.shape != (C,):
        raise ShapeError(f"batchnorm has {bn.gamma.shape[0]} channels, input has {C}")
    shape = (1, C) + (1,) * (x.data.ndim - 2)
    axes = (0,) + tuple(range(2, x.data.ndim))
    gamma = bn.gamma.data.reshape(shape)
    beta = bn.beta.data.reshape(shape)

    if not training:
        scale, shift = _bn_eval_affine(bn, x.dtype)
        out = x.data * scale.reshape(shape)
        out += shift.reshape(shape)

        def backward(g):
            if x.requires_grad:
                accumulate(x, g * scale.reshape(shape))
            if bn.gamma.requires_grad:
                inv = 1.0 / np.sqrt(bn.running_var.astype(np.float64) + bn.eps)
                xhat = (x.data - bn.running_mean.reshape(shape)) * inv.astype(x.dtype).reshape(shape)
                accumulate(bn.gamma, (g * xhat).sum(axis=axes))
            if bn.beta.requires_grad:
                accumulate(bn.beta, g.sum(axis=axes))

        return make_output(out, (x, bn.gamma, bn.beta), backward)

    count = x.data.size // C
    mean = x.data.mean(axis=axes, keepdims=True)
    centered = x.data - mean
    var = np.mean(centered * centered, axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + bn.eps)
    xhat = centered * inv
    out = xhat * gamma + beta

    m = bn.momentum
    unbiased = var.reshape(C) * (count / (count - 1) if count > 1 else 1.0)
    bn.running_mean[...] = (1 - m) * bn.running_mean + m * mean.reshape(C)
    bn.running_var[...] = (1 - m) * bn.running_var + m * unbiased

    def backward(g):
        gsum = g.sum(axis=axes, keepdims=True)
        gxsum = (g * xhat).sum(axis=axes, keepdims=True)
        if x.requires_grad:
            dx = (gamma * inv) * (g - gsum / count - xhat * (gxsum / count))
            accumulate(x, dx)
        if bn.gamma.requires_grad:
            accumulate(bn.gamma, gxsum.reshape(C))
        if bn.beta.requires_grad:
            accumulate(bn.beta, gsum.reshape(C))

    return make_output(out, (x, bn.gamma, bn.beta), backward)


def _bn_eval_affine(bn: BatchNorm, dtype) -> tuple[np.ndarray, np.ndarray]:
    inv = (1.0 / np.sqrt(bn.running_var.astype(np.float64) + bn.eps)).astype(dtype)
    scale = bn.gamma.data * inv
    return scale, bn.beta.data - bn.running_mean * scale


def batchnorm_add_relu(x: Tensor, bn: BatchNorm, r: Tensor, training: bool) -> Tensor:
    """``relu(batchnorm(x) + r)`` with ``r`` broadcast over joints if needed.

    Training mode and gradient-free eval mode run compiled fused loops; the
    eval loop performs the same float operations as the composed ops.
    """
    if not training and active_tape() is not None and (x.requires_grad or r.requires_grad
                                                       or bn.gamma.requires_grad):
        return relu(add(batchnorm(x, bn, training), r))
    if x.shape[1] != bn.gamma.shape[0]:
        raise ShapeError(f"batchnorm has {bn.gamma.shape[0]} channels, input has {x.shape[1]}")
    if r.shape[:3] != x.shape[:3] or r.shape[3] not in (1, x.shape[3]):
        raise ShapeError(f"residual {r.shape} cannot broadcast to {x.shape}")
    if training:
        return _bn_add_relu_train(x, bn, r)
    scale, shift = _bn_eval_affine(bn, x.dtype)
    out = np.empty_like(x.data)
    _kernels.affine_add_relu(np.ascontiguousarray(x.data), scale, shift,
                             np.ascontiguousarray(r.data, dtype=x.dtype), out)
    return Tensor(out)


def _bn_add_relu_train(x: Tensor, bn: BatchNorm, r: Tensor) -> Tensor:
    # Batch-statistics variant of batchnorm_add_relu: one compiled pass for the
    # statistics, one for the output and two for the whole backward.
    N, C, T, V = x.shape
    xd = np.ascontiguousarray(x.data)
    rd = np.ascontiguousarray(r.data, dtype=x.dtype)
    mean, var = np.empty(C), np.empty(C)
    _kernels.channel_mean_var(xd, mean, var)
    inv = 1.0 / np.sqrt(var + bn.eps)
    gamma = bn.gamma.data.astype(np.float64)
    scale = gamma * inv
    shift = bn.beta.data - mean * scale
    out = np.empty_like(xd)
    _kernels.affine_add_relu(xd, scale.astype(x.dtype), shift.astype(x.dtype), rd, out)

    count = N * T * V
    m = bn.momentum
    unbiased = var * (count / (count - 1) if count > 1 else 1.0)
    bn.running_mean[...] = (1 - m) * bn.running_mean + m * mean
    bn.running_var[...] = (1 - m) * bn.running_var + m * unbiased

    def backward(g):
        dx = np.empty_like(xd)
        dr = np.empty_like(rd)
        dgamma, dbeta = np.empty(C), np.empty(C)
        _kernels.bn_add_relu_backward(np.ascontiguousarray(g, dtype=x.dtype), out, xd, mean, inv,
                                      gamma, dx, dgamma, dbeta, dr)
        accumulate(x, dx)
        accumulate(bn.gamma, dgamma.astype(x.dtype))
        accumulate(bn.beta, dbeta.astype(x.dtype))
        accumulate(r, dr)

    return make_output(out, (x, bn.gamma, bn.beta, r), backward)


# ---------------------------------------------------------------------------
# Temporal convolution


def _check_temporal(K: int, stride: int) -> None:
    if K % 2 == 0 or K < 1:
        raise ConfigError(f"temporal kernel must be odd, got {K}")
    if stride not in (1, 2):
        raise ConfigError(f"temporal stride must be 1 or 2, got {stride}")


def temporal_out_len(T: int, stride: int) -> int:
    return -(-T // stride)


def depthwise_temporal_conv(x: Tensor, dw: Tensor, stride: int = 1) -> Tensor:
    """Per-channel ``K x 1`` convolution along T with ``K // 2`` zero padding.

    Output frame ``t`` of channel ``c`` is
    ``sum_k dw[c, k] * x[c, stride * t + k - K // 2]`` (out-of-range frames
    read as zero), so ``T_out = ceil(T / stride)``.
    """
    N, C, T, V = x.shape
    if dw.shape[0] != C:
        raise ShapeError(f"depthwise kernel {dw.shape} does not match {C} channels")
    K = dw.shape[1]
    _check_temporal(K, stride)
    T_out = temporal_out_len(T, stride)
    xd = np.ascontiguousarray(x.data)
    w = np.ascontiguousarray(dw.data, dtype=x.dtype)
    out = np.empty((N, C, T_out, V), dtype=x.dtype)
    _kernels.dw_forward(xd, w, stride, out)

    def backward(g):
        g = np.ascontiguousarray(g)
        if x.requires_grad:
            gx = np.zeros_like(xd)
            _kernels.dw_backward_input(g, w, stride, gx)
            accumulate(x, gx)
        if dw.requires_grad:
            gw = np.empty_like(w)
            _kernels.dw_backward_weight(g, xd, stride, gw)
            accumulate(dw, gw.astype(dw.dtype, copy=False))

    return make_output(out, (x, dw), backward)


def sep_temporal_conv(x: Tensor, dw: Tensor, pw: Tensor, stride: int = 1) -> Tensor:
    """Depthwise temporal filter followed by a pointwise channel mixer."""
    _check_temporal(dw.shape[1], stride)
    return conv1x1(depthwise_temporal_conv(x, dw, stride), pw)


# ---------------------------------------------------------------------------
# Graph aggregation


def modulate(A_hat: np.ndarray, M: Tensor) -> Tensor:
    """Elementwise ``A_hat * M``; ``M`` may be ``(V, V)`` or a ``(1, 1)`` gate."""
    if M.shape != A_hat.shape and M.shape != (1, 1):
        raise ShapeError(f"modulation {M.shape} does not match adjacency {A_hat.shape}")
    A = np.asarray(A_hat, dtype=M.dtype)

    def backward(g):
        accumulate(M, _unbroadcast(g * A, M.shape))

    return make_output(A * M.data, (M,), backward)


def graph_aggregate(x: Tensor, A: Tensor) -> Tensor:
    """``out[..., i] = sum_j A[i, j] x[..., j]`` over the joint axis."""
    V = x.shape[-1]
    if A.shape != (V, V):
        raise ShapeError(f"adjacency {A.shape} does not match {V} joints")
    xf = x.data.reshape(-1, V)
    Ad = A.data.astype(x.dtype, copy=False)
    out = xf @ Ad.T

    def backward(g):
        gf = g.reshape(-1, V)
        if x.requires_grad:
            accumulate(x, (gf @ Ad).reshape(x.shape))
        if A.requires_grad:
            accumulate(A, gf.T @ xf)

    return make_output(out.reshape(x.shape), (x, A), backward)


# ---------------------------------------------------------------------------
# Pooling


def pool(x: Tensor, kind: str, stride: int = 1) -> Tensor:
    """``spatial_max`` (V -> 1), ``temporal_max`` (window = stride) or ``global_avg``.

    Max backward routes the gradient to the first maximal element.
    """
    N, C, T, V = x.shape
    if kind == "spatial_max":
        xd = np.ascontiguousarray(x.data)
        out = np.empty((N, C, T, 1), dtype=x.dtype)
        winner = np.empty((N, C, T), dtype=np.int16)
        _kernels.spatial_max(xd, out, winner)

        def backward(g):
            gx = np.empty_like(xd)
            _kernels.spatial_max_backward(np.ascontiguousarray(g, dtype=x.dtype), winner, gx)
            accumulate(x, gx)

        return make_output(out, (x,), backward)

    if kind == "temporal_max":
        if stride < 1:
            raise ConfigError(f"pool stride must be >= 1, got {stride}")
        if stride == 1:
            return x
        xd = np.ascontiguousarray(x.data)
        out = np.empty((N, C, temporal_out_len(T, stride), V), dtype=x.dtype)
        winner = np.empty(out.shape, dtype=np.int8)
        _kernels.temporal_max(xd, stride, out, winner)

        def backward(g):
            gx = np.empty_like(xd)
            _kernels.temporal_max_backward(np.ascontiguousarray(g, dtype=x.dtype), winner, stride, gx)
            accumulate(x, gx)

        return make_output(out, (x,), backward)

    if kind == "global_avg":
        out = x.data.mean(axis=(2, 3), keepdims=True)

        def backward(g):
            accumulate(x, np.broadcast_to(g / (T * V), x.shape).astype(x.dtype))

        return make_output(out, (x,), backward)

    raise ConfigError(f"unknown pool kind {kind!r}")


def project_spatial_max(x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    """``pool(conv1x1(x, W, b), "spatial_max")`` with a sparse backward.

    The forward is the same dense projection followed by the same max. Only
    the winning joint of each ``(n, c, t)`` receives gradient, so the
    backward costs about ``1 / V`` of differentiating the two ops separately.
    """
    N, Ci, T, V = x.shape
    Co = W.shape[0]
    if W.shape[1] != Ci:
        raise ShapeError(f"projection weight {W.shape} does not match {Ci} input channels")
    if b is not None and b.shape != (Co,):
        raise ShapeError(f"projection bias {b.shape} does not match {Co} output channels")
    y = np.matmul(W.data, x.data.reshape(N, Ci, T * V)).reshape(N, Co, T, V)
    if b is not None:
        y += b.data[:, None, None]
    out = np.empty((N, Co, T, 1), dtype=y.dtype)
    winner = np.empty((N, Co, T), dtype=np.int16)
    _kernels.spatial_max(y, out, winner)
    parents = (x, W) if b is None else (x, W, b)

    def backward(g):
        g = np.ascontiguousarray(g, dtype=out.dtype)
        if x.requires_grad:
            gxt = np.zeros((N, T, V, Ci), dtype=x.dtype)
            _kernels.projected_max_backward_input(g, winner, np.ascontiguousarray(W.data, dtype=x.dtype), gxt)
            accumulate(x, np.ascontiguousarray(gxt.transpose(0, 3, 1, 2)))
        if W.requires_grad:
            gw = np.zeros((Co, Ci))
            _kernels.projected_max_backward_weight(g, winner, np.ascontiguousarray(x.data.transpose(0, 2, 3, 1)), gw)
            accumulate(W, gw.astype(W.dtype))
        if b is not None and b.requires_grad:
            accumulate(b, g.sum(axis=(0, 2, 3)))

    return make_output(out, parents, backward)


# ---------------------------------------------------------------------------
# Classifier head


def linear(x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    """Logits ``(N, K)`` from features shaped ``(N, C)`` or ``(N, C, 1, 1)``."""
    N = x.shape[0]
    xf = x.data.reshape(N, -1)
    if xf.shape[1] != W.shape[1]:
        raise ShapeError(f"linear weight {W.shape} does not match {xf.shape[1]} features")
    out = xf @ W.data.T + b.data

    def backward(g):
        if x.requires_grad:
            accumulate(x, (g @ W.data).reshape(x.shape))
        if W.requires_grad:
            accumulate(W, g.T @ xf)
        if b.requires_grad:
            accumulate(b, g.sum(axis=0))

    return make_output(out, (x, W, b), backward)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits: Tensor, labels) -> tuple[Tensor, np.ndarray]:
    """Mean negative log-likelihood; returns ``(loss, probabilities)``."""
    labels = np.asarray(labels, dtype=np.int64)
    N, K = logits.shape
    if labels.shape != (N,):
        raise DataError(f"expected {N} labels, got shape {labels.shape}")
    if labels.min() < 0 or labels.max() >= K:
        raise DataError(f"labels must lie in [0, {K})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(z).sum(axis=1))
    logp = z[np.arange(N), labels] - log_z
    loss = -logp.mean()
    probs = np.exp(z - log_z[:, None])

    def backward(g):
        d = probs.copy()
        d[np.arange(N), labels] -= 1
        accumulate(logits, d * (g / N))

    return make_output(np.asarray(loss, dtype=logits.dtype), (logits,), backward), probs


def linear_softmax_ce(x: Tensor, W: Tensor, b: Tensor, labels) -> tuple[Tensor, np.ndarray]:
    return softmax_cross_entropy(linear(x, W, b), labels)


# ---------------------------------------------------------------------------
# Regularising masks


def random_st_mask(x: Tensor, p_joint: float, p_frame: float, training: bool,
                   rng: np.random.Generator) -> Tensor:
    """Zero random joints and random (non-contiguous) frames per sample.

    Survivors are scaled by ``1 / ((1 - p_joint) (1 - p_frame))``. Outside
    training the input is returned untouched.
    """
    for p in (p_joint, p_frame):
        if not 0.0 <= p < 1.0:
            raise ConfigError(f"mask probability must lie in [0, 1), got {p}")
    if not training or (p_joint == 0 and p_frame == 0):
        return x
    N, C, T, V = x.shape
    keep_joint = rng.random((N, 1, 1, V)) >= p_joint
    keep_frame = rng.random((N, 1, T, 1)) >= p_frame
    scale = 1.0 / ((1.0 - p_joint) * (1.0 - p_frame))
    mask = (keep_joint & keep_frame).astype(x.dtype) * x.dtype.type(scale)
    return _apply_sample_mask(x, mask[:, 0])


def _apply_sample_mask(x: Tensor, mask: np.ndarray) -> Tensor:
    # mask is (N, T, V) and shared by every channel
    xd = np.ascontiguousarray(x.data)
    out = np.empty_like(xd)
    _kernels.scale_by_sample_mask(xd, mask, out)

    def backward(g):
        gx = np.empty_like(xd)
        _kernels.scale_by_sample_mask(np.ascontiguousarray(g, dtype=xd.dtype), mask, gx)
        accumulate(x, gx)

    return make_output(out, (x,), backward)


def block_temporal_drop(x: Tensor, p: float, block_size: int, training: bool,
                        rng: np.random.Generator) -> Tensor:
    """Drop contiguous blocks of frames (the block-drop ablation baseline).

    Block starts are drawn so the expected dropped fraction is about ``p``;
    survivors are rescaled by the realised keep ratio per sample.
    """
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"drop probability must lie in [0, 1), got {p}")
    if block_size < 1:
        raise ConfigError(f"block size must be >= 1, got {block_size}")
    if not training or p == 0:
        return x
    N, C, T, V = x.shape
    start_rate = p / block_size
    starts = rng.random((N, T)) < start_rate
    keep = np.ones((N, T), dtype=bool)
    for off in range(block_size):
        keep[:, off:] &= ~starts[:, :T - off]
    kept = keep.sum(axis=1, keepdims=True)
    scale = np.where(kept > 0, T / np.maximum(kept, 1), 0.0)
    mask = np.broadcast_to((keep * scale).astype(x.dtype)[:, :, None], (N, T, V))
    return _apply_sample_mask(x, np.ascontiguousarray(mask))
