"""Neural building blocks for the rPPG network.

All layers operate on 5-D feature maps shaped (N, C, T, H, W) and register
their backward rules into the tensor core's gradient graph.  Convolution is
implemented as a sum of per-kernel-offset GEMMs (shift-and-add), which keeps
peak memory at one padded copy of the input while routing all arithmetic
through BLAS.

Conventions fixed here:

* temporal shift splits channels floor(C/3) / floor(C/3) / remainder, with
  the vacated boundary frame zero-filled;
* the attention mask's L1 normalization runs per frame over the spatial
  plane;
* pooling is pad-free and requires window-divisible dims;
* batch norm uses eps 1e-5 and momentum 0.1.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from pulseforge import tensor as T
from pulseforge.tensor import DiffTensor, ShapeError

__all__ = [
    "Conv3dParams",
    "BatchNormParams",
    "AttentionParams",
    "conv3d",
    "batchnorm3d",
    "temporal_shift",
    "attention_mask",
    "spatial_attention_mask",
    "maxpool3d",
    "dropout",
    "upsample_temporal",
]


def _as_param(x, name: str) -> DiffTensor:
    if isinstance(x, DiffTensor):
        return x
    return T.tensor(np.asarray(x), requires_grad=False)


@dataclass
class Conv3dParams:
    """Weights of one 3-D convolution: weight (out, in, kt, kh, kw), bias (out,)."""

    weight: DiffTensor
    bias: DiffTensor
    stride: tuple[int, int, int] = (1, 1, 1)
    padding: tuple[int, int, int] = (0, 0, 0)

    def __post_init__(self):
        self.weight = _as_param(self.weight, "weight")
        self.bias = _as_param(self.bias, "bias")
        if self.weight.ndim != 5:
            raise ShapeError(f"conv weight must be 5-D, got {self.weight.shape}")
        if self.bias.shape != (self.weight.shape[0],):
            raise ShapeError(
                f"conv bias shape {self.bias.shape} does not match out channels "
                f"{self.weight.shape[0]}"
            )
        kernel = self.weight.shape[2:]
        if any(p >= k for p, k in zip(self.padding, kernel)):
            raise ShapeError(f"padding {self.padding} must be < kernel {kernel}")

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def kernel(self) -> tuple[int, int, int]:
        return tuple(self.weight.shape[2:])


@dataclass
class BatchNormParams:
    """Per-channel affine batch norm state (learnable gamma/beta, running stats)."""

    gamma: DiffTensor
    beta: DiffTensor
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.1

    @classmethod
    def create(cls, channels: int, dtype=np.float32) -> "BatchNormParams":
        return cls(
            gamma=T.tensor(np.ones(channels, dtype=dtype), requires_grad=True),
            beta=T.tensor(np.zeros(channels, dtype=dtype), requires_grad=True),
            running_mean=np.zeros(channels, dtype=dtype),
            running_var=np.ones(channels, dtype=dtype),
        )

    def __post_init__(self):
        self.gamma = _as_param(self.gamma, "gamma")
        self.beta = _as_param(self.beta, "beta")
        if self.gamma.shape != self.beta.shape or self.gamma.ndim != 1:
            raise ShapeError("gamma/beta must be matching 1-D per-channel vectors")


@dataclass
class AttentionParams:
    """Self-attention mask parameters: a single-output-channel 1x1x1 conv."""

    w_a: DiffTensor
    b_a: DiffTensor

    def __post_init__(self):
        self.w_a = _as_param(self.w_a, "w_a")
        self.b_a = _as_param(self.b_a, "b_a")
        if self.w_a.ndim != 5 or self.w_a.shape[0] != 1 or self.w_a.shape[2:] != (1, 1, 1):
            raise ShapeError(f"w_a must have shape (1, C, 1, 1, 1), got {self.w_a.shape}")
        if self.b_a.shape != (1,):
            raise ShapeError(f"b_a must have shape (1,), got {self.b_a.shape}")


def _check_5d(x: DiffTensor, op: str) -> None:
    if x.ndim != 5:
        raise ShapeError(f"{op} expects (N, C, T, H, W) input, got shape {x.shape}")


def conv3d(x: DiffTensor, p: Conv3dParams) -> DiffTensor:
    """Zero-padded strided 3-D convolution (cross-correlation) over (T, H, W).

    Forward and both backward passes are sums over kernel offsets of
    (C_out x C_in) x (C_in x N*P) matrix products.
    """
    _check_5d(x, "conv3d")
    n, c_in, t, h, w = x.shape
    if c_in != p.in_channels:
        raise ShapeError(f"conv3d: input has {c_in} channels, params expect {p.in_channels}")
    kt, kh, kw = p.kernel
    st, sh, sw = p.stride
    pt, ph, pw = p.padding
    to = (t + 2 * pt - kt) // st + 1
    ho = (h + 2 * ph - kh) // sh + 1
    wo = (w + 2 * pw - kw) // sw + 1
    if to < 1 or ho < 1 or wo < 1:
        raise ShapeError(
            f"conv3d: kernel {p.kernel} larger than padded input {(t + 2 * pt, h + 2 * ph, w + 2 * pw)}"
        )
    c_out = p.out_channels
    wdat = p.weight.data
    dtype = x.data.dtype
    if wdat.dtype != dtype:
        raise TypeError(f"conv3d: input dtype {dtype} vs weight dtype {wdat.dtype}")

    pad = ((0, 0), (0, 0), (pt, pt), (ph, ph), (pw, pw))
    xp = np.pad(x.data, pad) if any(p.padding) else x.data
    npos = n * to * ho * wo
    out2 = np.zeros((c_out, npos), dtype=dtype)
    # (N,C,...) -> (C, N*positions) slabs, one GEMM per kernel offset
    for a in range(kt):
        for b in range(kh):
            for c in range(kw):
                xs = xp[:, :, a : a + st * to : st, b : b + sh * ho : sh, c : c + sw * wo : sw]
                slab = np.ascontiguousarray(xs.transpose(1, 0, 2, 3, 4)).reshape(c_in, npos)
                out2 += wdat[:, :, a, b, c] @ slab
    out2 += p.bias.data[:, None]
    out = out2.reshape(c_out, n, to, ho, wo).transpose(1, 0, 2, 3, 4)
    out = np.ascontiguousarray(out)

    def bw(g):
        g2 = np.ascontiguousarray(g.transpose(1, 0, 2, 3, 4)).reshape(c_out, npos)
        if x.requires_grad:
            gxp = np.zeros_like(xp) if any(p.padding) else np.zeros_like(x.data)
            for a in range(kt):
                for b in range(kh):
                    for c in range(kw):
                        contrib = (wdat[:, :, a, b, c].T @ g2).reshape(c_in, n, to, ho, wo)
                        gxp[:, :, a : a + st * to : st, b : b + sh * ho : sh, c : c + sw * wo : sw] += (
                            contrib.transpose(1, 0, 2, 3, 4)
                        )
            gx = gxp[:, :, pt : pt + t, ph : ph + h, pw : pw + w] if any(p.padding) else gxp
            T.accumulate_grad(x, np.ascontiguousarray(gx))
        if p.weight.requires_grad:
            gw = np.empty_like(wdat)
            for a in range(kt):
                for b in range(kh):
                    for c in range(kw):
                        xs = xp[:, :, a : a + st * to : st, b : b + sh * ho : sh, c : c + sw * wo : sw]
                        slab = np.ascontiguousarray(xs.transpose(1, 0, 2, 3, 4)).reshape(c_in, npos)
                        gw[:, :, a, b, c] = g2 @ slab.T
            T.accumulate_grad(p.weight, gw)
        if p.bias.requires_grad:
            T.accumulate_grad(p.bias, g2.sum(axis=1))

    return T.make_op(out, (x, p.weight, p.bias), bw, "conv3d")


def batchnorm3d(x: DiffTensor, p: BatchNormParams, mode: str = "train") -> DiffTensor:
    """Per-channel batch normalization over (N, T, H, W).

    Training mode normalizes with batch statistics and updates the running
    stats in place (momentum 0.1, unbiased variance for the running update);
    eval mode normalizes with the stored running stats.
    """
    _check_5d(x, "batchnorm3d")
    c = x.shape[1]
    if p.gamma.shape != (c,):
        raise ShapeError(f"batchnorm3d: {c} channels but gamma has shape {p.gamma.shape}")
    if mode not in ("train", "eval"):
        raise ValueError(f"batchnorm3d: unknown mode {mode!r}")
    axes = (0, 2, 3, 4)
    gamma = T.reshape(p.gamma, (1, c, 1, 1, 1))
    beta = T.reshape(p.beta, (1, c, 1, 1, 1))
    if mode == "train":
        mean = T.reduce_mean(x, axes=axes, keepdims=True)
        centered = T.sub(x, mean)
        var = T.reduce_mean(T.mul(centered, centered), axes=axes, keepdims=True)
        inv_std = T.div(1.0, T.sqrt(T.add(var, p.eps)))
        xhat = T.mul(centered, inv_std)
        count = x.size // c
        unbias = count / max(count - 1, 1)
        m = p.momentum
        p.running_mean += m * (mean.data.reshape(c).astype(p.running_mean.dtype) - p.running_mean)
        p.running_var += m * (
            unbias * var.data.reshape(c).astype(p.running_var.dtype) - p.running_var
        )
    else:
        rm = p.running_mean.astype(x.data.dtype).reshape(1, c, 1, 1, 1)
        rv = p.running_var.astype(x.data.dtype).reshape(1, c, 1, 1, 1)
        xhat = T.mul(T.sub(x, T.tensor(rm)), T.tensor(1.0 / np.sqrt(rv + p.eps)))
    return T.add(T.mul(xhat, gamma), beta)


def temporal_shift(x: DiffTensor) -> DiffTensor:
    """Shift channel block 1 forward and block 2 backward by one frame.

    The channel axis splits into floor(C/3), floor(C/3), and the remainder;
    the third block passes through unshifted.  Vacated frames are zero.
    """
    _check_5d(x, "temporal_shift")
    n, c, t, h, w = x.shape
    if t < 2:
        raise ShapeError(f"temporal_shift needs T >= 2, got T={t}")
    k = c // 3
    out = np.zeros_like(x.data)
    out[:, :k, 1:] = x.data[:, :k, :-1]  # forward: out[t] = in[t-1]
    out[:, k : 2 * k, :-1] = x.data[:, k : 2 * k, 1:]  # backward: out[t] = in[t+1]
    out[:, 2 * k :] = x.data[:, 2 * k :]

    def bw(g):
        gx = np.zeros_like(x.data)
        gx[:, :k, :-1] = g[:, :k, 1:]
        gx[:, k : 2 * k, 1:] = g[:, k : 2 * k, :-1]
        gx[:, 2 * k :] = g[:, 2 * k :]
        T.accumulate_grad(x, gx)

    return T.make_op(out, (x,), bw, "temporal_shift")


def spatial_attention_mask(x: DiffTensor, a: AttentionParams) -> DiffTensor:
    """The soft mask factor: H*W * sigmoid(w_a x + b_a) / (2 * per-frame L1 norm).

    Shape (N, 1, T, H, W); by construction each frame's spatial plane sums to
    exactly H*W/2.
    """
    _check_5d(x, "attention_mask")
    h, w = x.shape[3], x.shape[4]
    proj = conv3d(x, Conv3dParams(weight=a.w_a, bias=a.b_a))
    sig = T.sigmoid(proj)
    # sigmoid is strictly positive, so the per-frame L1 norm is its plain sum
    norm = T.reduce_sum(sig, axes=(3, 4), keepdims=True)
    return T.div(T.scale(sig, float(h * w)), T.scale(norm, 2.0))


def attention_mask(x: DiffTensor, a: AttentionParams, c: Conv3dParams) -> DiffTensor:
    """Soft-attention block: (w_c . ts(x) + b_c) scaled by the spatial mask."""
    if x.shape[1] != a.w_a.shape[1]:
        raise ShapeError(
            f"attention_mask: input channels {x.shape[1]} vs w_a channels {a.w_a.shape[1]}"
        )
    branch = conv3d(temporal_shift(x), c)
    mask = spatial_attention_mask(x, a)
    return T.mul(branch, mask)


def maxpool3d(x: DiffTensor, window: tuple[int, int, int]) -> DiffTensor:
    """Pad-free max pooling; gradient routes to the first max per window."""
    _check_5d(x, "maxpool3d")
    n, c, t, h, w = x.shape
    wt, wh, ww = window
    if t % wt or h % wh or w % ww:
        raise ShapeError(f"maxpool3d: dims {(t, h, w)} not divisible by window {window}")
    to, ho, wo = t // wt, h // wh, w // ww
    blocks = x.data.reshape(n, c, to, wt, ho, wh, wo, ww)
    # windows flattened t-major so argmax ties break on the first index
    windows = np.ascontiguousarray(blocks.transpose(0, 1, 2, 4, 6, 3, 5, 7)).reshape(
        n, c, to, ho, wo, wt * wh * ww
    )
    am = np.argmax(windows, axis=-1)
    out = np.take_along_axis(windows, am[..., None], axis=-1)[..., 0]

    def bw(g):
        gz = np.zeros_like(windows)
        np.put_along_axis(gz, am[..., None], g[..., None], axis=-1)
        gx = (
            gz.reshape(n, c, to, ho, wo, wt, wh, ww)
            .transpose(0, 1, 2, 5, 3, 6, 4, 7)
            .reshape(x.shape)
        )
        T.accumulate_grad(x, np.ascontiguousarray(gx))

    return T.make_op(np.ascontiguousarray(out), (x,), bw, "maxpool3d")


def dropout(x: DiffTensor, rate: float, mode: str = "train", rng: np.random.Generator | None = None) -> DiffTensor:
    """Inverted dropout: zero with probability ``rate``, scale survivors."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if mode not in ("train", "eval"):
        raise ValueError(f"dropout: unknown mode {mode!r}")
    if mode == "eval" or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in train mode needs an rng")
    keep = (rng.random(x.shape) >= rate).astype(x.data.dtype)
    scale_factor = 1.0 / (1.0 - rate)
    mask = keep * scale_factor
    out = x.data * mask

    def bw(g):
        T.accumulate_grad(x, g * mask)

    return T.make_op(out, (x,), bw, "dropout")


def upsample_temporal(x: DiffTensor, factor: int) -> DiffTensor:
    """Nearest-neighbor repetition along T; backward sums over repeats."""
    _check_5d(x, "upsample_temporal")
    if factor < 1:
        raise ValueError(f"upsample factor must be >= 1, got {factor}")
    if factor == 1:
        return x
    n, c, t, h, w = x.shape
    out = np.repeat(x.data, factor, axis=2)

    def bw(g):
        T.accumulate_grad(x, g.reshape(n, c, t, factor, h, w).sum(axis=3))

    return T.make_op(np.ascontiguousarray(out), (x,), bw, "upsample_temporal")
