"""The rPPG network: differential frame fusion, two attention-shift stages, and
an upsampling decoder head mapping an RGB clip (3, T, H, W) to a waveform (T,).

Architecture widths, clip geometry, and the fusion coefficients live in
:class:`ArchConfig`; :func:`init_weights` builds a deterministic
:class:`ModelWeights` from it, and :func:`forward` runs the pipeline

    fusion_stem -> stas_block(pool 1x2x2) -> stas_block(pool 2x2x2) -> udf_head

Spatial dims must be divisible by 4 (two spatial halvings) and T by 2 (one
temporal halving, undone by the decoder's x2 upsample).
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field, fields

import numpy as np

from pulseforge import layers as L
from pulseforge import tensor as T
from pulseforge.tensor import DiffTensor, ShapeError

__all__ = [
    "ArchConfig",
    "FusionStemWeights",
    "StasWeights",
    "UdfWeights",
    "ModelWeights",
    "StemLayer",
    "init_weights",
    "make_diff_stack",
    "fusion_stem",
    "stas_block",
    "udf_head",
    "forward",
    "param_count",
    "param_count_closed_form",
    "save_checkpoint",
    "load_checkpoint",
]

DIFF_CHANNELS = 12  # 4 adjacent differences x 3 colors


@dataclass
class ArchConfig:
    """Hyperparameters that determine every weight shape in the model."""

    frames: int = 128
    height: int = 72
    width: int = 72
    fps: float = 30.0
    stem_channels: int = 32
    stage1_channels: int = 64
    stage2_channels: int = 128
    dropout_rate: float = 0.2
    alpha_fuse: float = 0.5
    beta_fuse: float = 0.5
    use_attention: bool = True

    def validate(self) -> None:
        if self.frames < 8:
            raise ValueError(f"frames must be >= 8, got {self.frames}")
        if self.frames % 2:
            raise ValueError(f"frames must be even (temporal pooling), got {self.frames}")
        if self.height % 4 or self.width % 4:
            raise ValueError(
                f"height/width must be divisible by 4, got {self.height}x{self.width}"
            )
        if min(self.stem_channels, self.stage1_channels, self.stage2_channels) < 1:
            raise ValueError("channel widths must be positive")
        if not 0 <= self.dropout_rate < 1:
            raise ValueError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.alpha_fuse + self.beta_fuse <= 0:
            raise ValueError("alpha_fuse + beta_fuse must be positive")

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "ArchConfig":
        known = {f.name: f.type for f in fields(cls)}
        unknown = set(d) - set(known)
        if unknown:
            raise ValueError(f"unknown arch config keys: {sorted(unknown)}")
        kwargs = {}
        for k, v in d.items():
            if k in ("fps", "dropout_rate", "alpha_fuse", "beta_fuse"):
                kwargs[k] = float(v)
            elif k == "use_attention":
                kwargs[k] = v in (True, "true", "True", "1", 1)
            else:
                kwargs[k] = int(v)
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg


@dataclass
class StemLayer:
    conv: L.Conv3dParams
    bn: L.BatchNormParams


@dataclass
class FusionStemWeights:
    stem11: StemLayer
    stem12: StemLayer
    stem21: StemLayer
    stem22: StemLayer
    alpha_fuse: float
    beta_fuse: float


@dataclass
class StasWeights:
    conv: L.Conv3dParams
    bn: L.BatchNormParams
    attention: L.AttentionParams | None
    post_shift_conv: L.Conv3dParams | None
    pool_window: tuple[int, int, int]
    dropout_rate: float


@dataclass
class UdfWeights:
    upsample_factor: int
    temporal_conv: L.Conv3dParams
    mlp_weight: DiffTensor
    mlp_bias: DiffTensor


@dataclass
class ModelWeights:
    arch: ArchConfig
    fusion: FusionStemWeights
    stas1: StasWeights
    stas2: StasWeights
    udf: UdfWeights

    def named_parameters(self) -> list[tuple[str, DiffTensor]]:
        out: list[tuple[str, DiffTensor]] = []
        for name, stem in (
            ("fusion.stem11", self.fusion.stem11),
            ("fusion.stem12", self.fusion.stem12),
            ("fusion.stem21", self.fusion.stem21),
            ("fusion.stem22", self.fusion.stem22),
        ):
            out += [
                (f"{name}.conv.weight", stem.conv.weight),
                (f"{name}.conv.bias", stem.conv.bias),
                (f"{name}.bn.gamma", stem.bn.gamma),
                (f"{name}.bn.beta", stem.bn.beta),
            ]
        for name, stas in (("stas1", self.stas1), ("stas2", self.stas2)):
            out += [
                (f"{name}.conv.weight", stas.conv.weight),
                (f"{name}.conv.bias", stas.conv.bias),
                (f"{name}.bn.gamma", stas.bn.gamma),
                (f"{name}.bn.beta", stas.bn.beta),
            ]
            if stas.attention is not None:
                out += [
                    (f"{name}.attn.w_a", stas.attention.w_a),
                    (f"{name}.attn.b_a", stas.attention.b_a),
                    (f"{name}.post_conv.weight", stas.post_shift_conv.weight),
                    (f"{name}.post_conv.bias", stas.post_shift_conv.bias),
                ]
        out += [
            ("udf.temporal_conv.weight", self.udf.temporal_conv.weight),
            ("udf.temporal_conv.bias", self.udf.temporal_conv.bias),
            ("udf.mlp.weight", self.udf.mlp_weight),
            ("udf.mlp.bias", self.udf.mlp_bias),
        ]
        return out

    def named_buffers(self) -> list[tuple[str, np.ndarray]]:
        out: list[tuple[str, np.ndarray]] = []
        for name, stem in (
            ("fusion.stem11", self.fusion.stem11),
            ("fusion.stem12", self.fusion.stem12),
            ("fusion.stem21", self.fusion.stem21),
            ("fusion.stem22", self.fusion.stem22),
        ):
            out += [
                (f"{name}.bn.running_mean", stem.bn.running_mean),
                (f"{name}.bn.running_var", stem.bn.running_var),
            ]
        for name, stas in (("stas1", self.stas1), ("stas2", self.stas2)):
            out += [
                (f"{name}.bn.running_mean", stas.bn.running_mean),
                (f"{name}.bn.running_var", stas.bn.running_var),
            ]
        return out

    def zero_grads(self) -> None:
        for _, p in self.named_parameters():
            p.zero_grad()


def _he_conv(rng, shape, dtype):
    fan_in = int(np.prod(shape[1:]))
    return T.tensor(
        (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype), requires_grad=True
    )


def _xavier(rng, shape, fan_in, dtype):
    return T.tensor(
        (rng.standard_normal(shape) * np.sqrt(1.0 / fan_in)).astype(dtype), requires_grad=True
    )


def _zeros(shape, dtype):
    return T.tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


def _stem(rng, c_in, c_out, kernel, padding, dtype) -> StemLayer:
    conv = L.Conv3dParams(
        weight=_he_conv(rng, (c_out, c_in) + kernel, dtype),
        bias=_zeros(c_out, dtype),
        padding=padding,
    )
    return StemLayer(conv=conv, bn=L.BatchNormParams.create(c_out, dtype=dtype))


def _stas(rng, c_in, c_out, pool_window, dropout_rate, use_attention, dtype) -> StasWeights:
    conv = L.Conv3dParams(
        weight=_he_conv(rng, (c_out, c_in, 3, 3, 3), dtype),
        bias=_zeros(c_out, dtype),
        padding=(1, 1, 1),
    )
    attention = post = None
    if use_attention:
        attention = L.AttentionParams(
            w_a=_xavier(rng, (1, c_out, 1, 1, 1), c_out, dtype), b_a=_zeros(1, dtype)
        )
        post = L.Conv3dParams(
            weight=_he_conv(rng, (c_out, c_out, 1, 3, 3), dtype),
            bias=_zeros(c_out, dtype),
            padding=(0, 1, 1),
        )
    return StasWeights(
        conv=conv,
        bn=L.BatchNormParams.create(c_out, dtype=dtype),
        attention=attention,
        post_shift_conv=post,
        pool_window=pool_window,
        dropout_rate=dropout_rate,
    )


def init_weights(arch: ArchConfig, seed: int = 0, dtype=np.float32) -> ModelWeights:
    """Deterministic weight initialization (He for ReLU convs, Xavier heads)."""
    arch.validate()
    rng = np.random.default_rng(seed)
    cs, c1, c2 = arch.stem_channels, arch.stage1_channels, arch.stage2_channels
    fusion = FusionStemWeights(
        stem11=_stem(rng, 3, cs, (1, 5, 5), (0, 2, 2), dtype),
        stem12=_stem(rng, DIFF_CHANNELS, cs, (1, 5, 5), (0, 2, 2), dtype),
        stem21=_stem(rng, cs, cs, (3, 3, 3), (1, 1, 1), dtype),
        stem22=_stem(rng, cs, cs, (3, 3, 3), (1, 1, 1), dtype),
        alpha_fuse=arch.alpha_fuse,
        beta_fuse=arch.beta_fuse,
    )
    stas1 = _stas(rng, cs, c1, (1, 2, 2), arch.dropout_rate, arch.use_attention, dtype)
    stas2 = _stas(rng, c1, c2, (2, 2, 2), arch.dropout_rate, arch.use_attention, dtype)
    udf = UdfWeights(
        upsample_factor=2,
        temporal_conv=L.Conv3dParams(
            weight=_he_conv(rng, (c2, c2, 3, 1, 1), dtype),
            bias=_zeros(c2, dtype),
            padding=(1, 0, 0),
        ),
        mlp_weight=_xavier(rng, (c2, 1), c2, dtype),
        mlp_bias=_zeros(1, dtype),
    )
    return ModelWeights(arch=arch, fusion=fusion, stas1=stas1, stas2=stas2, udf=udf)


# -- forward pipeline ----------------------------------------------------------


def _promote(x) -> tuple[np.ndarray, bool]:
    data = x.data if isinstance(x, DiffTensor) else np.asarray(x)
    if data.ndim == 4:
        return data[None], False
    if data.ndim == 5:
        return data, True
    raise ShapeError(f"expected clip of shape (3,T,H,W) or (N,3,T,H,W), got {data.shape}")


def make_diff_stack(clip) -> DiffTensor:
    """Stack of the four adjacent frame differences, 12 channels.

    Out-of-range frame indices clamp to the clip boundary (replicate
    padding), so boundary differences are zero.  The output is a gradient
    leaf: the clip is input data, not a learnable quantity.
    """
    data, batched = _promote(clip)
    t = data.shape[2]
    if t < 3:
        raise ShapeError(f"make_diff_stack needs T >= 3, got T={t}")
    idx = np.arange(t)

    def shifted(k):
        return data[:, :, np.clip(idx + k, 0, t - 1)]

    s_m2, s_m1, s_0, s_p1, s_p2 = (shifted(k) for k in (-2, -1, 0, 1, 2))
    stack = np.concatenate([s_m1 - s_m2, s_0 - s_m1, s_p1 - s_0, s_p2 - s_p1], axis=1)
    if not batched:
        stack = stack[0]
    return T.tensor(np.ascontiguousarray(stack))


def _run_stem(x: DiffTensor, stem: StemLayer, mode: str) -> DiffTensor:
    return T.relu(L.batchnorm3d(L.conv3d(x, stem.conv), stem.bn, mode=mode))


def fusion_stem(clip: DiffTensor, diff: DiffTensor, w: FusionStemWeights, mode: str = "train") -> DiffTensor:
    """Differential frame fusion of the raw branch and the difference branch.

    out = alpha * stem21(I_raw) + beta * stem22(alpha * I_raw + beta * I_diff)
    with I_raw = stem11(clip) and I_diff = stem12(diff).
    """
    i_raw = _run_stem(clip, w.stem11, mode)
    i_diff = _run_stem(diff, w.stem12, mode)
    a, b = w.alpha_fuse, w.beta_fuse
    inner = T.add(T.scale(i_raw, a), T.scale(i_diff, b))
    return T.add(
        T.scale(_run_stem(i_raw, w.stem21, mode), a),
        T.scale(_run_stem(inner, w.stem22, mode), b),
    )


def stas_block(
    x: DiffTensor, w: StasWeights, mode: str = "train", rng: np.random.Generator | None = None
) -> DiffTensor:
    """One attention-shift stage: ts -> conv -> bn -> relu -> attention -> pool -> dropout."""
    z = T.relu(L.batchnorm3d(L.conv3d(L.temporal_shift(x), w.conv), w.bn, mode=mode))
    if w.attention is not None:
        z = L.attention_mask(z, w.attention, w.post_shift_conv)
    z = L.maxpool3d(z, w.pool_window)
    return L.dropout(z, w.dropout_rate, mode=mode, rng=rng)


def udf_head(x: DiffTensor, w: UdfWeights) -> DiffTensor:
    """Decode features (N, C, T/2, h, w) into waveforms (N, T)."""
    z = L.conv3d(L.upsample_temporal(x, w.upsample_factor), w.temporal_conv)
    z = T.reduce_mean(z, axes=(3, 4))  # global spatial mean per frame: (N, C, T)
    n, c, t = z.shape
    flat = T.reshape(T.transpose(z, (0, 2, 1)), (n * t, c))
    wave = T.add(T.matmul(flat, w.mlp_weight), w.mlp_bias)
    return T.reshape(wave, (n, t))


def forward(
    clip,
    w: ModelWeights,
    mode: str = "eval",
    rng: np.random.Generator | None = None,
) -> DiffTensor:
    """End-to-end forward pass. Returns (N, T) waveforms, or (T,) for a 4-D clip.

    Eval mode disables dropout and normalizes with running statistics; train
    mode needs ``rng`` when the dropout rate is nonzero.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"forward: unknown mode {mode!r}")
    data, batched = _promote(clip)
    arch = w.arch
    expect = (3, arch.frames, arch.height, arch.width)
    if data.shape[1:] != expect:
        raise ShapeError(f"clip shape {data.shape[1:]} does not match arch {expect}")
    x = T.tensor(data)
    diff = make_diff_stack(x)
    z = fusion_stem(x, diff, w.fusion, mode=mode)
    z = stas_block(z, w.stas1, mode=mode, rng=rng)
    z = stas_block(z, w.stas2, mode=mode, rng=rng)
    wave = udf_head(z, w.udf)
    if not batched:
        wave = T.reshape(wave, (wave.shape[1],))
    return wave


# -- parameter accounting --------------------------------------------------------


def param_count(w: ModelWeights) -> int:
    """Runtime tally: exact number of learnable scalars."""
    return int(sum(p.size for _, p in w.named_parameters()))


def param_count_closed_form(arch: ArchConfig) -> int:
    """The same count from the architecture alone (independent derivation)."""
    cs, c1, c2 = arch.stem_channels, arch.stage1_channels, arch.stage2_channels

    def conv_p(c_out, c_in, k):
        return c_out * c_in * k[0] * k[1] * k[2] + c_out

    def bn_p(c):
        return 2 * c

    total = 0
    total += conv_p(cs, 3, (1, 5, 5)) + bn_p(cs)  # stem11
    total += conv_p(cs, DIFF_CHANNELS, (1, 5, 5)) + bn_p(cs)  # stem12
    total += 2 * (conv_p(cs, cs, (3, 3, 3)) + bn_p(cs))  # stem21, stem22
    for c_in, c_out in ((cs, c1), (c1, c2)):
        total += conv_p(c_out, c_in, (3, 3, 3)) + bn_p(c_out)
        if arch.use_attention:
            total += c_out + 1  # w_a, b_a
            total += conv_p(c_out, c_out, (1, 3, 3))  # post-shift conv
    total += conv_p(c2, c2, (3, 1, 1))  # temporal conv
    total += c2 + 1  # per-frame linear decoder
    return total


# -- checkpoints -----------------------------------------------------------------

_CKPT_MAGIC = b"PFCK"


def save_checkpoint(path, w: ModelWeights, seed: int = 0, epoch: int = 0, extra: dict | None = None) -> None:
    """Checkpoint = key/value manifest + concatenated named tensors (PFT1)."""
    manifest = dict(w.arch.to_dict())
    manifest["seed"] = seed
    manifest["epoch"] = epoch
    if extra:
        manifest.update(extra)
    text = "".join(f"{k}={v}\n" for k, v in manifest.items()).encode("utf-8")
    entries = [(n, p.data) for n, p in w.named_parameters()]
    entries += [(n, b) for n, b in w.named_buffers()]
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<I", len(text)))
        fh.write(text)
        fh.write(struct.pack("<I", len(entries)))
        for name, arr in entries:
            nb = name.encode("utf-8")
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            T.write_tensor(fh, arr)


def load_checkpoint(path, dtype=np.float32) -> tuple[ModelWeights, dict]:
    """Rebuild ModelWeights from a checkpoint, validating every tensor shape."""
    with open(path, "rb") as fh:
        if fh.read(4) != _CKPT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        (mlen,) = struct.unpack("<I", fh.read(4))
        manifest: dict[str, str] = {}
        for line in fh.read(mlen).decode("utf-8").splitlines():
            if line.strip():
                k, _, v = line.partition("=")
                manifest[k.strip()] = v.strip()
        (n_entries,) = struct.unpack("<I", fh.read(4))
        tensors: dict[str, np.ndarray] = {}
        for _ in range(n_entries):
            (nlen,) = struct.unpack("<H", fh.read(2))
            name = fh.read(nlen).decode("utf-8")
            tensors[name] = T.read_tensor(fh)

    arch_keys = {f.name for f in fields(ArchConfig)}
    arch = ArchConfig.from_dict({k: v for k, v in manifest.items() if k in arch_keys})
    w = init_weights(arch, seed=0, dtype=dtype)
    for name, p in w.named_parameters():
        if name not in tensors:
            raise ValueError(f"checkpoint missing tensor {name!r}")
        arr = tensors[name]
        if arr.shape != p.shape:
            raise ValueError(
                f"checkpoint tensor {name!r} has shape {arr.shape}, arch expects {p.shape}"
            )
        p.data = np.ascontiguousarray(arr.astype(dtype, copy=False))
    buffers = dict(w.named_buffers())
    for name, buf in buffers.items():
        if name not in tensors:
            raise ValueError(f"checkpoint missing buffer {name!r}")
        arr = tensors[name]
        if arr.shape != buf.shape:
            raise ValueError(
                f"checkpoint buffer {name!r} has shape {arr.shape}, arch expects {buf.shape}"
            )
        buf[...] = arr.astype(buf.dtype, copy=False)
    return w, manifest
