"""Feature extraction on cylinder images.

Two extractors share one contract: a strided grid of unit-norm vectors with
a validity mask. The patch descriptor pools the image into stride-sized
blocks, standardises a window of blocks around each one and applies a
fixed seeded projection. The conv stack runs the forward pass of 3x3
convolutions whose weights come from a file (see ``read_weights``).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .cylinder import CylinderImage

PATCH = "patch-descriptor"
CONV = "linear-conv-stack"
MAGIC = b"CYLW"
LEAKY_SLOPE = 0.01
RANGE_EPS = 0.1
REFL_EPS = 0.05
REFL_WEIGHT = 1.0


class WeightShapeMismatch(ValueError):
    pass


@dataclass(frozen=True)
class ConvLayer:
    kernel: np.ndarray  # (kh, kw, in_ch, out_ch)
    bias: np.ndarray  # (out_ch,)
    stride: tuple = (1, 1)


@dataclass(frozen=True)
class ExtractorSpec:
    """How to build a feature map.

    The patch descriptor first averages the image over ``stride`` blocks and
    then describes each block by the ``patch`` window of blocks around it
    (measured in blocks, so ``(1, 1)`` sees only the block itself).
    """

    kind: str = PATCH
    stride: tuple = (4, 8)
    channels: int = 64
    patch: tuple = None
    seed: int = 0
    layers: tuple = field(default=(), repr=False)

    def __post_init__(self):
        if self.kind not in (PATCH, CONV):
            raise ValueError(f"unknown extractor kind {self.kind!r}")
        object.__setattr__(self, "stride", tuple(int(s) for s in self.stride))
        if min(self.stride) < 1 or self.channels < 1:
            raise ValueError("stride and channels must be positive")
        if self.patch is None:
            object.__setattr__(self, "patch", (1, 1))
        object.__setattr__(self, "patch", tuple(int(p) for p in self.patch))
        if min(self.patch) < 1:
            raise ValueError(f"patch {self.patch} must be at least one block")
        object.__setattr__(self, "layers", tuple(self.layers))
        if self.kind == CONV:
            check_layers(self.layers, self.stride)

    @property
    def receptive(self) -> tuple:
        if self.kind == PATCH:
            return self.patch[0] * self.stride[0], self.patch[1] * self.stride[1]
        rh = rw = 1
        jh = jw = 1
        for layer in self.layers:
            kh, kw = layer.kernel.shape[:2]
            rh += (kh - 1) * jh
            rw += (kw - 1) * jw
            jh *= layer.stride[0]
            jw *= layer.stride[1]
        return rh, rw


def coarse_spec(**kw) -> ExtractorSpec:
    kw.setdefault("stride", (4, 8))
    kw.setdefault("patch", (5, 9))
    kw.setdefault("channels", 96)
    return ExtractorSpec(**kw)


def refine_spec(**kw) -> ExtractorSpec:
    kw.setdefault("stride", (1, 1))
    kw.setdefault("patch", (5, 7))
    kw.setdefault("channels", 32)
    return ExtractorSpec(**kw)


@dataclass(frozen=True, eq=False)
class FeatureMap:
    values: np.ndarray  # (rows, cols, C)
    valid: np.ndarray  # (rows, cols)
    stride: tuple
    cyclic: bool = False

    def __post_init__(self):
        self.values.flags.writeable = False
        self.valid.flags.writeable = False

    @property
    def shape(self):
        return self.valid.shape

    @property
    def channels(self):
        return self.values.shape[-1]


def check_layers(layers, stride):
    if not layers:
        raise WeightShapeMismatch("conv stack has no layers")
    in_ch = 2
    sh = sw = 1
    for k, layer in enumerate(layers):
        kern = np.asarray(layer.kernel)
        if kern.ndim != 4 or kern.shape[2] != in_ch:
            raise WeightShapeMismatch(f"layer {k}: expected {in_ch} input channels, kernel shape {kern.shape}")
        if kern.shape[0] % 2 == 0 or kern.shape[1] % 2 == 0:
            raise WeightShapeMismatch(f"layer {k}: kernel size must be odd, got {kern.shape[:2]}")
        if np.asarray(layer.bias).shape != (kern.shape[3],):
            raise WeightShapeMismatch(f"layer {k}: bias shape {np.shape(layer.bias)} vs {kern.shape[3]} outputs")
        in_ch = kern.shape[3]
        sh *= layer.stride[0]
        sw *= layer.stride[1]
    if (sh, sw) != tuple(stride):
        raise WeightShapeMismatch(f"layer strides multiply to {(sh, sw)}, spec stride is {tuple(stride)}")


def _pad(arr, top, bottom, left, right, cyclic, fill=0):
    """Pad the two leading axes; columns wrap when ``cyclic``."""
    extra = [(0, 0)] * (arr.ndim - 2)
    arr = np.pad(arr, [(top, bottom), (0, 0)] + extra, constant_values=fill)
    if cyclic:
        return np.pad(arr, [(0, 0), (left, right)] + extra, mode="wrap")
    return np.pad(arr, [(0, 0), (left, right)] + extra, constant_values=fill)


def _grid_dims(img_shape, stride):
    h, w = img_shape
    n, m = stride
    return -(-h // n), -(-w // m)


def random_projection(in_dim: int, out_dim: int, seed: int) -> np.ndarray:
    """Fixed (in_dim, out_dim) matrix with orthonormal columns or rows."""
    g = np.random.default_rng(seed).normal(size=(max(in_dim, out_dim), min(in_dim, out_dim)))
    q, r = np.linalg.qr(g)
    q = q * np.sign(np.diag(r))
    return q if in_dim >= out_dim else q.T


def block_average(img: CylinderImage, stride):
    """Mean range and reflectivity of the occupied cells in each stride block.

    Returns ``(range, reflectivity, occupied)`` on the strided grid; a block
    is occupied when any of its cells is. Partial blocks at the far edges
    count only the cells that exist.
    """
    n, m = stride
    rows, cols = _grid_dims(img.shape, stride)
    h, w = img.shape
    occ = img.occupied
    if (n, m) == (1, 1):
        return (np.where(occ, img.range, 0.0).astype(np.float32),
                np.where(occ, img.reflectivity, 0.0).astype(np.float32), occ.astype(np.float32))

    def pooled_sum(a):
        a = np.pad(a, ((0, rows * n - h), (0, cols * m - w)))
        return a.reshape(rows, n, cols, m).sum(axis=(1, 3))

    cnt = pooled_sum(occ.astype(np.float64))
    safe = np.maximum(cnt, 1.0)
    rng = pooled_sum(np.where(occ, img.range, 0.0)) / safe
    refl = pooled_sum(np.where(occ, img.reflectivity, 0.0)) / safe
    return rng.astype(np.float32), refl.astype(np.float32), (cnt > 0).astype(np.float32)


def _patch_descriptors(img: CylinderImage, spec: ExtractorSpec, cyclic: bool):
    ph, pw = spec.patch
    rng_b, refl_b, occ_b = block_average(img, spec.stride)
    rows, cols = occ_b.shape
    top, left = (ph - 1) // 2, (pw - 1) // 2
    bottom, right = ph - 1 - top, pw - 1 - left
    rng = _pad(rng_b, top, bottom, left, right, cyclic)
    refl = _pad(refl_b, top, bottom, left, right, cyclic)
    occ = _pad(occ_b, top, bottom, left, right, cyclic)

    def windows(a):
        return np.lib.stride_tricks.sliding_window_view(a, (ph, pw)).reshape(rows, cols, ph * pw)

    o_p = windows(occ)
    cnt = o_p.sum(axis=-1)
    valid = cnt > 0
    safe = np.maximum(cnt, 1)[..., None]

    def centred(a, eps):
        # unoccupied entries are zero in both a and o_p, so they stay zero
        w = windows(a)
        w -= (w.sum(axis=-1, keepdims=True) / safe) * o_p
        std = np.sqrt(np.einsum("...k,...k->...", w, w)[..., None] / safe)
        w /= eps + std
        return w

    proj = random_projection(2 * ph * pw, spec.channels, spec.seed).astype(np.float32)
    k = ph * pw
    out = centred(rng, RANGE_EPS) @ proj[:k]
    out += (REFL_WEIGHT * centred(refl, REFL_EPS)) @ proj[k:]
    out[~valid] = 0.0
    return out, valid


def _conv_forward(img: CylinderImage, spec: ExtractorSpec, cyclic: bool):
    x = np.stack([np.where(img.occupied, img.range, 0.0), np.where(img.occupied, img.reflectivity, 0.0)], axis=-1)
    occ = img.occupied.astype(np.float64)[..., None]
    n_layers = len(spec.layers)
    for k, layer in enumerate(spec.layers):
        kern = np.asarray(layer.kernel, dtype=np.float64)
        kh, kw = kern.shape[:2]
        sh, sw = layer.stride
        x = _conv2d(x, kern, np.asarray(layer.bias, dtype=np.float64), (sh, sw), cyclic)
        occ = _conv2d(occ, np.ones((kh, kw, 1, 1)), np.zeros(1), (sh, sw), cyclic)
        if k < n_layers - 1:
            x = np.where(x > 0, x, LEAKY_SLOPE * x)
    return x, occ[..., 0] > 0


def _conv2d(x, kern, bias, stride, cyclic):
    kh, kw = kern.shape[:2]
    sh, sw = stride
    h, w = x.shape[:2]
    oh, ow = -(-h // sh), -(-w // sw)
    ph, pw = kh // 2, kw // 2
    pad_b = (oh - 1) * sh + kh - h - ph
    pad_r = (ow - 1) * sw + kw - w - pw
    xp = _pad(x, ph, max(pad_b, 0), pw, max(pad_r, 0), cyclic)
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(0, 1))[::sh, ::sw][:oh, :ow]
    # win: (oh, ow, in_ch, kh, kw)
    return np.einsum("hwcij,ijco->hwo", win, kern, optimize=True) + bias


def extract(img: CylinderImage, spec: ExtractorSpec) -> FeatureMap:
    """Strided unit-norm feature map; cells that see no occupied input are invalid."""
    cyclic = img.config.cyclic and img.shape[1] % spec.stride[1] == 0
    if spec.kind == PATCH:
        raw, valid = _patch_descriptors(img, spec, cyclic)
    else:
        raw, valid = _conv_forward(img, spec, cyclic)
        raw = np.where(valid[..., None], raw, 0.0)
    return normalize(FeatureMap(raw, valid, spec.stride, cyclic))


def normalize(fm: FeatureMap) -> FeatureMap:
    v = np.asarray(fm.values)
    if v.dtype != np.float32:
        v = v.astype(np.float64)
    norm = np.sqrt(np.einsum("...c,...c->...", v, v))
    valid = fm.valid & (norm >= 1e-12)
    # vectors already unit length to rounding are left alone, so normalising twice changes nothing
    unit = np.abs(norm - 1) <= 8 * np.finfo(v.dtype).eps
    scale = np.where(valid & ~unit, norm, 1.0).astype(v.dtype)
    out = np.where(valid[..., None], v / scale[..., None], 0.0).astype(v.dtype)
    return FeatureMap(out, valid, fm.stride, fm.cyclic)


def write_weights(path, layers) -> None:
    """Serialise conv layers in the little-endian ``CYLW`` layout."""
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(layers)))
        for layer in layers:
            kern = np.asarray(layer.kernel, dtype="<f4")
            kh, kw, in_ch, out_ch = kern.shape
            f.write(struct.pack("<6I", out_ch, in_ch, kh, kw, *layer.stride))
            f.write(np.ascontiguousarray(kern).tobytes())
            f.write(np.asarray(layer.bias, dtype="<f4").reshape(out_ch).tobytes())


def read_weights(path) -> tuple:
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != MAGIC or len(data) < 8:
        raise WeightShapeMismatch(f"{path}: not a CYLW weight file")
    (count,) = struct.unpack_from("<I", data, 4)
    pos = 8
    layers = []
    for k in range(count):
        if pos + 24 > len(data):
            raise WeightShapeMismatch(f"{path}: truncated header of layer {k}")
        out_ch, in_ch, kh, kw, sh, sw = struct.unpack_from("<6I", data, pos)
        pos += 24
        n_kern = kh * kw * in_ch * out_ch
        end = pos + 4 * (n_kern + out_ch)
        if end > len(data):
            raise WeightShapeMismatch(f"{path}: truncated weights of layer {k}")
        kern = np.frombuffer(data, dtype="<f4", count=n_kern, offset=pos).reshape(kh, kw, in_ch, out_ch)
        bias = np.frombuffer(data, dtype="<f4", count=out_ch, offset=pos + 4 * n_kern)
        layers.append(ConvLayer(kern.astype(np.float64), bias.astype(np.float64), (sh, sw)))
        pos = end
    if pos != len(data):
        raise WeightShapeMismatch(f"{path}: {len(data) - pos} trailing bytes")
    return tuple(layers)
