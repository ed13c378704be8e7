"""Shared U-Net encoder/decoder with reference attention at every decoder level.

Through-plane slices (depth-upsampled) and axial reference slices go through
the same encoder. The decoder enhances its feature at each level with
:func:`mrnla_forward` against the level-matched reference features, then
continues with the usual skip concatenation. The head predicts a correction
that is added to the linearly upsampled input slice; it is zero-initialised,
so an untrained model reproduces linear depth interpolation exactly.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .exceptions import DimensionError
from .mrnla import NlabParams, mrnla_forward
from .tensor import Tensor
from .volume import lerp_depth

N_LEVELS = 4  # stem + three downsample steps
PAD_MULTIPLE = 2 ** (N_LEVELS - 1)


@dataclass(frozen=True)
class NetConfig:
    base_width: int = 8
    fusion_width: int = 8
    fusion_depth: int = 1
    relevance_fusion: bool = True
    key_block: int | None = None
    max_ref_keys: int | None = None

    @property
    def widths(self):
        return tuple(self.base_width * 2 ** i for i in range(N_LEVELS))


class ModelParams(dict):
    """Ordered mapping of parameter name -> Tensor."""

    def group_of(self, name):
        head = name.split(".")[0]
        if head in ("enc", "dec", "mrnla"):
            return f"{head}.{name.split('.')[1]}"
        return head

    def groups(self):
        out = {}
        for name in self:
            out.setdefault(self.group_of(name), []).append(name)
        return out

    def subset(self, prefix):
        return {k: v for k, v in self.items() if k.startswith(prefix)}

    def reconstruction_names(self):
        return [k for k in self if not k.startswith("fuse.")]

    def fusion_names(self):
        return [k for k in self if k.startswith("fuse.")]

    def copy_arrays(self):
        return {k: v.data.copy() for k, v in self.items()}

    def set_requires_grad(self, names, flag):
        for k in names:
            self[k].requires_grad = flag

    def zero_grad(self):
        for v in self.values():
            v.grad = None


def _conv_params(params, rng, name, c_out, c_in, k, gain=math.sqrt(2.0), zero=False):
    w = np.zeros((c_out, c_in, k, k)) if zero else T.xavier(rng, (c_out, c_in, k, k), gain)
    params[f"{name}.w"] = Tensor(w, requires_grad=True)
    params[f"{name}.b"] = Tensor(np.zeros(c_out), requires_grad=True)


def init_params(config, seed=0, zero_head=True):
    """Fresh parameters for the reconstruction U-Net and the fusion network."""
    rng = np.random.default_rng(seed)
    c = config.widths
    p = ModelParams()
    _conv_params(p, rng, "enc.0.conv1", c[0], 1, 3)
    _conv_params(p, rng, "enc.0.conv2", c[0], c[0], 3)
    for lvl in range(1, N_LEVELS):
        _conv_params(p, rng, f"enc.{lvl}.conv1", c[lvl], c[lvl - 1], 3)
        _conv_params(p, rng, f"enc.{lvl}.conv2", c[lvl], c[lvl], 3)
    for lvl in range(N_LEVELS - 1, -1, -1):
        attn = NlabParams.init(c[lvl], rng)
        if zero_head:
            # attention starts as an exact identity (fused = F), like the global residual
            attn.w_out.data[:] = 0.0
        p.update(attn.named(f"mrnla.{lvl}."))
        if lvl < N_LEVELS - 1:
            _conv_params(p, rng, f"dec.{lvl}.up", c[lvl], c[lvl + 1], 1, gain=1.0)
            _conv_params(p, rng, f"dec.{lvl}.conv1", c[lvl], 2 * c[lvl], 3)
            _conv_params(p, rng, f"dec.{lvl}.conv2", c[lvl], c[lvl], 3)
    _conv_params(p, rng, "head", 1, c[0], 1, gain=1.0, zero=zero_head)

    f = config.fusion_width
    if config.fusion_depth == 0:
        _conv_params(p, rng, "fuse.head", 1, 2, 3, gain=1.0, zero=zero_head)
    else:
        _conv_params(p, rng, "fuse.enc0.conv1", f, 2, 3)
        _conv_params(p, rng, "fuse.enc0.conv2", f, f, 3)
        _conv_params(p, rng, "fuse.enc1.conv1", 2 * f, f, 3)
        _conv_params(p, rng, "fuse.enc1.conv2", 2 * f, 2 * f, 3)
        _conv_params(p, rng, "fuse.dec0.conv1", f, 3 * f, 3)
        _conv_params(p, rng, "fuse.dec0.conv2", f, f, 3)
        _conv_params(p, rng, "fuse.head", 1, f, 1, gain=1.0, zero=zero_head)
    return p


def _conv(x, params, name, padding=1):
    return T.conv2d(x, params[f"{name}.w"], params[f"{name}.b"], padding)


def conv_block(x, params, name):
    x = T.relu(_conv(x, params, f"{name}.conv1"))
    return T.relu(_conv(x, params, f"{name}.conv2"))


def _as_batch(image):
    image = T.as_tensor(image)
    if image.ndim == 2:
        return T.reshape(image, (1, 1) + image.shape)
    if image.ndim == 3:
        return T.reshape(image, (image.shape[0], 1) + image.shape[1:])
    if image.ndim == 4:
        return image
    raise DimensionError(f"expected a 2-D image or a batch of them, got {image.shape}")


def encode(image, params):
    """Feature pyramid of 4 levels, each [B, C_l, H / 2^l, W / 2^l]."""
    x = _as_batch(image)
    h, w = x.shape[-2:]
    if h % PAD_MULTIPLE or w % PAD_MULTIPLE:
        raise DimensionError(f"encoder input {h}x{w} must be divisible by {PAD_MULTIPLE}; pad first")
    feats = [conv_block(x, params, "enc.0")]
    for lvl in range(1, N_LEVELS):
        feats.append(conv_block(T.avg_pool2(feats[-1]), params, f"enc.{lvl}"))
    return feats


def encode_references(images, params, max_ref_keys=None):
    """Encode N axial slices once; returns per-level lists of [h, w, C] maps."""
    x = pad_to_multiple(_as_batch(images), PAD_MULTIPLE)[0]
    levels = []
    for feat in encode(x, params):
        if max_ref_keys is not None:
            while feat.shape[-2] * feat.shape[-1] > max_ref_keys and feat.shape[-2] % 2 == 0 \
                    and feat.shape[-1] % 2 == 0:
                feat = T.avg_pool2(feat)
        levels.append([T.transpose(feat[n], (1, 2, 0)) for n in range(feat.shape[0])])
    return levels


def _mrnla_params(params, lvl):
    return NlabParams.from_dict(params, f"mrnla.{lvl}.")


def _enhance(x, refs, params, lvl, config):
    if not refs:
        return x, None
    xl = T.transpose(x, (0, 2, 3, 1))
    fused, R = mrnla_forward(xl, refs, _mrnla_params(params, lvl),
                             relevance_fusion=config.relevance_fusion, key_block=config.key_block)
    return T.transpose(fused, (0, 3, 1, 2)), R


def enhance_and_decode(query_pyramid, ref_levels, params, config, residual=None):
    """Decode a query pyramid, enhancing each level with the references.

    ``ref_levels`` is the output of :func:`encode_references` or None / an
    empty list for the reference-free path. Returns ``(slices, relevance)``
    where ``slices`` is [B, 1, H, W] and ``relevance`` maps level -> map.
    """
    relevance = {}
    top = N_LEVELS - 1
    refs = (lambda lvl: ref_levels[lvl]) if ref_levels else (lambda lvl: [])
    x, relevance[top] = _enhance(query_pyramid[top], refs(top), params, top, config)
    for lvl in range(top - 1, -1, -1):
        skip = query_pyramid[lvl]
        x = T.bilinear_resize(x, skip.shape[-2], skip.shape[-1])
        x = _conv(x, params, f"dec.{lvl}.up", padding=0)
        x, relevance[lvl] = _enhance(x, refs(lvl), params, lvl, config)
        x = conv_block(T.concat([x, skip], axis=1), params, f"dec.{lvl}")
    out = _conv(x, params, "head", padding=0)
    if residual is not None:
        out = out + _as_batch(residual)
    return out, relevance


def pad_to_multiple(x, multiple):
    """Reflect-pad the last two axes up to a multiple; returns (tensor, (h, w))."""
    h, w = x.shape[-2:]
    ph = (-h) % multiple
    pw = (-w) % multiple
    if ph == 0 and pw == 0:
        return x, (h, w)
    return T.pad_reflect(x, (ph // 2, ph - ph // 2, pw // 2, pw - pw // 2)), (h, w)


def crop_to(x, size):
    h, w = size
    ph = x.shape[-2] - h
    pw = x.shape[-1] - w
    if ph == 0 and pw == 0:
        return x
    return x[..., ph // 2:ph // 2 + h, pw // 2:pw // 2 + w]


def reconstruct_slices(lr_slices, ref_levels, params, config, r):
    """Depth-upsample, enhance, decode a batch of through-plane slices.

    ``lr_slices`` is [B, d, L] (depth first within each slice). Returns a
    Tensor [B, D, L] with D = r(d-1)+1 and the per-level relevance maps.
    """
    lr = np.asarray(lr_slices, dtype=np.float64)
    if lr.ndim != 3:
        raise DimensionError(f"expected a batch of 2-D slices, got {lr.shape}")
    up = np.moveaxis(lerp_depth(np.moveaxis(lr, 1, 0), r), 0, 1)
    x, size = pad_to_multiple(Tensor(up[:, None]), PAD_MULTIPLE)
    pyr = encode(x, params)
    out, relevance = enhance_and_decode(pyr, ref_levels, params, config)
    out = crop_to(out, size) + Tensor(up[:, None])
    return T.reshape(out, up.shape), relevance


def through_plane_slices(volume, plane, indices=None):
    """Stack of through-plane slices [B, depth, L] for coronal or sagittal."""
    a = np.asarray(volume)
    if plane == "coronal":
        s = a.transpose(1, 0, 2)   # y, z, x
    elif plane == "sagittal":
        s = a.transpose(2, 0, 1)   # x, z, y
    else:
        raise ValueError(f"through-plane view must be coronal or sagittal, got {plane!r}")
    return s if indices is None else s[np.asarray(indices)]


def slices_to_volume(slices, plane):
    """Inverse of :func:`through_plane_slices` over all indices."""
    s = np.asarray(slices)
    return s.transpose(1, 0, 2) if plane == "coronal" else s.transpose(1, 2, 0)


def reconstruct_view(v_lr, plane, ref_indices, r, params, config, chunk=16, ref_levels=None,
                     return_relevance=False):
    """Reconstruct the dense volume from every slice of one through-plane view."""
    a = np.asarray(getattr(v_lr, "voxels", v_lr), dtype=np.float64)
    with T.no_grad():
        if ref_levels is None and ref_indices:
            ref_levels = encode_references(a[list(ref_indices)], params, config.max_ref_keys)
        src = through_plane_slices(a, plane)
        outs, rel = [], {}
        for i0 in range(0, src.shape[0], chunk):
            o, R = reconstruct_slices(src[i0:i0 + chunk], ref_levels, params, config, r)
            outs.append(o.data)
            for lvl, m in R.items():
                if m is not None:
                    rel.setdefault(lvl, []).append(m.data)
    vol = slices_to_volume(np.concatenate(outs, axis=0), plane)
    if return_relevance:
        return vol, {lvl: np.concatenate(ms, axis=1) for lvl, ms in rel.items()}
    return vol


def fusion_residual(x, params):
    """Slice-wise residual network over [Z, 2, H, W] inputs -> [Z, 1, H, W]."""
    if "fuse.enc0.conv1.w" not in params:
        return _conv(x, params, "fuse.head", padding=1)
    x, size = pad_to_multiple(x, 2)
    f0 = conv_block(x, params, "fuse.enc0")
    f1 = conv_block(T.avg_pool2(f0), params, "fuse.enc1")
    up = T.bilinear_resize(f1, f0.shape[-2], f0.shape[-1])
    y = conv_block(T.concat([f0, up], axis=1), params, "fuse.dec0")
    return crop_to(_conv(y, params, "fuse.head", padding=0), size)


def residual_fuse(v_cor, v_sag, params):
    """Average of the two view reconstructions plus a learned per-slice residual."""
    v_cor, v_sag = T.as_tensor(v_cor), T.as_tensor(v_sag)
    if v_cor.shape != v_sag.shape:
        raise DimensionError(f"view volumes differ in shape: {v_cor.shape} vs {v_sag.shape}")
    x = T.stack([v_cor, v_sag], axis=1)
    phi = T.reshape(fusion_residual(x, params), v_cor.shape)
    return T.scale(v_cor + v_sag, 0.5) + phi
