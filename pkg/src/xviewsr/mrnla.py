"""Multi-reference non-local attention.

Through-plane features are queries; each axial reference supplies keys and
values. Per-reference outputs are fused with a per-query relevance map
derived from the attention-weighted similarity scores.

Feature maps here are channel-last: query ``[Dq, Hq, C]`` (optionally with a
leading batch axis) and reference ``[Hr, Wr, C]``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .exceptions import DimensionError
from .tensor import Tensor

_PROJ = ("q", "k", "v", "out")


@dataclass
class NlabParams:
    """Four square 1x1 projections (weights stored as [C_out, C_in])."""

    w_q: Tensor
    b_q: Tensor
    w_k: Tensor
    b_k: Tensor
    w_v: Tensor
    b_v: Tensor
    w_out: Tensor
    b_out: Tensor

    @property
    def channels(self):
        return self.w_q.shape[0]

    @classmethod
    def init(cls, channels, rng, gain=1.0, requires_grad=True):
        fields = {}
        for name in _PROJ:
            fields[f"w_{name}"] = Tensor(T.xavier(rng, (channels, channels), gain), requires_grad)
            fields[f"b_{name}"] = Tensor(np.zeros(channels), requires_grad)
        return cls(**fields)

    @classmethod
    def from_dict(cls, d, prefix=""):
        return cls(**{f"{kind}_{name}": d[f"{prefix}{kind}_{name}"]
                      for name in _PROJ for kind in ("w", "b")})

    def named(self, prefix=""):
        return {f"{prefix}{kind}_{name}": getattr(self, f"{kind}_{name}")
                for name in _PROJ for kind in ("w", "b")}

    def __post_init__(self):
        c = self.w_q.shape[0]
        for name in _PROJ:
            w, b = getattr(self, f"w_{name}"), getattr(self, f"b_{name}")
            if w.shape != (c, c) or b.shape != (c,):
                raise DimensionError(f"projection {name} must be square over {c} channels")


@dataclass
class NlabOutput:
    transferred: Tensor   # same shape as the query feature
    similarity: Tensor    # [..., Q, K] pre-softmax, scaled by 1/sqrt(C)
    attention: Tensor     # row softmax of ``similarity``


def _project(x, w, b):
    # a 1x1 convolution on a channel-last map
    return T.matmul(x, T.transpose(w, (1, 0))) + b


def _flatten_query(F):
    F = T.as_tensor(F)
    if F.ndim == 3:
        return F, (F.shape[0] * F.shape[1],)
    if F.ndim == 4:
        return F, (F.shape[0], F.shape[1] * F.shape[2])
    raise DimensionError(f"query feature must be [Dq,Hq,C] or [B,Dq,Hq,C], got {F.shape}")


def _check(F, F_ref, params):
    if F_ref.ndim != 3:
        raise DimensionError(f"reference feature must be [Hr,Wr,C], got {F_ref.shape}")
    c = params.channels
    if F.shape[-1] != c or F_ref.shape[-1] != c:
        raise DimensionError(f"channel mismatch: query {F.shape[-1]}, reference {F_ref.shape[-1]}, params {c}")


def nlab(F, F_ref, params):
    """Single-reference non-local attention block."""
    F, qshape = _flatten_query(F)
    F_ref = T.as_tensor(F_ref)
    _check(F, F_ref, params)
    c = params.channels
    q = T.layer_norm(_project(F, params.w_q, params.b_q), axis=-1)
    q = T.reshape(q, qshape + (c,))
    ref = T.reshape(F_ref, (F_ref.shape[0] * F_ref.shape[1], c))
    k = T.layer_norm(_project(ref, params.w_k, params.b_k), axis=-1)
    v = _project(ref, params.w_v, params.b_v)
    s = T.scale(T.matmul(q, T.transpose(k, (1, 0))), 1.0 / math.sqrt(c))
    a = T.softmax_stable(s, axis=-1)
    o = _project(T.matmul(a, v), params.w_out, params.b_out)
    return NlabOutput(T.reshape(o, F.shape), s, a)


def relation_vector(S, attention=None):
    """Attention-weighted mean of the similarity scores along the key axis."""
    S = T.as_tensor(S)
    if S.shape[-1] < 1:
        raise DimensionError("relation_vector needs at least one key")
    if attention is None:
        attention = T.softmax_stable(S, axis=-1)
    return T.sum_axis(T.mul(attention, S), axis=-1)


def relevance_map(relations):
    """Softmax across references of the stacked relation vectors -> [N, ..., Q]."""
    if not relations:
        raise DimensionError("relevance_map needs at least one relation vector")
    shapes = {tuple(T.as_tensor(r).shape) for r in relations}
    if len(shapes) != 1:
        raise DimensionError(f"relation vectors differ in shape: {sorted(shapes)}")
    return T.softmax_stable(T.stack(relations, axis=0), axis=0)


def fuse(transferred, R, F):
    """Relevance-weighted sum of per-reference features plus the residual ``F``."""
    F = T.as_tensor(F)
    n = len(transferred)
    if R.shape[0] != n:
        raise DimensionError(f"relevance map has {R.shape[0]} rows for {n} references")
    for t in transferred:
        if t.shape != F.shape:
            raise DimensionError(f"transferred feature {t.shape} != query feature {F.shape}")
    w = T.reshape(R, (n,) + F.shape[:-1] + (1,))
    out = F
    for l, t in enumerate(transferred):
        out = out + w[l] * t
    return out


def average_fuse(transferred, F):
    """Ablation variant: plain mean over references plus the residual."""
    acc = transferred[0]
    for t in transferred[1:]:
        acc = acc + t
    return T.scale(acc, 1.0 / len(transferred)) + F


def mrnla_forward(F, refs, params, relevance_fusion=True, key_block=None):
    """Enhance ``F`` with N references. Returns ``(fused, relevance_map)``.

    ``relevance_map`` is None in averaging mode. When ``key_block`` is set and
    graph recording is off, attention runs in key tiles (see :func:`nlab_tiled`).
    """
    if not refs:
        raise DimensionError("mrnla_forward needs at least one reference")
    F = T.as_tensor(F)
    tiled = key_block is not None and not T.is_grad_enabled()
    transferred, relations = [], []
    for ref in refs:
        if tiled:
            out, rel = nlab_tiled(F.data, T.as_tensor(ref).data, params, key_block)
            transferred.append(Tensor(out))
            relations.append(Tensor(rel))
        else:
            o = nlab(F, ref, params)
            transferred.append(o.transferred)
            if relevance_fusion:
                relations.append(relation_vector(o.similarity, o.attention))
    if not relevance_fusion:
        return average_fuse(transferred, F), None
    R = relevance_map(relations)
    return fuse(transferred, R, F), R


# ---------------------------------------------------------------- tiled kernel

def _project_np(x, w, b):
    return x @ w.T + b


def nlab_tiled(F, F_ref, params, key_block=64, return_similarity=False):
    """Forward-only attention over key tiles of at most ``key_block`` keys.

    Uses a running max / running sum (online softmax), so the full Q x K
    probability matrix is never materialised. Returns ``(transferred,
    relation)`` shaped like the query (minus channels for ``relation``),
    plus the assembled similarity matrix when requested.
    """
    F = np.asarray(F, dtype=np.float64)
    F_ref = np.asarray(F_ref, dtype=np.float64)
    _check(F, F_ref, params)
    if key_block < 1:
        raise ValueError("key_block must be >= 1")
    c = params.channels
    p = {name: getattr(params, name).data for name in params.named()}
    q, _ = T.layer_norm_np(_project_np(F, p["w_q"], p["b_q"]), -1)
    q = q.reshape(-1, c)
    ref = F_ref.reshape(-1, c)
    k, _ = T.layer_norm_np(_project_np(ref, p["w_k"], p["b_k"]), -1)
    v = _project_np(ref, p["w_v"], p["b_v"])
    inv = 1.0 / math.sqrt(c)

    nq = q.shape[0]
    m = np.full(nq, -np.inf)
    denom = np.zeros(nq)
    acc = np.zeros((nq, c))
    s_acc = np.zeros(nq)
    blocks = []
    for k0 in range(0, k.shape[0], key_block):
        s = (q @ k[k0:k0 + key_block].T) * inv
        if return_similarity:
            blocks.append(s)
        m_new = np.maximum(m, s.max(axis=1))
        alpha = np.exp(m - m_new)
        e = np.exp(s - m_new[:, None])
        denom = denom * alpha + e.sum(axis=1)
        acc = acc * alpha[:, None] + e @ v[k0:k0 + key_block]
        s_acc = s_acc * alpha + (e * s).sum(axis=1)
        m = m_new
    out = _project_np(acc / denom[:, None], p["w_out"], p["b_out"]).reshape(F.shape)
    relation = (s_acc / denom).reshape(F.shape[:-1])
    relation = relation.reshape(F.shape[:-3] + (-1,)) if F.ndim == 4 else relation.reshape(-1)
    if return_similarity:
        return out, relation, np.concatenate(blocks, axis=1)
    return out, relation
