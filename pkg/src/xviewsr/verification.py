"""Finite-difference gradient suites and the attention tiling benchmark."""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .mrnla import NlabParams, mrnla_forward, nlab, nlab_tiled
from .network import NetConfig, encode_references, init_params, reconstruct_slices, residual_fuse
from .tensor import Tensor, grad_check

PRIMITIVE_TOL = 1e-4
COMPOSITE_TOL = 1e-3


@dataclass
class CheckResult:
    suite: str
    name: str
    error: float
    tol: float

    @property
    def passed(self):
        return self.error < self.tol

    def line(self):
        flag = "PASS" if self.passed else "FAIL"
        return f"[{flag}] {self.suite}/{self.name}: rel err {self.error:.2e} (tol {self.tol:.0e})"


def _weighted(op, shape, rng):
    # random weights keep every output coordinate in the gradient
    w = Tensor(rng.normal(size=shape))
    return lambda *a: T.sum_axis(T.mul(op(*a), w))


def primitive_cases(rng):
    """(name, f, x) triples; every x has at most 64 elements."""
    n = rng.normal
    cases = []

    x = Tensor(n(size=(1, 2, 4, 4)))
    w = Tensor(n(size=(3, 2, 3, 3)))
    b = Tensor(n(size=3))
    fwd = _weighted(lambda a: T.conv2d(a, w, b, 1), (1, 3, 4, 4), rng)
    cases.append(("conv2d/input", fwd, x))
    fwd_w = _weighted(lambda ww: T.conv2d(x, ww, b, 1), (1, 3, 4, 4), rng)
    cases.append(("conv2d/weight", fwd_w, w))
    cases.append(("conv2d/bias", _weighted(lambda bb: T.conv2d(x, w, bb, 1), (1, 3, 4, 4), rng), b))
    cases.append(("conv2d_valid/input", _weighted(lambda a: T.conv2d(a, w, b, 0), (1, 3, 2, 2), rng),
                  Tensor(n(size=(1, 2, 4, 4)))))
    cases.append(("conv2d_blocked/input",
                  _weighted(lambda a: T.conv2d_blocked(a, w, b, 1, block_rows=3), (1, 3, 4, 4), rng),
                  Tensor(n(size=(1, 2, 4, 4)))))
    cases.append(("softmax", _weighted(lambda a: T.softmax_stable(a, -1), (4, 6), rng),
                  Tensor(n(size=(4, 6)))))
    cases.append(("softmax/axis0", _weighted(lambda a: T.softmax_stable(a, 0), (4, 6), rng),
                  Tensor(n(size=(4, 6)))))
    cases.append(("layer_norm", _weighted(lambda a: T.layer_norm(a, -1), (5, 8), rng),
                  Tensor(n(size=(5, 8)))))
    cases.append(("bilinear_resize", _weighted(lambda a: T.bilinear_resize(a, 7, 5), (2, 7, 5), rng),
                  Tensor(n(size=(2, 4, 4)))))
    cases.append(("bilinear_resize/down", _weighted(lambda a: T.bilinear_resize(a, 3, 2), (3, 2), rng),
                  Tensor(n(size=(6, 5)))))
    cases.append(("avg_pool2", _weighted(T.avg_pool2, (2, 3, 2), rng), Tensor(n(size=(2, 6, 4)))))
    a = Tensor(n(size=(3, 4)))
    bm = Tensor(n(size=(4, 5)))
    cases.append(("matmul/left", _weighted(lambda u: T.matmul(u, bm), (3, 5), rng), a))
    cases.append(("matmul/right", _weighted(lambda u: T.matmul(a, u), (3, 5), rng), bm))
    cases.append(("matmul/broadcast", _weighted(lambda u: T.matmul(u, bm), (2, 3, 5), rng),
                  Tensor(n(size=(2, 3, 4)))))
    kinked = n(size=(6, 6))
    kinked[np.abs(kinked) < 0.05] = 0.3
    cases.append(("relu", _weighted(T.relu, (6, 6), rng), Tensor(kinked)))
    cases.append(("abs", _weighted(T.abs_, (6, 6), rng), Tensor(kinked.copy())))
    other = Tensor(n(size=(1, 6)))
    cases.append(("add/broadcast", _weighted(lambda u: T.add(u, other), (6, 6), rng), Tensor(n(size=(6, 6)))))
    lhs = Tensor(n(size=(6, 6)))
    cases.append(("add/rhs", _weighted(lambda u: T.add(lhs, u), (6, 6), rng),
                  Tensor(n(size=(1, 6)))))
    cases.append(("mul", _weighted(lambda u: T.mul(u, other), (6, 6), rng), Tensor(n(size=(6, 6)))))
    cases.append(("sub", _weighted(lambda u: T.sub(other, u), (6, 6), rng), Tensor(n(size=(6, 6)))))
    c2 = Tensor(n(size=(2, 3)))
    cases.append(("concat", _weighted(lambda u: T.concat([u, c2], axis=0), (5, 3), rng),
                  Tensor(n(size=(3, 3)))))
    cases.append(("stack", _weighted(lambda u: T.stack([c2, u], axis=1), (2, 2, 3), rng),
                  Tensor(n(size=(2, 3)))))
    cases.append(("sum_axis", _weighted(lambda u: T.sum_axis(u, axis=1), (4, 5), rng),
                  Tensor(n(size=(4, 6, 5)))))
    cases.append(("mean", _weighted(lambda u: T.mean(u, axis=(0, 2)), (6,), rng),
                  Tensor(n(size=(2, 6, 4)))))
    cases.append(("reshape+transpose",
                  _weighted(lambda u: T.transpose(T.reshape(u, (3, 4, 2)), (2, 0, 1)), (2, 3, 4), rng),
                  Tensor(n(size=(6, 4)))))
    cases.append(("getitem", _weighted(lambda u: u[1:3, ::2], (2, 3), rng), Tensor(n(size=(4, 6)))))
    cases.append(("pad_reflect", _weighted(lambda u: T.pad_reflect(u, (1, 2, 2, 1)), (1, 7, 7), rng),
                  Tensor(n(size=(1, 4, 4)))))
    target = Tensor(n(size=(4, 5)))
    cases.append(("l1_loss", lambda u: T.l1_loss(u, target), Tensor(n(size=(4, 5)))))
    return cases


def run_primitive_suite(seed=0, eps=1e-6):
    rng = np.random.default_rng(seed)
    return [CheckResult("primitive", name, grad_check(f, x, eps), PRIMITIVE_TOL)
            for name, f, x in primitive_cases(rng)]


def _random_nlab(channels, rng, scale=0.5):
    p = NlabParams.init(channels, rng)
    for name, t in p.named().items():
        if name.startswith("b_"):
            t.data = rng.normal(scale=scale, size=t.shape)
    return p


def composite_cases(rng, desk=(16, 16, 16), base_width=4, coords_per_group=3):
    """(name, f, x, indices) for attention and whole-network checks."""
    cases = []
    C = 4
    F = Tensor(rng.normal(size=(2, 3, C)))
    refs = [Tensor(rng.normal(size=(3, 3, C))) for _ in range(2)]
    params = _random_nlab(C, rng)
    w = Tensor(rng.normal(size=F.shape))

    def mr(relevance=True):
        return lambda _x: T.sum_axis(T.mul(mrnla_forward(F, refs, params, relevance)[0], w))

    cases.append(("nlab/query", lambda u: T.sum_axis(T.mul(nlab(u, refs[0], params).transferred, w)), F, None))
    cases.append(("mrnla/query", mr(), F, None))
    cases.append(("mrnla/ref0", mr(), refs[0], None))
    cases.append(("mrnla/ref1", mr(), refs[1], None))
    for name, t in params.named().items():
        cases.append((f"mrnla/{name}", mr(), t, None))
    cases.append(("mrnla_avg/query", mr(False), F, None))
    cases.append(("mrnla_avg/w_v", mr(False), params.w_v, None))

    # whole reconstruction network on a desk-size volume
    cfg = NetConfig(base_width=base_width, fusion_width=base_width)
    net = init_params(cfg, seed=int(rng.integers(1 << 30)), zero_head=False)
    depth, height, width = desk
    r = 5
    gt = rng.uniform(size=desk)
    lr_vol = gt[::r]
    slices = lr_vol[:, :4, :].transpose(1, 0, 2)
    target = Tensor(gt[:, :4, :].transpose(1, 0, 2))
    ref_idx = [0, 1, 3]

    def e2e(_x):
        levels = encode_references(lr_vol[ref_idx], net)
        pred, _ = reconstruct_slices(slices, levels, net, cfg, r)
        return T.l1_loss(pred, target)

    for group, names in net.groups().items():
        if group == "fuse":
            continue
        for name in names:
            if not name.rsplit(".", 1)[-1].startswith("w"):
                continue
            t = net[name]
            idx = rng.choice(t.size, size=min(coords_per_group, t.size), replace=False)
            cases.append((f"unet/{name}", e2e, t, idx))
            break

    v_cor = Tensor(rng.uniform(size=(4, height, width)))
    v_sag = Tensor(rng.uniform(size=(4, height, width)))
    gt_f = Tensor(rng.uniform(size=(4, height, width)))

    def fuse_loss(_x):
        return T.l1_loss(residual_fuse(v_cor, v_sag, net), gt_f)

    for name in net.fusion_names():
        if name.endswith(".w"):
            t = net[name]
            idx = rng.choice(t.size, size=min(coords_per_group, t.size), replace=False)
            cases.append((f"fusion/{name}", fuse_loss, t, idx))
    cases.append(("fusion/v_cor", fuse_loss, v_cor, rng.choice(v_cor.size, 4, replace=False)))
    return cases


def run_composite_suite(seed=0, eps=1e-6):
    rng = np.random.default_rng(seed)
    return [CheckResult("composite", name, grad_check(f, x, eps, idx), COMPOSITE_TOL)
            for name, f, x, idx in composite_cases(rng)]


# ---------------------------------------------------------------- benchmark

def bench_attention(key_counts=(64, 256, 1024, 2048), queries=256, channels=8, key_block=64,
                    seed=0, repeat=1):
    """Time recorded (naive) vs tiled attention; returns rows with max abs diff."""
    rng = np.random.default_rng(seed)
    params = _random_nlab(channels, rng)
    rows = []
    side_q = int(np.sqrt(queries))
    for n_keys in key_counts:
        F = rng.normal(size=(side_q, queries // side_q, channels))
        ref = rng.normal(size=(1, n_keys, channels))
        with T.no_grad():
            t0 = time.perf_counter()
            for _ in range(repeat):
                out = nlab(Tensor(F), Tensor(ref), params)
                rel_naive = T.sum_axis(T.mul(out.attention, out.similarity), -1).data
            t_naive = (time.perf_counter() - t0) / repeat
            t0 = time.perf_counter()
            for _ in range(repeat):
                tiled, rel_tiled = nlab_tiled(F, ref, params, key_block)
            t_tiled = (time.perf_counter() - t0) / repeat
        diff = max(float(np.max(np.abs(out.transferred.data - tiled))),
                   float(np.max(np.abs(rel_naive - rel_tiled))))
        rows.append({"keys": n_keys, "queries": queries, "naive_s": t_naive, "tiled_s": t_tiled,
                     "max_abs_diff": diff})
    return rows


def bench_conv(sizes=(16, 32, 64), channels=16, seed=0):
    """Direct vs blocked conv2d forward; returns rows with max abs diff."""
    rng = np.random.default_rng(seed)
    rows = []
    for s in sizes:
        x = rng.normal(size=(2, channels, s, s))
        w = rng.normal(size=(channels, channels, 3, 3))
        with T.no_grad():
            t0 = time.perf_counter()
            a = T.conv2d(x, w, None, 1).data
            t_direct = time.perf_counter() - t0
            t0 = time.perf_counter()
            b = T.conv2d_blocked(x, w, None, 1).data
            t_blocked = time.perf_counter() - t0
        rows.append({"size": s, "direct_s": t_direct, "blocked_s": t_blocked,
                     "max_abs_diff": float(np.max(np.abs(a - b)))})
    return rows
