"""Acceptance checks, one PASS/FAIL line per criterion.

Run with ``pytest -s tests/test_acceptance.py`` or ``python tests/test_acceptance.py``.
The lines are also repeated in the pytest terminal summary.
"""
import itertools
import math
import time

import numpy as np
import pytest

from xviewsr import evaluation as E
from xviewsr import tensor as T
from xviewsr import training as TR
from xviewsr.cli import main as cli_main
from xviewsr.config import ExperimentConfig
from xviewsr.mrnla import mrnla_forward
from xviewsr.verification import COMPOSITE_TOL, PRIMITIVE_TOL, run_composite_suite, run_primitive_suite
from xviewsr.volume import (
    PLANES, dense_depth, downsample_depth, extract_view, generate_phantom, plane_extent, stack_views,
    upsample_depth_linear,
)

from _oracles import loop_mrnla, loop_ssim, random_params

RESULTS = []

# desk experiment shared by the ablation and baseline criteria
DESK = dict(r=5, n_refs=3, crop=(16, 16, 16), phantom_dims=(16, 16, 16), phantom_kind="spheres",
            lr=1e-3, seed=0)
DESK_STEPS = 500
FUSION_STEPS = 100
CPU_BUDGET_S = 600.0


def report(name, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}"
    RESULTS.append(line)
    print(line)
    assert ok, line


def test_gradient_suite():
    t0 = time.perf_counter()
    prim = run_primitive_suite(seed=0)
    comp = run_composite_suite(seed=0)
    elapsed = time.perf_counter() - t0
    worst_p = max(r.error for r in prim)
    worst_c = max(r.error for r in comp)
    bad = [f"{r.suite}/{r.name}" for r in prim + comp if not r.passed]
    ok = not bad and worst_p < PRIMITIVE_TOL and worst_c < COMPOSITE_TOL and elapsed < 60
    report("1 gradient suite", ok,
           f"{len(prim)} primitives max rel err {worst_p:.1e} (<1e-4), {len(comp)} composites max "
           f"{worst_c:.1e} (<1e-3), {elapsed:.1f}s (<60s){' failing: ' + ', '.join(bad) if bad else ''}")


def test_attention_oracle():
    rng = np.random.default_rng(0)
    p = random_params(8, rng)
    F = rng.normal(size=(3, 4, 8))
    refs = [rng.normal(size=(5, 6, 8)) for _ in range(2)]
    fused, R = mrnla_forward(F, refs, p)
    oracle, _ = loop_mrnla(F, refs, p)
    err = float(np.max(np.abs(fused.data - oracle)))
    tiled_err = 0.0
    with T.no_grad():
        for block in (1, 8, 29, 64):
            tiled, Rt = mrnla_forward(F, refs, p, key_block=block)
            tiled_err = max(tiled_err, float(np.max(np.abs(tiled.data - fused.data))),
                            float(np.max(np.abs(Rt.data - R.data))))
    report("2 attention oracle", err < 1e-10 and tiled_err < 1e-12,
           f"loop oracle max abs diff {err:.1e} (<1e-10), tiled vs untiled {tiled_err:.1e} (<1e-12)")


def test_relevance_invariants():
    rng = np.random.default_rng(1)
    col_err = perm_err = fused_err = 0.0
    single_ok = True
    for i in range(100):
        n = 1 if i % 10 == 0 else int(rng.integers(2, 6))
        c = int(rng.integers(2, 9))
        p = random_params(c, rng)
        F = rng.normal(size=(int(rng.integers(1, 5)), int(rng.integers(1, 5)), c))
        refs = [rng.normal(size=(int(rng.integers(1, 5)), int(rng.integers(1, 5)), c)) for _ in range(n)]
        fused, R = mrnla_forward(F, refs, p)
        col_err = max(col_err, float(np.max(np.abs(R.data.sum(axis=0) - 1.0))))
        if n == 1:
            single_ok &= bool(np.all(R.data == 1.0))
        perm = rng.permutation(n)
        fused_p, R_p = mrnla_forward(F, [refs[k] for k in perm], p)
        perm_err = max(perm_err, float(np.max(np.abs(R_p.data - R.data[perm]))))
        fused_err = max(fused_err, float(np.max(np.abs(fused_p.data - fused.data))))
    ok = col_err < 1e-9 and single_ok and perm_err < 1e-12 and fused_err < 1e-12
    report("3 relevance invariants", ok,
           f"100 instances: column sum err {col_err:.1e} (<1e-9), N=1 all-ones {single_ok}, "
           f"permuted rows err {perm_err:.1e}, fused output err {fused_err:.1e} (<1e-12)")


def test_depth_protocol():
    rng = np.random.default_rng(2)
    relation_ok = identity_ok = views_ok = True
    for r, d in itertools.product(range(2, 6), range(2, 10)):
        v = rng.normal(size=(d, 3, 4))
        up = upsample_depth_linear(v, r)
        relation_ok &= up.shape[0] == dense_depth(d, r) == r * (d - 1) + 1
        relation_ok &= downsample_depth(up, r).shape[0] == d
        identity_ok &= bool(np.array_equal(downsample_depth(up, r), v))
        identity_ok &= bool(np.array_equal(up[::r], v))
    for shape in [(5, 6, 7), (16, 16, 16), (21, 8, 12)]:
        v = rng.normal(size=shape)
        for plane in PLANES:
            n = plane_extent(shape, plane)
            back = stack_views([extract_view(v, plane, i) for i in range(n)], plane)
            views_ok &= back.dtype == v.dtype and back.tobytes() == v.tobytes()
    report("4 depth protocol", relation_ok and identity_ok and views_ok,
           f"D=r(d-1)+1 for r in 2..5, d in 2..9: {relation_ok}; retained slices exact: {identity_ok}; "
           f"view stack/extract bit-exact: {views_ok}")


@pytest.fixture(scope="module")
def desk_runs():
    """Train the three ablation variants with identical seeds and budgets."""
    volume = TR.training_volume(ExperimentConfig(**DESK))
    variants = {
        "relevance": ExperimentConfig(**DESK),
        "averaging": ExperimentConfig(**DESK, relevance_fusion=False),
        "no_refs": ExperimentConfig(**{**DESK, "n_refs": 0}),
    }
    runs = {}
    cpu0 = time.process_time()
    for name, cfg in variants.items():
        state = TR.TrainState.fresh(cfg)
        start = TR.expected_trans_loss(state.params, cfg, volume)
        state, hist = TR.run_stage(state, volume, DESK_STEPS)
        runs[name] = {"state": state, "config": cfg, "start": start,
                      "final": TR.expected_trans_loss(state.params, cfg, volume),
                      "last_logged": float(np.mean([h["loss"] for h in hist[-50:]]))}
    runs["cpu_s"] = time.process_time() - cpu0
    runs["volume"] = volume
    return runs


def test_ablation_direction(desk_runs):
    rel, avg, none = (desk_runs[k]["final"] for k in ("relevance", "averaging", "no_refs"))
    cpu = desk_runs["cpu_s"]
    ok = rel <= avg and avg < none and rel < none and cpu <= CPU_BUDGET_S
    logged = ", ".join(f"{k} {desk_runs[k]['last_logged']:.5f}" for k in ("relevance", "averaging", "no_refs"))
    report("5 ablation direction", ok,
           f"final L_trans relevance {rel:.5f} <= averaging {avg:.5f} < N=0 {none:.5f} "
           f"({DESK_STEPS} steps each, {cpu:.0f}s CPU of {CPU_BUDGET_S:.0f}s; last-50 logged: {logged})")


def test_baseline_dominance(desk_runs):
    run = desk_runs["relevance"]
    cfg, state, volume = run["config"], run["state"], desk_runs["volume"]
    state.enter_stage2()
    state, _ = TR.run_stage(state, volume, FUSION_STEPS)
    gt = volume.voxels
    lr = downsample_depth(gt, cfg.r)
    fused = TR.infer_volume(state.params, cfg, lr)["fused"]
    ours = E.psnr(gt, fused)
    lin = E.psnr(gt, E.baseline_interpolate(lr, cfg.r, "linear"))
    cub = E.psnr(gt, E.baseline_interpolate(lr, cfg.r, "cubic"))
    report("6 baseline dominance", ours > lin and ours > cub,
           f"fused PSNR {ours:.3f} dB vs linear {lin:.3f} dB, cubic {cub:.3f} dB "
           f"({DESK_STEPS} + {FUSION_STEPS} steps)")


def test_train_determinism(tmp_path, monkeypatch):
    cfg = tmp_path / "run.yaml"
    cfg.write_text("r: 5\nn_refs: 3\ncrop: [16, 16, 16]\nstage1_steps: 4\nstage2_steps: 2\n"
                   "slices_per_step: 4\nphantom_kind: spheres\nphantom_dims: [21, 16, 24]\n"
                   "checkpoint: out/ck\nlog: out/metrics.csv\nseed: 7\n")
    for run in ("a", "b"):
        (tmp_path / run).mkdir()
        monkeypatch.chdir(tmp_path / run)
        assert cli_main(["train", "--config", str(cfg)]) == 0
        assert cli_main(["train", "--config", str(cfg), "--stage", "2"]) == 0
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    differ = [str(f) for f in files if (tmp_path / "a" / f).read_bytes() != (tmp_path / "b" / f).read_bytes()]
    same_set = files == sorted(p.relative_to(tmp_path / "b") for p in (tmp_path / "b").rglob("*") if p.is_file())
    report("7 determinism", bool(files) and same_set and not differ,
           f"{len(files)} files (checkpoint manifest, blobs, metric CSV) compared byte for byte; "
           f"differing: {differ or 'none'}")


def test_metric_correctness():
    rng = np.random.default_rng(3)
    a, b = rng.uniform(size=(11, 16, 16)), rng.uniform(size=(11, 16, 16))
    mse = math.fsum(float(x) ** 2 for x in (a - b).ravel()) / a.size
    psnr_err = abs(E.psnr(a, b) - 10 * math.log10(1.0 / mse))
    sa = a[2]
    sb = np.clip(sa + rng.normal(scale=0.1, size=sa.shape), 0, 1)
    ssim_err = abs(E.ssim_2d(sa, sb) - loop_ssim(sa, sb))
    self_one = E.ssim_2d(sa, sa) == 1.0 and all(E.ssim_view(a, a, p) == 1.0 for p in PLANES)
    gt = generate_phantom("spheres", 16, 16, 16).voxels
    noise = rng.normal(size=gt.shape)
    levels = [0.005, 0.01, 0.02, 0.05, 0.1]
    values = [E.psnr(gt, gt + s * noise) for s in levels]
    monotone = all(x > y for x, y in zip(values, values[1:]))
    ok = psnr_err < 1e-10 and ssim_err < 1e-10 and self_one and monotone
    report("8 metric correctness", ok,
           f"PSNR oracle err {psnr_err:.1e}, SSIM loop oracle err {ssim_err:.1e} (<1e-10), "
           f"SSIM(x,x)=1 exactly: {self_one}, PSNR over 5 noise levels "
           f"{' > '.join(f'{v:.2f}' for v in values)}: monotone {monotone}")


if __name__ == "__main__":
    import sys
    sys.exit(pytest.main([__file__, "-s", "-q"]))
