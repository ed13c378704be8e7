"""Two-stage optimisation, checkpoints and metric logs.

Stage 1 trains the shared reconstruction network on one randomly chosen
through-plane view per step. Stage 2 freezes it and trains only the fusion
network on the combined coronal/sagittal reconstructions.
"""
from __future__ import annotations

import csv
import hashlib
import itertools
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .config import ExperimentConfig
from .exceptions import ConfigError, DimensionError, StateError
from .network import (
    ModelParams, encode_references, init_params, reconstruct_slices, reconstruct_view,
    residual_fuse, through_plane_slices,
)
from .tensor import Tensor
from .volume import (
    Volume, downsample_depth, generate_phantom, load_avol, normalize_hu, sample_reference_indices,
)

log = logging.getLogger(__name__)

VIEWS = ("coronal", "sagittal")
LOG_FIELDS = ("step", "stage", "loss", "lr", "seed", "config_hash")


@dataclass
class TrainState:
    params: ModelParams
    config: ExperimentConfig
    rng: np.random.Generator
    stage: int = 1
    steps: dict = field(default_factory=lambda: {1: 0, 2: 0})
    moments: dict = field(default_factory=dict)

    @classmethod
    def fresh(cls, config):
        params = init_params(config.net(), seed=config.seed)
        return cls(params, config, np.random.default_rng(config.seed))

    def enter_stage2(self):
        if self.steps[1] == 0:
            raise StateError("stage 2 needs stage-1 weights; run stage 1 first")
        if self.stage != 2:
            self.stage = 2
            self.moments = {k: v for k, v in self.moments.items() if k.startswith("fuse.")}


# ---------------------------------------------------------------- losses

def loss_trans(v_gt, v_cor, v_sag):
    """Sum of the per-view L1 errors."""
    v_gt = T.as_tensor(_voxels(v_gt))
    return T.l1_loss(T.as_tensor(_voxels(v_cor)), v_gt) + T.l1_loss(T.as_tensor(_voxels(v_sag)), v_gt)


def loss_fuse(v_gt, v_fused):
    return T.l1_loss(T.as_tensor(_voxels(v_fused)), T.as_tensor(_voxels(v_gt)))


def _voxels(v):
    return v.voxels if isinstance(v, Volume) else v


# ---------------------------------------------------------------- optimiser

def optimizer_update(params, grads, moments, t, lr=1e-4, betas=(0.9, 0.999), eps=1e-8):
    """In-place bias-corrected Adam step number ``t`` (1-based) for each named param."""
    b1, b2 = betas
    for name, g in grads.items():
        p = params[name]
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise DimensionError(f"gradient for {name} has shape {g.shape}, parameter {p.data.shape}")
        m, v = moments.get(name, (np.zeros_like(p.data), np.zeros_like(p.data)))
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + eps)
        moments[name] = (m, v)
    return params


def _apply_update(state, names):
    cfg = state.config
    grads = {k: state.params[k].grad for k in names}
    optimizer_update(state.params, grads, state.moments, state.steps[state.stage] + 1,
                     cfg.lr, cfg.betas, cfg.adam_eps)
    state.params.zero_grad()


# ---------------------------------------------------------------- sampling

def random_crop(volume, crop, rng):
    a = _voxels(volume)
    if any(s < c for s, c in zip(a.shape, crop)):
        raise ConfigError(f"volume {a.shape} smaller than crop {crop}")
    starts = [int(rng.integers(0, s - c + 1)) for s, c in zip(a.shape, crop)]
    sl = tuple(slice(s, s + c) for s, c in zip(starts, crop))
    return a[sl]


def _sample_refs(d, n, rng):
    return sample_reference_indices(d, n, "random", rng) if n > 0 else []


def _prepare(state, volume):
    cfg = state.config
    gt = random_crop(volume, cfg.crop, state.rng)
    return gt, downsample_depth(gt, cfg.r)


# ---------------------------------------------------------------- steps

def train_step_stage1(state, volume):
    """One stage-1 update on a random crop / view / reference draw."""
    if state.stage != 1:
        raise StateError("train_step_stage1 called in stage 2")
    cfg = state.config
    rng = state.rng
    gt, lr_vol = _prepare(state, volume)
    view = VIEWS[int(rng.integers(0, 2))]
    n_slices = gt.shape[1] if view == "coronal" else gt.shape[2]
    if 0 < cfg.slices_per_step < n_slices:
        idx = np.sort(rng.choice(n_slices, size=cfg.slices_per_step, replace=False))
    else:
        idx = np.arange(n_slices)
    refs = _sample_refs(lr_vol.shape[0], cfg.n_refs, rng)

    names = state.params.reconstruction_names()
    state.params.set_requires_grad(names, True)
    state.params.set_requires_grad(state.params.fusion_names(), False)
    net = cfg.net()
    ref_levels = encode_references(lr_vol[refs], state.params, net.max_ref_keys) if refs else None
    pred, _ = reconstruct_slices(through_plane_slices(lr_vol, view, idx), ref_levels,
                                 state.params, net, cfg.r)
    loss = T.l1_loss(pred, Tensor(through_plane_slices(gt, view, idx)))
    loss.backward()
    _apply_update(state, names)
    state.steps[1] += 1
    return state, {"step": state.steps[1] - 1, "stage": 1, "loss": loss.item(),
                   "view": view, "refs": refs}


def reconstruct_both(params, config, lr_vol, refs):
    """Coronal and sagittal reconstructions sharing one reference encoding."""
    net = config.net()
    with T.no_grad():
        ref_levels = encode_references(lr_vol[list(refs)], params, net.max_ref_keys) if refs else None
    v_cor = reconstruct_view(lr_vol, "coronal", refs, config.r, params, net, ref_levels=ref_levels)
    v_sag = reconstruct_view(lr_vol, "sagittal", refs, config.r, params, net, ref_levels=ref_levels)
    return v_cor, v_sag


def train_step_stage2(state, volume):
    """One fusion-network update with the reconstruction weights frozen."""
    state.enter_stage2()
    cfg = state.config
    gt, lr_vol = _prepare(state, volume)
    refs = _sample_refs(lr_vol.shape[0], cfg.n_refs, state.rng)
    v_cor, v_sag = reconstruct_both(state.params, cfg, lr_vol, refs)

    names = state.params.fusion_names()
    state.params.set_requires_grad(state.params.reconstruction_names(), False)
    state.params.set_requires_grad(names, True)
    fused = residual_fuse(v_cor, v_sag, state.params)
    loss = loss_fuse(gt, fused)
    loss.backward()
    _apply_update(state, names)
    state.steps[2] += 1
    return state, {"step": state.steps[2] - 1, "stage": 2, "loss": loss.item(), "refs": refs}


# ---------------------------------------------------------------- inference

def infer_volume(params, config, v_lr, n_refs=None, mode="uniform", seed=0, return_relevance=False):
    """Full pipeline on a sparse volume: both views, then residual fusion."""
    a = np.asarray(_voxels(v_lr), dtype=np.float64)
    n = config.n_refs if n_refs is None else n_refs
    refs = sample_reference_indices(a.shape[0], n, mode, seed) if n > 0 else []
    net = config.net()
    with T.no_grad():
        ref_levels = encode_references(a[refs], params, net.max_ref_keys) if refs else None
        out = {}
        rel = {}
        for view in VIEWS:
            out[view], rel[view] = reconstruct_view(a, view, refs, config.r, params, net,
                                                    ref_levels=ref_levels, return_relevance=True)
        fused = residual_fuse(out["coronal"], out["sagittal"], params).data
    result = {"fused": fused, "coronal": out["coronal"], "sagittal": out["sagittal"], "refs": refs}
    if return_relevance:
        result["relevance"] = rel
    return result


def evaluate_trans_loss(params, config, volume, mode="uniform", seed=0):
    """L_trans over the full volume (both views, every slice)."""
    gt = _voxels(volume)
    lr_vol = downsample_depth(gt, config.r)
    refs = sample_reference_indices(lr_vol.shape[0], config.n_refs, mode, seed) if config.n_refs else []
    v_cor, v_sag = reconstruct_both(params, config, lr_vol, refs)
    with T.no_grad():
        return loss_trans(gt, v_cor, v_sag).item()


def expected_trans_loss(params, config, volume, max_subsets=8):
    """L_trans averaged over the reference subsets the training sampler draws.

    Enumerates every N-subset of the sparse slices (up to ``max_subsets``,
    evenly spaced in lexicographic order), so the score is deterministic and
    matches the training distribution instead of one fixed placement.
    """
    gt = _voxels(volume)
    lr_vol = downsample_depth(gt, config.r)
    d = lr_vol.shape[0]
    subsets = [list(c) for c in itertools.combinations(range(d), config.n_refs)]
    if len(subsets) > max_subsets:
        pick = np.linspace(0, len(subsets) - 1, max_subsets).round().astype(int)
        subsets = [subsets[i] for i in pick]
    total = 0.0
    for refs in subsets:
        v_cor, v_sag = reconstruct_both(params, config, lr_vol, refs)
        with T.no_grad():
            total += loss_trans(gt, v_cor, v_sag).item()
    return total / len(subsets)


# ---------------------------------------------------------------- persistence

def _blob_name(name):
    return name.replace("/", "_") + ".bin"


def save_checkpoint(path, state):
    """Directory checkpoint: manifest.json + one raw little-endian f64 blob per array."""
    path = Path(path)
    blobs = path / "blobs"
    blobs.mkdir(parents=True, exist_ok=True)
    entries = []

    def put(key, arr, kind, group):
        fname = _blob_name(key)
        (blobs / fname).write_bytes(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        entries.append({"name": key, "kind": kind, "group": group,
                        "shape": list(arr.shape), "file": f"blobs/{fname}"})

    for name, p in state.params.items():
        put(name, p.data, "param", state.params.group_of(name))
    for name, (m, v) in sorted(state.moments.items()):
        put(f"adam_m.{name}", m, "adam_m", state.params.group_of(name))
        put(f"adam_v.{name}", v, "adam_v", state.params.group_of(name))
    keep = {e["file"].split("/")[1] for e in entries}
    for stale in blobs.iterdir():
        if stale.name not in keep:
            stale.unlink()
    manifest = {
        "format": "xviewsr-checkpoint/1",
        "config_hash": state.config.fingerprint(),
        # output locations are left out so a checkpoint is relocatable
        "config": {k: v for k, v in state.config.to_dict().items() if k not in ("checkpoint", "log")},
        "stage": state.stage,
        "steps": {str(k): v for k, v in state.steps.items()},
        "rng_state": state.rng.bit_generator.state,
        "tensors": entries,
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_checkpoint(path, config=None):
    """Rebuild a TrainState. With ``config`` given, its fingerprint must match."""
    path = Path(path)
    mf = path / "manifest.json"
    if not mf.exists():
        raise StateError(f"no checkpoint at {path}")
    manifest = json.loads(mf.read_text())
    stored = ExperimentConfig.from_dict(manifest["config"])
    if config is not None and config.fingerprint() != manifest["config_hash"]:
        raise ConfigError(f"config hash {config.fingerprint()} does not match checkpoint "
                          f"{manifest['config_hash']}")
    config = config or stored
    params = ModelParams()
    moments_m, moments_v = {}, {}
    for e in manifest["tensors"]:
        arr = np.frombuffer((path / e["file"]).read_bytes(), dtype="<f8").astype(np.float64)
        arr = arr.reshape(e["shape"])
        if e["kind"] == "param":
            params[e["name"]] = Tensor(arr, requires_grad=True)
        elif e["kind"] == "adam_m":
            moments_m[e["name"][len("adam_m."):]] = arr
        else:
            moments_v[e["name"][len("adam_v."):]] = arr
    rng = np.random.default_rng()
    rng.bit_generator.state = manifest["rng_state"]
    moments = {k: (moments_m[k], moments_v[k]) for k in moments_m}
    steps = {int(k): v for k, v in manifest["steps"].items()}
    return TrainState(params, config, rng, manifest["stage"], steps, moments)


def checkpoint_hash(path):
    """SHA-256 over the manifest and every blob, in sorted order."""
    path = Path(path)
    h = hashlib.sha256()
    files = [path / "manifest.json"] + sorted((path / "blobs").iterdir())
    for f in files:
        h.update(f.name.encode())
        h.update(f.read_bytes())
    return h.hexdigest()


class MetricLog:
    """Append-only CSV of per-step losses."""

    def __init__(self, path, config, truncate=False):
        self.path = Path(path)
        self.config = config
        self.path.parent.mkdir(parents=True, exist_ok=True)
        if truncate or not self.path.exists():
            with self.path.open("w", newline="") as fh:
                csv.writer(fh).writerow(LOG_FIELDS)

    def append(self, metrics):
        with self.path.open("a", newline="") as fh:
            csv.writer(fh).writerow([metrics["step"], metrics["stage"], repr(float(metrics["loss"])),
                                     repr(self.config.lr), self.config.seed,
                                     self.config.fingerprint()])


def read_metric_log(path):
    with Path(path).open(newline="") as fh:
        return [dict(row) for row in csv.DictReader(fh)]


# ---------------------------------------------------------------- driver

def training_volume(config):
    if config.volume_path:
        v = load_avol(config.volume_path)
        return normalize_hu(v) if v.intensity_domain == "raw_hu" else v
    return generate_phantom(config.phantom_kind, *config.phantom_dims, seed=config.phantom_seed)


def run_stage(state, volume, n_steps, metric_log=None, callback=None):
    """Run ``n_steps`` updates of the state's current stage."""
    step = train_step_stage1 if state.stage == 1 else train_step_stage2
    history = []
    for _ in range(n_steps):
        state, metrics = step(state, volume)
        history.append(metrics)
        if metric_log is not None:
            metric_log.append(metrics)
        if callback is not None:
            callback(metrics)
        log.debug("stage %d step %d loss %.6g", metrics["stage"], metrics["step"], metrics["loss"])
    return state, history


def train(config, stage=1, resume=False, steps=None, checkpoint=None, log_path=None, volume=None):
    """Checkpointed training driver used by the CLI.

    Stage 1 starts fresh unless ``resume``; stage 2 always loads the
    checkpoint written by stage 1. ``steps`` defaults to the remaining
    budget of the stage.
    """
    checkpoint = Path(checkpoint or config.checkpoint)
    log_path = Path(log_path or config.log)
    volume = training_volume(config) if volume is None else volume
    if stage == 1 and not resume:
        state = TrainState.fresh(config)
        metric_log = MetricLog(log_path, config, truncate=True)
    else:
        if not (checkpoint / "manifest.json").exists():
            raise StateError(f"stage {stage}{' resume' if resume else ''} needs a checkpoint at {checkpoint}")
        state = load_checkpoint(checkpoint, config)
        if stage == 1 and state.stage == 2:
            raise StateError("checkpoint is already in stage 2; cannot resume stage 1")
        if stage == 2:
            if state.stage == 2 and not resume:
                state.steps[2] = 0
                state.moments = {}
            state.enter_stage2()
        metric_log = MetricLog(log_path, config)
    budget = config.stage1_steps if stage == 1 else config.stage2_steps
    n = max(0, budget - state.steps[stage]) if steps is None else steps
    state, history = run_stage(state, volume, n, metric_log)
    save_checkpoint(checkpoint, state)
    return state, history
