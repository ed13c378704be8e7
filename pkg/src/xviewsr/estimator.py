"""scikit-learn style front end.

``CrossViewInterpolator.fit`` takes densely sampled volumes and trains on
synthetic sparse/dense pairs; ``predict`` maps a sparse volume (d slices) to
a dense one (r(d-1)+1 slices).
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import check_dense_depth, check_volume, check_volumes
from .config import ExperimentConfig
from .evaluation import baseline_interpolate, psnr
from .training import TrainState, infer_volume, run_stage


class CrossViewInterpolator(BaseEstimator):
    """Slice interpolator with multi-reference cross-view texture transfer.

    Parameters
    ----------
    r : int
        Slice sampling ratio between the sparse input and the dense output.
    n_refs : int
        Axial reference slices per reconstruction; 0 disables attention.
    relevance_fusion : bool
        Weight references per query point; False averages them.
    learning_rate : float
        Adam step size used in both training stages.
    stage1_steps, stage2_steps : int
        Updates for the view reconstruction network and for the fusion network.
    reference_mode : {"uniform", "random"}
        How references are placed at prediction time.
    """

    def __init__(self, r=5, n_refs=3, crop=(16, 16, 16), base_width=8, fusion_width=8,
                 relevance_fusion=True, learning_rate=1e-4, stage1_steps=200, stage2_steps=100,
                 slices_per_step=0, reference_mode="uniform", key_block=None, random_state=0):
        self.r = r
        self.n_refs = n_refs
        self.crop = crop
        self.base_width = base_width
        self.fusion_width = fusion_width
        self.relevance_fusion = relevance_fusion
        self.learning_rate = learning_rate
        self.stage1_steps = stage1_steps
        self.stage2_steps = stage2_steps
        self.slices_per_step = slices_per_step
        self.reference_mode = reference_mode
        self.key_block = key_block
        self.random_state = random_state

    def _make_config(self):
        crop = tuple(self.crop)
        return ExperimentConfig(
            r=self.r, n_refs=self.n_refs, crop=crop, base_width=self.base_width,
            fusion_width=self.fusion_width, lr=self.learning_rate,
            stage1_steps=self.stage1_steps, stage2_steps=self.stage2_steps,
            seed=int(self.random_state or 0), relevance_fusion=self.relevance_fusion,
            slices_per_step=self.slices_per_step, phantom_dims=crop, key_block=self.key_block,
        )

    def fit(self, X, y=None):
        """Train on dense volumes ``X`` (one array, a 4-D stack, or a list)."""
        volumes = check_volumes(X)
        config = self._make_config()
        for v in volumes:
            if any(s < c for s, c in zip(v.shape, config.crop)):
                raise ValueError(f"volume {v.shape} smaller than crop {config.crop}")
        state = TrainState.fresh(config)
        self.history_ = []
        pick = _volume_picker(volumes, state.rng)
        for stage, n in ((1, config.stage1_steps), (2, config.stage2_steps)):
            if stage == 2:
                state.enter_stage2()
            for _ in range(n):
                state, hist = run_stage(state, pick(), 1)
                self.history_.extend(hist)
        self.state_ = state
        self.config_ = config
        return self

    def predict_views(self, X, seed=0):
        """Coronal, sagittal and fused reconstructions plus the reference indices."""
        check_is_fitted(self)
        X = check_volume(X)
        return infer_volume(self.state_.params, self.config_, X, self.n_refs,
                            self.reference_mode, seed)

    def predict(self, X):
        return self.predict_views(X)["fused"]

    def score(self, X, y):
        """PSNR (dB) of the prediction for sparse ``X`` against dense ``y``."""
        y = check_volume(y, "y")
        return psnr(y, self.predict(X))


def _volume_picker(volumes, rng):
    if len(volumes) == 1:
        return lambda: volumes[0]
    return lambda: volumes[int(rng.integers(0, len(volumes)))]


class DepthInterpolator(BaseEstimator):
    """Classical per-column interpolation along depth (nearest, linear, cubic)."""

    def __init__(self, r=5, kind="linear"):
        self.r = r
        self.kind = kind

    def fit(self, X=None, y=None):
        if self.kind not in ("nearest", "linear", "cubic"):
            raise ValueError(f"unknown kind {self.kind!r}")
        return self

    def __sklearn_is_fitted__(self):
        return True

    def predict(self, X):
        X = check_volume(X)
        return baseline_interpolate(X, self.r, self.kind)

    def score(self, X, y):
        y = check_volume(y, "y")
        check_dense_depth(y.shape[0], self.r)
        return psnr(y, self.predict(X))


def sparse_from_dense(X, r):
    """Decimate a dense volume along depth (keeps z = 0, r, 2r, ...)."""
    X = check_volume(X)
    check_dense_depth(X.shape[0], r)
    return np.ascontiguousarray(X[::r])
