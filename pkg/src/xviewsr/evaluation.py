"""PSNR / per-view SSIM, classical depth interpolation, and CSV reports."""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .exceptions import DimensionError
from .volume import PLANES, dense_depth, foreground_mask, save_avol

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
K1, K2 = 0.01, 0.03


def _arr(v):
    return np.asarray(getattr(v, "voxels", v), dtype=np.float64)


def _same_shape(a, b):
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch: {a.shape} vs {b.shape}")


def psnr(ref, test, data_range=1.0, mask=None):
    """Peak signal-to-noise ratio in dB; ``inf`` when the inputs are identical."""
    a, b = _arr(ref), _arr(test)
    _same_shape(a, b)
    d = a - b
    if mask is not None:
        d = d[mask]
    mse = float(np.mean(d * d))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(data_range ** 2 / mse)


def gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    g /= g.sum()
    return np.outer(g, g)


def _filter_valid(img, win):
    views = np.lib.stride_tricks.sliding_window_view(img, win.shape)
    return np.tensordot(views, win, axes=([2, 3], [0, 1]))


def ssim_2d(ref, test, data_range=1.0):
    """Mean SSIM over all fully contained 11x11 Gaussian windows."""
    a, b = np.asarray(ref, dtype=np.float64), np.asarray(test, dtype=np.float64)
    _same_shape(a, b)
    if min(a.shape) < SSIM_WINDOW:
        raise ValueError(f"slice {a.shape} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    win = gaussian_window()
    c1 = (K1 * data_range) ** 2
    c2 = (K2 * data_range) ** 2
    mu_a = _filter_valid(a, win)
    mu_b = _filter_valid(b, win)
    s_aa = _filter_valid(a * a, win) - mu_a * mu_a
    s_bb = _filter_valid(b * b, win) - mu_b * mu_b
    s_ab = _filter_valid(a * b, win) - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * s_ab + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (s_aa + s_bb + c2)
    return float(np.mean(num / den))


def ssim_view(ref, test, plane, data_range=1.0, indices=None):
    """Mean 2-D SSIM over the slices of one plane."""
    a, b = _arr(ref), _arr(test)
    _same_shape(a, b)
    axis = PLANES.index(plane)
    idx = range(a.shape[axis]) if indices is None else indices
    vals = [ssim_2d(np.take(a, i, axis=axis), np.take(b, i, axis=axis), data_range) for i in idx]
    if not vals:
        return math.nan
    return float(np.mean(vals))


def baseline_interpolate(v_lr, r, kind="linear"):
    """Depth-only interpolation to r(d-1)+1 slices; retained slices are copied."""
    a = _arr(v_lr)
    d = a.shape[0]
    z = np.arange(dense_depth(d, r))
    lo = np.minimum(z // r, d - 2)
    rem = z - lo * r
    if kind == "nearest":
        src = np.where(2 * rem <= r, lo, lo + 1)
        out = a[src]
    elif kind == "linear":
        t = (rem / r)[:, None, None]
        out = a[lo] * (1.0 - t) + a[lo + 1] * t
    elif kind == "cubic":
        t = (rem / r)[:, None, None]
        p0 = a[np.maximum(lo - 1, 0)]
        p1 = a[lo]
        p2 = a[lo + 1]
        p3 = a[np.minimum(lo + 2, d - 1)]
        out = 0.5 * (2.0 * p1 + (p2 - p0) * t + (2.0 * p0 - 5.0 * p1 + 4.0 * p2 - p3) * t ** 2
                     + (3.0 * p1 - p0 - 3.0 * p2 + p3) * t ** 3)
    else:
        raise ValueError(f"unknown interpolation kind {kind!r}")
    out = np.array(out)
    out[::r] = a
    return out


@dataclass
class MetricReport:
    method: str
    volume_id: str
    r: int
    N: int
    psnr_db: float
    ssim_a: float
    ssim_c: float
    ssim_s: float
    wall_time_s: float = 0.0
    config_hash: str = ""

    @property
    def psnr_infinite(self):
        return math.isinf(self.psnr_db)


REPORT_FIELDS = tuple(f.name for f in fields(MetricReport))


def evaluate(outputs, ground_truth, r, n_refs=0, volume_id="vol0", foreground=False, tau=0.05,
             exclude_retained=False, wall_times=None, config_hash="", dump_dir=None):
    """Score each method's dense volume against the ground truth.

    With ``foreground`` on, coronal rows / sagittal columns whose mean is
    below ``tau`` are dropped from their view's SSIM and from PSNR.
    ``exclude_retained`` drops slices z = 0, r, 2r, ... from PSNR and axial SSIM.
    """
    gt = _arr(ground_truth)
    wall_times = wall_times or {}
    rows_idx, cols_idx = (foreground_mask(gt, tau) if foreground
                          else (list(range(gt.shape[1])), list(range(gt.shape[2]))))
    z_idx = [z for z in range(gt.shape[0]) if not (exclude_retained and z % r == 0)]
    mask = np.zeros(gt.shape, dtype=bool)
    mask[np.ix_(z_idx, rows_idx, cols_idx)] = True
    reports = []
    for name, vol in outputs.items():
        pred = _arr(vol)
        _same_shape(gt, pred)
        reports.append(MetricReport(
            method=name, volume_id=volume_id, r=int(r), N=int(n_refs),
            psnr_db=psnr(gt, pred, mask=mask),
            ssim_a=ssim_view(gt, pred, "axial", indices=z_idx),
            ssim_c=ssim_view(gt, pred, "coronal", indices=rows_idx),
            ssim_s=ssim_view(gt, pred, "sagittal", indices=cols_idx),
            wall_time_s=float(wall_times.get(name, 0.0)),
            config_hash=config_hash,
        ))
        if dump_dir is not None:
            save_avol(Path(dump_dir) / f"{volume_id}_{name}.avol", pred, config_hash=config_hash)
    return reports


def write_report_csv(path, reports):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(REPORT_FIELDS)
        for rep in reports:
            row = asdict(rep)
            w.writerow([repr(v) if isinstance(v, float) else v for v in (row[k] for k in REPORT_FIELDS)])
    return path


def read_report_csv(path):
    casts = {f.name: f.type for f in fields(MetricReport)}
    conv = {"int": int, "float": float, "str": str}
    out = []
    with Path(path).open(newline="") as fh:
        for row in csv.DictReader(fh):
            out.append(MetricReport(**{k: conv[casts[k]](row[k]) for k in REPORT_FIELDS}))
    return out


def format_report(reports):
    lines = [f"{'method':<12} {'volume':<8} {'psnr_db':>9} {'ssim_a':>8} {'ssim_c':>8} {'ssim_s':>8}"]
    for rep in reports:
        p = "inf" if rep.psnr_infinite else f"{rep.psnr_db:.3f}"
        lines.append(f"{rep.method:<12} {rep.volume_id:<8} {p:>9} {rep.ssim_a:8.4f} "
                     f"{rep.ssim_c:8.4f} {rep.ssim_s:8.4f}")
    return "\n".join(lines)
