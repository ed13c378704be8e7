"""Anisotropic volume model and the slice-sampling protocol.

Voxels are indexed (z, y, x). Axial slices fix z, coronal slices fix y,
sagittal slices fix x.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import DimensionError, ProtocolError

PLANES = ("axial", "coronal", "sagittal")
_PLANE_AXIS = {"axial": 0, "coronal": 1, "sagittal": 2}
DOMAINS = ("raw_hu", "normalized")


@dataclass
class Volume:
    voxels: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    intensity_domain: str = "normalized"
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.voxels = np.ascontiguousarray(self.voxels, dtype=np.float64)
        if self.voxels.ndim != 3:
            raise DimensionError(f"volume must be 3-D, got shape {self.voxels.shape}")
        if self.voxels.shape[0] < 2:
            raise DimensionError("volume depth must be >= 2")
        if self.intensity_domain not in DOMAINS:
            raise ValueError(f"unknown intensity domain {self.intensity_domain!r}")
        self.spacing = tuple(float(s) for s in self.spacing)

    @property
    def shape(self):
        return self.voxels.shape

    @property
    def depth(self):
        return self.voxels.shape[0]

    def with_voxels(self, voxels, spacing=None, intensity_domain=None):
        return Volume(voxels, self.spacing if spacing is None else spacing,
                      self.intensity_domain if intensity_domain is None else intensity_domain)


@dataclass
class ViewSlice:
    plane: str
    index: int
    pixels: np.ndarray


@dataclass
class ReferenceSet:
    indices: list
    slices: list

    def __post_init__(self):
        if any(b <= a for a, b in zip(self.indices, self.indices[1:])):
            raise ValueError("reference indices must be strictly increasing")


def _as_array(v):
    return v.voxels if isinstance(v, Volume) else np.asarray(v, dtype=np.float64)


def _wrap(like, voxels, spacing=None, domain=None):
    if isinstance(like, Volume):
        return like.with_voxels(voxels, spacing, domain)
    return voxels


def normalize_hu(v, lo=-1024.0, hi=3071.0):
    """Clip to [lo, hi] HU and map affinely onto [0, 1]."""
    if lo >= hi:
        raise ValueError(f"normalize_hu needs lo < hi, got {lo} >= {hi}")
    a = _as_array(v)
    out = (np.clip(a, lo, hi) - lo) / (hi - lo)
    return _wrap(v, out, domain="normalized")


def dense_depth(d, r):
    """Slice count of the dense grid for ``d`` sparse slices at ratio ``r``."""
    return r * (d - 1) + 1


def downsample_depth(v, r):
    """Keep axial slices 0, r, 2r, ... ; requires (D - 1) % r == 0."""
    a = _as_array(v)
    if r < 1:
        raise ValueError("sampling ratio must be >= 1")
    if (a.shape[0] - 1) % r:
        raise ProtocolError(f"depth {a.shape[0]} is not of the form r*(d-1)+1 for r={r}; crop first")
    out = a[::r].copy()
    spacing = None
    if isinstance(v, Volume):
        dz, dy, dx = v.spacing
        spacing = (dz * r, dy, dx)
    return _wrap(v, out, spacing)


def upsample_depth_linear(v, r):
    """Linear interpolation along depth to r*(d-1)+1 slices; retained slices are copied."""
    a = _as_array(v)
    if r < 1:
        raise ValueError("sampling ratio must be >= 1")
    out = lerp_depth(a, r)
    spacing = None
    if isinstance(v, Volume):
        dz, dy, dx = v.spacing
        spacing = (dz / r, dy, dx)
    return _wrap(v, out, spacing)


def lerp_depth(a, r):
    """Linear depth upsampling of any array whose first axis is depth."""
    d = a.shape[0]
    if r == 1:
        return a.copy()
    z = np.arange(dense_depth(d, r))
    lo = np.minimum(z // r, d - 2)
    t = ((z - lo * r) / r).reshape((-1,) + (1,) * (a.ndim - 1))
    out = a[lo] * (1.0 - t) + a[lo + 1] * t
    out[::r] = a
    return out


def extract_view(v, plane, index):
    a = _as_array(v)
    if plane not in _PLANE_AXIS:
        raise ValueError(f"unknown plane {plane!r}")
    axis = _PLANE_AXIS[plane]
    n = a.shape[axis]
    if not 0 <= index < n:
        raise IndexError(f"{plane} index {index} outside [0, {n})")
    return ViewSlice(plane, int(index), np.take(a, index, axis=axis))


def stack_views(slices, plane):
    """Inverse of extracting every slice of ``plane`` in index order."""
    return np.stack([s.pixels if isinstance(s, ViewSlice) else s for s in slices],
                    axis=_PLANE_AXIS[plane])


def plane_extent(shape, plane):
    return shape[_PLANE_AXIS[plane]]


def foreground_mask(v, tau=0.05):
    """Through-plane indices whose slice mean exceeds ``tau``.

    Returns ``(coronal_rows, sagittal_columns)``.
    """
    a = _as_array(v)
    rows = np.flatnonzero(a.mean(axis=(0, 2)) > tau)
    cols = np.flatnonzero(a.mean(axis=(0, 1)) > tau)
    return rows.tolist(), cols.tolist()


def sample_reference_indices(d, n, mode="uniform", seed=None):
    """Pick ``n`` axial reference indices out of ``d`` slices.

    Uniform mode spreads indices with both endpoints included (n == 1 picks
    the middle slice). Random mode draws without replacement; ``seed`` may be
    an int or a ``numpy.random.Generator``.
    """
    if n < 1 or n > d:
        raise ValueError(f"need 1 <= N <= d, got N={n}, d={d}")
    if mode == "uniform":
        if n == 1:
            return [d // 2]
        return [int(np.floor(k * (d - 1) / (n - 1) + 0.5)) for k in range(n)]
    if mode == "random":
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        return sorted(int(i) for i in rng.choice(d, size=n, replace=False))
    raise ValueError(f"unknown reference sampling mode {mode!r}")


def reference_set(v, indices):
    a = _as_array(v)
    return ReferenceSet(list(indices), [extract_view(a, "axial", i) for i in indices])


def _smoothstep(x, width):
    return 1.0 / (1.0 + np.exp(-x / width))


def generate_phantom(kind, depth, height, width, seed=0):
    """Deterministic synthetic volume in [0, 1] with cross-plane texture."""
    if min(depth, height, width) < 8:
        raise ValueError("phantom extents must be >= 8")
    rng = np.random.default_rng(seed)
    z, y, x = np.meshgrid(np.linspace(0, 1, depth), np.linspace(0, 1, height),
                          np.linspace(0, 1, width), indexing="ij")
    # scale so texture frequency is isotropic in voxel units
    z = z * (depth - 1) / 16.0
    y = y * (height - 1) / 16.0
    x = x * (width - 1) / 16.0
    if kind == "spheres":
        vol = np.full(z.shape, 0.08)
        for _ in range(5):
            c = rng.uniform(0.2, 0.8, 3) * np.array([z.max(), y.max(), x.max()])
            radii = rng.uniform(0.2, 0.45, 3)
            g = rng.normal(size=3)
            rho = np.sqrt(((z - c[0]) / radii[0]) ** 2 + ((y - c[1]) / radii[1]) ** 2
                          + ((x - c[2]) / radii[2]) ** 2)
            inside = _smoothstep(1.0 - rho, 0.04)
            grade = 0.45 + 0.25 * np.tanh(g[0] * (z - c[0]) + g[1] * (y - c[1]) + g[2] * (x - c[2]))
            freq = rng.uniform(9.0, 14.0)
            texture = 0.12 * np.sin(2 * np.pi * freq * (z + y + x) / 3.0 + rng.uniform(0, 2 * np.pi))
            vol = np.maximum(vol, inside * (grade + texture))
    elif kind == "bands":
        vol = np.full(z.shape, 0.5)
        for k in range(3):
            direction = rng.normal(size=3)
            direction /= np.linalg.norm(direction)
            freq = rng.uniform(2.0, 5.0) * (k + 1)
            phase = rng.uniform(0, 2 * np.pi)
            amp = 0.2 / (k + 1)
            vol += amp * np.sin(2 * np.pi * freq * (direction[0] * z + direction[1] * y
                                                    + direction[2] * x) + phase)
        envelope = 0.75 + 0.25 * np.cos(2 * np.pi * (y + x) / 2.0)
        vol = 0.5 + (vol - 0.5) * envelope
    elif kind == "checker":
        size = rng.uniform(0.12, 0.22)
        phase = rng.uniform(0, 1, 3)
        s = (np.sin(np.pi * (z / size + phase[0])) * np.sin(np.pi * (y / size + phase[1]))
             * np.sin(np.pi * (x / size + phase[2])))
        vol = 0.5 + 0.4 * np.tanh(4.0 * s)
    else:
        raise ValueError(f"unknown phantom kind {kind!r}")
    vol = np.clip(vol, 0.0, 1.0)
    return Volume(vol, (1.0, 1.0, 1.0), "normalized", {"phantom": kind, "seed": int(seed)})


# ---------------------------------------------------------------- AVOL files

def _avol_paths(path):
    path = Path(path)
    return path, path.with_name(path.name + ".json")


def save_avol(path, v, **extra):
    """Write raw little-endian f64 voxels (z-major) plus a JSON sidecar."""
    a = _as_array(v)
    if a.ndim != 3:
        raise DimensionError("AVOL stores 3-D arrays")
    raw, side = _avol_paths(path)
    raw.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "depth": int(a.shape[0]),
        "height": int(a.shape[1]),
        "width": int(a.shape[2]),
        "spacing": list(v.spacing) if isinstance(v, Volume) else [1.0, 1.0, 1.0],
        "intensity_domain": v.intensity_domain if isinstance(v, Volume) else "normalized",
        "dtype": "f64",
        "byte_order": "little",
    }
    header.update(extra)
    raw.write_bytes(np.ascontiguousarray(a, dtype="<f8").tobytes())
    side.write_text(json.dumps(header, indent=2, sort_keys=True) + "\n")
    return raw


def read_avol_header(path):
    return json.loads(_avol_paths(path)[1].read_text())


def load_avol_array(path):
    """Raw array and header, without the Volume depth constraint."""
    raw, side = _avol_paths(path)
    header = json.loads(side.read_text())
    if header.get("dtype") != "f64" or header.get("byte_order") != "little":
        raise ValueError(f"unsupported AVOL encoding in {side}")
    shape = (header["depth"], header["height"], header["width"])
    a = np.frombuffer(raw.read_bytes(), dtype="<f8")
    if a.size != int(np.prod(shape)):
        raise DimensionError(f"{raw}: {a.size} values, header says {shape}")
    return a.reshape(shape).copy(), header


def load_avol(path):
    raw, side = _avol_paths(path)
    header = json.loads(side.read_text())
    if header.get("dtype") != "f64" or header.get("byte_order") != "little":
        raise ValueError(f"unsupported AVOL encoding in {side}")
    shape = (header["depth"], header["height"], header["width"])
    a = np.frombuffer(raw.read_bytes(), dtype="<f8")
    if a.size != int(np.prod(shape)):
        raise DimensionError(f"{raw}: {a.size} values, header says {shape}")
    extra = {k: v for k, v in header.items()
             if k not in {"depth", "height", "width", "spacing", "intensity_domain", "dtype", "byte_order"}}
    return Volume(a.reshape(shape).astype(np.float64), header["spacing"], header["intensity_domain"], extra)
