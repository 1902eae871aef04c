"""Sentinel-1/2 value transforms, the synthetic triplet generator, proxy
cloud masks, splitting, and the on-disk dataset layout.

Dataset layout (version 1)::

    <root>/manifest.tsv        # "# dbcr-dataset v1 ..." header, one row per scene
    <root>/splits.tsv          # scene_id<TAB>split
    <root>/<scene_id>/x0.f32   # little-endian float32, C_opt x H x W
    <root>/<scene_id>/y.f32
    <root>/<scene_id>/z.f32    # C_sar x H x W
    <root>/<scene_id>/opacity.f32  # H x W, synthetic scenes only
    <root>/<scene_id>/meta.json
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy import ndimage

DATASET_VERSION = 1
MANIFEST_HEADER = f"# dbcr-dataset v{DATASET_VERSION}"
S2_MAX = 10000.0
VV_RANGE = (-25.0, 0.0)
VH_RANGE = (-32.5, 0.0)
VISIBLE_BANDS = (1, 2, 3)  # Sentinel-2 B2/B3/B4 in the 13-band stack
RGB_BANDS = (3, 2, 1)


@dataclass
class ImageTriplet:
    x0: np.ndarray
    y: np.ndarray
    z: np.ndarray
    scene_id: str = ""
    cloud_fraction: float = 0.0
    opacity: Optional[np.ndarray] = None  # known cloud opacity (synthetic scenes only)

    def __post_init__(self):
        if self.x0.shape != self.y.shape:
            raise ValueError(f"x0 {self.x0.shape} and y {self.y.shape} differ in shape")
        if self.z.shape[1:] != self.x0.shape[1:]:
            raise ValueError(f"SAR {self.z.shape} not spatially aligned with optical {self.x0.shape}")


@dataclass
class SyntheticSceneParams:
    seed: int = 0
    H: int = 64
    W: int = 64
    channels: int = 13
    terrain_octaves: int = 4
    cloud_opacity_range: tuple[float, float] = (0.6, 1.0)
    cloud_coverage_target: float = 0.5
    sar_noise_level: float = 0.15

    def validate(self):
        for name in ("H", "W"):
            v = getattr(self, name)
            if v < 16 or v & (v - 1):
                raise ValueError(f"{name} must be a power of two >= 16, got {v}")
        if self.channels < 1:
            raise ValueError("channels must be positive")
        if self.terrain_octaves < 1:
            raise ValueError("terrain_octaves must be >= 1")
        lo, hi = self.cloud_opacity_range
        if not 0.5 <= lo <= hi <= 1.0:
            raise ValueError("cloud_opacity_range must satisfy 0.5 <= lo <= hi <= 1")
        if not 0.0 <= self.cloud_coverage_target <= 1.0:
            raise ValueError("cloud_coverage_target must be in [0, 1]")
        if self.sar_noise_level < 0:
            raise ValueError("sar_noise_level must be >= 0")


def preprocess_s2(raw) -> np.ndarray:
    """Clip optical reflectance to [0, 10000] and scale to [0, 1]."""
    return np.clip(np.asarray(raw, dtype=np.float64), 0.0, S2_MAX) / S2_MAX


def _db_to_unit(band, lo):
    return (np.clip(np.asarray(band, dtype=np.float64), lo, 0.0) - lo) / -lo


def preprocess_s1(raw_vv, raw_vh) -> np.ndarray:
    """Clip VV to [-25, 0] and VH to [-32.5, 0] dB, shift and scale each to [0, 1]."""
    vv = _db_to_unit(raw_vv, VV_RANGE[0])
    vh = _db_to_unit(raw_vh, VH_RANGE[0])
    if vv.shape != vh.shape:
        raise ValueError(f"VV {vv.shape} and VH {vh.shape} differ in shape")
    return np.stack([vv, vh])


def _smooth_field(rng: np.random.Generator, H: int, W: int, octaves: int,
                  base: int = 4, persistence: float = 0.55) -> np.ndarray:
    out = np.zeros((H, W))
    amp, total = 1.0, 0.0
    for o in range(octaves):
        n = min(base * 2 ** o, H)
        coarse = rng.standard_normal((n, n))
        layer = ndimage.zoom(coarse, (H / n, W / n), order=3, mode="grid-wrap", grid_mode=True)
        out += amp * layer
        total += amp
        amp *= persistence
    out /= total
    return (out - out.mean()) / (out.std() + 1e-12)


def _normalize01(a: np.ndarray) -> np.ndarray:
    lo, hi = a.min(), a.max()
    return (a - lo) / (hi - lo + 1e-12)


def _band_profiles(channels: int) -> np.ndarray:
    # reflectance of (soil, vegetation, water) over a 13-band-like spectrum
    pos = np.linspace(0.0, 1.0, channels)
    soil = 0.12 + 0.25 * pos
    veg = 0.05 + 0.35 / (1.0 + np.exp(-(pos - 0.45) * 18.0)) - 0.15 * np.clip(pos - 0.75, 0, None)
    water = 0.08 * np.exp(-pos * 4.0) + 0.01
    return np.stack([soil, veg, water])


def _terrain(rng, p: SyntheticSceneParams) -> np.ndarray:
    elev = _smooth_field(rng, p.H, p.W, p.terrain_octaves)
    moist = _smooth_field(rng, p.H, p.W, p.terrain_octaves)
    detail = _smooth_field(rng, p.H, p.W, p.terrain_octaves + 2, base=8)
    # soft land-cover abundances from elevation and moisture
    logits = np.stack([elev - moist, moist + 0.3 * detail, -1.5 * elev - 0.8])
    logits *= 2.5
    w = np.exp(logits - logits.max(0))
    w /= w.sum(0)
    spectra = _band_profiles(p.channels)
    x0 = np.einsum("kc,khw->chw", spectra, w)
    x0 *= 1.0 + 0.15 * detail[None]
    # sparse linear features (roads/field borders) visible in every band
    lines = np.abs(_smooth_field(rng, p.H, p.W, 2, base=3)) < 0.06
    x0 = np.where(lines[None], x0 + 0.12, x0)
    return np.clip(x0, 0.0, 1.0)


def _cloud_field(rng, p: SyntheticSceneParams) -> np.ndarray:
    if p.cloud_coverage_target <= 0.0:
        return np.zeros((p.H, p.W))
    noise = _smooth_field(rng, p.H, p.W, 3, base=2, persistence=0.5)
    if p.cloud_coverage_target >= 1.0:
        q = noise.min() - 1.0
    else:
        q = np.quantile(noise, 1.0 - p.cloud_coverage_target)
    peak = rng.uniform(*p.cloud_opacity_range)
    softness = 0.6
    # m > 0.5 exactly where noise > q, so the mask fraction tracks the target
    return peak * np.clip(0.5 / peak + (noise - q) / softness, 0.0, 1.0)


def _sar(rng, x0: np.ndarray, p: SyntheticSceneParams) -> np.ndarray:
    mean = x0.mean(0)
    nir = x0[int(0.6 * (x0.shape[0] - 1))]
    gx = ndimage.sobel(mean, axis=1, mode="reflect")
    gy = ndimage.sobel(mean, axis=0, mode="reflect")
    edges = _normalize01(np.hypot(gx, gy))
    vv = 0.55 * _normalize01(mean) + 0.45 * edges
    vh = 0.6 * _normalize01(nir) + 0.4 * edges
    out = np.stack([vv, vh])
    if p.sar_noise_level > 0:
        shape_k = 1.0 / p.sar_noise_level ** 2
        out = out * rng.gamma(shape_k, 1.0 / shape_k, size=out.shape)
    return np.clip(out, 0.0, 1.0)


def generate_triplet(params: SyntheticSceneParams, scene_id: str | None = None) -> ImageTriplet:
    """Deterministic synthetic (x0, y, z) scene for a given seed.

    Terrain, cloud and SAR noise come from independent child streams of the
    seed, so ``z`` depends only on the terrain and the seed.
    """
    params.validate()
    terrain_rng, cloud_rng, sar_rng, color_rng = (
        np.random.default_rng(s) for s in np.random.SeedSequence(params.seed).spawn(4))

    x0 = _terrain(terrain_rng, params)
    m = _cloud_field(cloud_rng, params)
    # clouds are bright and slightly less reflective at long wavelengths
    pos = np.linspace(0.0, 1.0, params.channels)
    color = np.clip(0.92 - 0.25 * pos + color_rng.uniform(-0.03, 0.03, params.channels), 0, 1)
    blurred = ndimage.gaussian_filter(x0, sigma=(0, 1.5, 1.5), mode="reflect")
    under = (1.0 - m) * x0 + m * blurred
    y = (1.0 - m) * under + m * color[:, None, None]
    z = _sar(sar_rng, x0, params)

    return ImageTriplet(
        x0=x0.astype(np.float32), y=np.clip(y, 0, 1).astype(np.float32), z=z.astype(np.float32),
        scene_id=scene_id or f"scene_{params.seed:06d}",
        cloud_fraction=float((m > 0.5).mean()), opacity=m.astype(np.float32),
    )


def cloud_mask(y: np.ndarray, reference: Optional[ImageTriplet] = None, *,
               threshold: float = 0.6,
               visible_bands: Sequence[int] = VISIBLE_BANDS) -> tuple[np.ndarray, float]:
    """Binary cloud mask and its mean.

    A synthetic ``reference`` triplet carrying its opacity field gives the
    exact mask ``opacity > 0.5``; otherwise a pixel is cloudy when its mean
    visible-band value exceeds ``threshold``.
    """
    if reference is not None and reference.opacity is not None:
        mask = np.asarray(reference.opacity) > 0.5
    else:
        y = np.asarray(y)
        bands = [b for b in visible_bands if b < y.shape[0]] or list(range(y.shape[0]))
        mask = y[bands].mean(0) > threshold
    return mask, float(mask.mean())


def split_dataset(items: Sequence, ratios=(0.8, 0.1, 0.1), seed: int = 0):
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must be three nonnegative numbers summing to 1, got {ratios}")
    n = len(items)
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(round(ratios[0] * n))
    n_val = int(round(ratios[1] * n))
    n_val = min(n_val, n - n_train)
    idx = [order[:n_train], order[n_train:n_train + n_val], order[n_train + n_val:]]
    return tuple([items[i] for i in part] for part in idx)


# --------------------------------------------------------------------------
# on-disk format


def _write_f32(path: Path, a: np.ndarray):
    np.ascontiguousarray(a, dtype="<f4").tofile(path)


def _read_f32(path: Path, shape) -> np.ndarray:
    a = np.fromfile(path, dtype="<f4")
    if a.size != int(np.prod(shape)):
        raise OSError(f"{path}: expected {int(np.prod(shape))} values, found {a.size}")
    return a.reshape(shape).astype(np.float32)


def save_triplet(tri: ImageTriplet, root: Path, seed: Optional[int] = None) -> Path:
    d = Path(root) / tri.scene_id
    d.mkdir(parents=True, exist_ok=True)
    _write_f32(d / "x0.f32", tri.x0)
    _write_f32(d / "y.f32", tri.y)
    _write_f32(d / "z.f32", tri.z)
    if tri.opacity is not None:
        _write_f32(d / "opacity.f32", tri.opacity)
    meta = {
        "scene_id": tri.scene_id,
        "optical_shape": list(tri.x0.shape),
        "sar_shape": list(tri.z.shape),
        "dtype": "float32-le",
        "range": [0.0, 1.0],
        "cloud_fraction": tri.cloud_fraction,
        "seed": seed,
    }
    (d / "meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")
    return d


def load_triplet(root: Path, scene_id: str) -> ImageTriplet:
    d = Path(root) / scene_id
    try:
        meta = json.loads((d / "meta.json").read_text())
    except FileNotFoundError as e:
        raise OSError(f"missing scene metadata {d / 'meta.json'}") from e
    oshape, sshape = tuple(meta["optical_shape"]), tuple(meta["sar_shape"])
    opacity = None
    if (d / "opacity.f32").exists():
        opacity = _read_f32(d / "opacity.f32", oshape[1:])
    return ImageTriplet(
        x0=_read_f32(d / "x0.f32", oshape), y=_read_f32(d / "y.f32", oshape),
        z=_read_f32(d / "z.f32", sshape), scene_id=meta["scene_id"],
        cloud_fraction=float(meta["cloud_fraction"]), opacity=opacity,
    )


@dataclass
class DatasetIndex:
    root: Path
    scenes: list[str]
    splits: dict[str, str] = field(default_factory=dict)
    cloud_fraction: dict[str, float] = field(default_factory=dict)

    def split(self, name: str) -> list[str]:
        return [s for s in self.scenes if self.splits.get(s) == name]

    def load(self, name: Optional[str] = None) -> list[ImageTriplet]:
        ids = self.scenes if name is None else self.split(name)
        return [load_triplet(self.root, s) for s in ids]


def write_manifest(root: Path, triplets: Iterable[ImageTriplet], splits: dict[str, str],
                   extra: Optional[dict] = None) -> str:
    """Write manifest + split file; returns the manifest's sha256."""
    root = Path(root)
    header = MANIFEST_HEADER + (" " + json.dumps(extra, sort_keys=True) if extra else "")
    lines = [header, "scene_id\tcloud_fraction"]
    lines += [f"{t.scene_id}\t{t.cloud_fraction:.6f}" for t in triplets]
    text = "\n".join(lines) + "\n"
    (root / "manifest.tsv").write_text(text)
    (root / "splits.tsv").write_text("".join(f"{k}\t{v}\n" for k, v in splits.items()))
    return hashlib.sha256(text.encode()).hexdigest()


def read_dataset(root: Path) -> DatasetIndex:
    root = Path(root)
    mpath = root / "manifest.tsv"
    try:
        lines = mpath.read_text().splitlines()
    except FileNotFoundError as e:
        raise OSError(f"no dataset manifest at {mpath}") from e
    if not lines or not lines[0].startswith(MANIFEST_HEADER):
        raise OSError(f"{mpath}: unrecognized manifest header {lines[0] if lines else ''!r}")
    scenes, cf = [], {}
    for ln in lines[2:]:
        if ln.strip():
            sid, frac = ln.split("\t")
            scenes.append(sid)
            cf[sid] = float(frac)
    splits = {}
    spath = root / "splits.tsv"
    if spath.exists():
        for ln in spath.read_text().splitlines():
            if ln.strip():
                sid, name = ln.split("\t")
                splits[sid] = name
    return DatasetIndex(root=root, scenes=scenes, splits=splits, cloud_fraction=cf)


def stack_triplets(triplets: Sequence[ImageTriplet]):
    """Stack into (x0, y, z) float32 arrays with a leading batch axis."""
    return (np.stack([t.x0 for t in triplets]), np.stack([t.y for t in triplets]),
            np.stack([t.z for t in triplets]))


def params_dict(p: SyntheticSceneParams) -> dict:
    d = asdict(p)
    d["cloud_opacity_range"] = list(d["cloud_opacity_range"])
    return d
