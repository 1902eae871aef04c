"""Distortion metrics on CHW images in [0, 1] and cloud-cover stratified reports."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

STRATA = ((0.0, 0.2), (0.2, 0.4), (0.4, 0.6), (0.6, 0.8), (0.8, 1.0))
STRATUM_LABELS = ("0-20%", "20-40%", "40-60%", "60-80%", "80-100%")
METRIC_NAMES = ("psnr", "ssim", "mae", "sam")


def _pair(pred, ref):
    pred = np.asarray(pred, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if pred.shape != ref.shape:
        raise ValueError(f"prediction shape {pred.shape} != reference shape {ref.shape}")
    return pred, ref


def psnr(pred, ref, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; ``inf`` for identical images."""
    pred, ref = _pair(pred, ref)
    mse = np.mean((pred - ref) ** 2)
    if mse == 0:
        return math.inf
    return float(10.0 * np.log10(peak ** 2 / mse))


def mae(pred, ref) -> float:
    pred, ref = _pair(pred, ref)
    return float(np.mean(np.abs(pred - ref)))


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2
    g = np.exp(-(ax ** 2) / (2 * sigma ** 2))
    g /= g.sum()
    return np.outer(g, g)


def ssim(pred, ref, *, window: int = 11, sigma: float = 1.5, data_range: float = 1.0,
         bands: Optional[Sequence[int]] = None) -> float:
    """Gaussian-windowed SSIM per channel, averaged over valid windows and channels.

    ``bands`` restricts the average to a channel subset (e.g. RGB).
    """
    pred, ref = _pair(pred, ref)
    if pred.ndim == 2:
        pred, ref = pred[None], ref[None]
    if bands is not None:
        pred, ref = pred[list(bands)], ref[list(bands)]
    if pred.shape[-1] < window or pred.shape[-2] < window:
        raise ValueError(f"image {pred.shape[-2:]} smaller than the {window}x{window} SSIM window")
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    w = _gaussian_window(window, sigma)
    r = window // 2

    def filt(a):
        # 'valid' region only: correlate then drop the border
        return ndimage.correlate(a, w, mode="constant")[r:-r, r:-r]

    vals = []
    for p, q in zip(pred, ref):
        mp, mq = filt(p), filt(q)
        spp = filt(p * p) - mp * mp
        sqq = filt(q * q) - mq * mq
        spq = filt(p * q) - mp * mq
        num = (2 * mp * mq + c1) * (2 * spq + c2)
        den = (mp * mp + mq * mq + c1) * (spp + sqq + c2)
        vals.append(np.mean(num / den))
    return float(np.mean(vals))


def sam(pred, ref) -> float:
    """Mean spectral angle in degrees over pixels with nonzero spectra.

    Returns ``nan`` when no pixel has a defined angle.
    """
    pred, ref = _pair(pred, ref)
    if pred.ndim != 3 or pred.shape[0] < 2:
        raise ValueError("SAM needs a C x H x W image with C >= 2")
    p = pred.reshape(pred.shape[0], -1)
    q = ref.reshape(ref.shape[0], -1)
    npn = np.linalg.norm(p, axis=0)
    nqn = np.linalg.norm(q, axis=0)
    ok = (npn > 0) & (nqn > 0)
    if not ok.any():
        return math.nan
    cos = np.sum(p[:, ok] * q[:, ok], axis=0) / (npn[ok] * nqn[ok])
    return float(np.degrees(np.mean(np.arccos(np.clip(cos, -1.0, 1.0)))))


def image_metrics(pred, ref, *, ssim_bands=None) -> dict:
    return {"psnr": psnr(pred, ref), "ssim": ssim(pred, ref, bands=ssim_bands),
            "mae": mae(pred, ref), "sam": sam(pred, ref)}


def stratum_index(cloud_fraction: float) -> int:
    """Strata are right-exclusive except the last, which includes 1.0."""
    if not 0.0 <= cloud_fraction <= 1.0:
        raise ValueError(f"cloud fraction {cloud_fraction} outside [0, 1]")
    return min(int(math.floor(cloud_fraction * 5 + 1e-12)), 4)


@dataclass
class MetricsReport:
    per_image: list[dict]
    overall: dict = field(default_factory=dict)
    strata: list[dict] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def table(self) -> str:
        head = f"{'stratum':<9} {'n':>4} " + " ".join(
            f"{m + '_med':>10} {m + '_mean':>10}" for m in METRIC_NAMES)
        rows = [head, "-" * len(head)]
        for entry in [self.overall] + self.strata:
            vals = " ".join(f"{entry[m + '_median']:>10.4f} {entry[m + '_mean']:>10.4f}"
                            for m in METRIC_NAMES)
            rows.append(f"{entry['stratum']:<9} {entry['count']:>4} {vals}")
        return "\n".join(rows)

    def per_image_csv(self) -> str:
        buf = io.StringIO()
        cols = ["scene_id", "cloud_fraction", "stratum", *METRIC_NAMES]
        w = csv.DictWriter(buf, fieldnames=cols, extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for r in self.per_image:
            w.writerow({**r, "stratum": STRATUM_LABELS[stratum_index(r["cloud_fraction"])]})
        return buf.getvalue()

    def strata_csv(self) -> str:
        buf = io.StringIO()
        cols = ["stratum", "count"] + [f"{m}_{a}" for m in METRIC_NAMES for a in ("median", "mean")]
        w = csv.DictWriter(buf, fieldnames=cols, extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for entry in [self.overall] + self.strata:
            w.writerow(entry)
        return buf.getvalue()


def _summary(label: str, rows: list[dict]) -> dict:
    out = {"stratum": label, "count": len(rows)}
    for m in METRIC_NAMES:
        v = np.array([r[m] for r in rows], dtype=np.float64)
        v = v[~np.isnan(v)]
        out[m + "_median"] = float(np.median(v)) if v.size else math.nan
        out[m + "_mean"] = float(np.mean(v)) if v.size else math.nan
    return out


def stratified_report(results: Sequence[dict], meta: Optional[dict] = None) -> MetricsReport:
    """Aggregate per-image metric dicts (each with ``cloud_fraction``) into a report."""
    if not results:
        raise ValueError("cannot build a report from zero images")
    buckets = [[] for _ in STRATA]
    for r in results:
        if "cloud_fraction" not in r:
            raise ValueError(f"result for {r.get('scene_id', '?')} lacks cloud_fraction")
        buckets[stratum_index(r["cloud_fraction"])].append(r)
    return MetricsReport(
        per_image=list(results),
        overall=_summary("all", list(results)),
        strata=[_summary(lbl, b) for lbl, b in zip(STRATUM_LABELS, buckets)],
        meta=dict(meta or {}),
    )
