"""PSNR / SSIM on RGB images and per-clip reporting."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

PSNR_CAP = 100.0


def _as_array(img):
    return np.asarray(getattr(img, "data", img), dtype=np.float64)


def psnr(a, b, peak: float = 1.0) -> float:
    """10*log10(peak^2 / MSE) over every element; identical inputs give the 100 dB cap."""
    a, b = _as_array(a), _as_array(b)
    if a.shape != b.shape:
        raise ValueError(f"psnr: shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(peak * peak / mse))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x ** 2) / (2 * sigma * sigma))
    return g / g.sum()


def _filter_valid(img, g):
    # separable 'valid' correlation over the last two axes
    k = g.size
    h, w = img.shape[-2:]
    rows = sum(g[i] * img[..., i:h - k + 1 + i, :] for i in range(k))
    return sum(g[i] * rows[..., :, i:w - k + 1 + i] for i in range(k))


def ssim(a, b, peak: float = 1.0, window: int = 11, sigma: float = 1.5,
         k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean SSIM with a Gaussian window, computed per channel and averaged.

    Inputs are (C, H, W) or (H, W).
    """
    a, b = _as_array(a), _as_array(b)
    if a.shape != b.shape:
        raise ValueError(f"ssim: shape mismatch {a.shape} vs {b.shape}")
    if min(a.shape[-2:]) < window:
        raise ValueError(f"ssim: image {a.shape[-2:]} smaller than the {window}x{window} window")
    if a.ndim == 2:
        a, b = a[None], b[None]
    g = gaussian_window(window, sigma)
    c1, c2 = (k1 * peak) ** 2, (k2 * peak) ** 2
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    saa = _filter_valid(a * a, g) - mu_a ** 2
    sbb = _filter_valid(b * b, g) - mu_b ** 2
    sab = _filter_valid(a * b, g) - mu_a * mu_b
    smap = ((2 * mu_a * mu_b + c1) * (2 * sab + c2)) / ((mu_a ** 2 + mu_b ** 2 + c1) * (saa + sbb + c2))
    return float(np.mean(smap.reshape(smap.shape[0], -1).mean(axis=1)))


def quantize(img) -> np.ndarray:
    """Round a [0, 1] image to the 8-bit grid (still in [0, 1])."""
    return np.round(np.clip(_as_array(img), 0.0, 1.0) * 255.0) / 255.0


@dataclass
class MetricReport:
    rows: list = field(default_factory=list)

    def add(self, clip: str, frame: int, sr, gt, peak: float = 1.0):
        sr, gt = quantize(sr), quantize(gt)
        self.rows.append((clip, frame, psnr(sr, gt, peak), ssim(sr, gt, peak)))

    def clips(self):
        return sorted({r[0] for r in self.rows})

    def clip_means(self) -> dict:
        out = {}
        for clip in self.clips():
            rs = [r for r in self.rows if r[0] == clip]
            out[clip] = (float(np.mean([r[2] for r in rs])), float(np.mean([r[3] for r in rs])))
        return out

    def mean(self) -> tuple:
        if not self.rows:
            return float("nan"), float("nan")
        return float(np.mean([r[2] for r in self.rows])), float(np.mean([r[3] for r in self.rows]))

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["clip", "frame", "psnr_db", "ssim"])
            for clip, frame, p, s in self.rows:
                w.writerow([clip, frame, f"{p:.6f}", f"{s:.6f}"])
            p, s = self.mean()
            w.writerow(["ALL", "mean", f"{p:.6f}", f"{s:.6f}"])

    @classmethod
    def from_csv(cls, path) -> "MetricReport":
        rep = cls()
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                if row["clip"] == "ALL":
                    continue
                rep.rows.append((row["clip"], int(row["frame"]), float(row["psnr_db"]), float(row["ssim"])))
        return rep
