"""PSNR / SSIM and per-image evaluation reports."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import correlate

SSIM_WIN = 7
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
CSV_COLUMNS = ("id", "method", "arc", "psnr", "ssim")


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b):
    """Peak SNR in dB for images in [0, 1]; ``inf`` for identical images."""
    a, b = _pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def gaussian_window(size=SSIM_WIN, sigma=SSIM_SIGMA):
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(r**2) / (2 * sigma**2))
    w = np.outer(g, g)
    return w / w.sum()


def ssim_map(a, b, data_range=1.0):
    a, b = _pair(a, b)
    w = gaussian_window()
    filt = lambda img: correlate(img, w, mode="reflect")  # noqa: E731  (reflect == symmetric padding)
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mu_a, mu_b = filt(a), filt(b)
    s_aa = filt(a * a) - mu_a * mu_a
    s_bb = filt(b * b) - mu_b * mu_b
    s_ab = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * s_ab + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (s_aa + s_bb + c2)
    return num / den


def ssim(a, b):
    """Mean local SSIM (7x7 Gaussian window, sigma 1.5, symmetric borders)."""
    return float(np.mean(ssim_map(a, b)))


@dataclass
class EvalRow:
    id: int
    method: str
    arc: float
    psnr: float
    ssim: float

    @property
    def identical(self):
        return math.isinf(self.psnr)


@dataclass
class EvalReport:
    rows: list = field(default_factory=list)

    def extend(self, other: "EvalReport"):
        self.rows.extend(other.rows)
        return self

    def groups(self):
        out = {}
        for r in self.rows:
            out.setdefault((r.method, r.arc), []).append(r)
        return out

    def aggregates(self):
        """{(method, arc): {metric: {mean, std, median}}} over finite values."""
        agg = {}
        for key, rows in self.groups().items():
            entry = {"n": len(rows)}
            for metric in ("psnr", "ssim"):
                vals = np.array([getattr(r, metric) for r in rows], dtype=np.float64)
                vals = vals[np.isfinite(vals)]
                if vals.size:
                    entry[metric] = {"mean": float(vals.mean()), "std": float(vals.std()),
                                     "median": float(np.median(vals))}
                else:
                    entry[metric] = {"mean": math.inf, "std": 0.0, "median": math.inf}
            agg[key] = entry
        return agg

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in self.rows:
            w.writerow([r.id, r.method, repr(float(r.arc)), repr(float(r.psnr)), repr(float(r.ssim))])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "EvalReport":
        reader = csv.reader(io.StringIO(text))
        header = next(reader)
        if tuple(header) != CSV_COLUMNS:
            raise ValueError(f"unexpected CSV header {header}, expected {list(CSV_COLUMNS)}")
        rows = [EvalRow(int(i), m, float(a), float(p), float(s)) for i, m, a, p, s in reader]
        return cls(rows)


def batch_eval(pred, gt, method, arc, ids=None) -> EvalReport:
    """One row per image pair, in input order."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape or pred.ndim != 3:
        raise ValueError(f"prediction stack {pred.shape} does not match ground truth {gt.shape}")
    ids = range(len(pred)) if ids is None else ids
    rows = [EvalRow(int(i), method, float(arc), psnr(p, g), ssim(p, g)) for i, p, g in zip(ids, pred, gt)]
    return EvalReport(rows)
