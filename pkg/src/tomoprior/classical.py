"""Seed reconstructions: filtered backprojection and regularized least squares."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .projector import Sinogram, backproject_array, project_array

log = logging.getLogger(__name__)


class RlsDivergenceError(ArithmeticError):
    pass


@dataclass
class RlsConfig:
    lam: float = 0.01
    iters: int = 200
    nonneg: bool = True
    reg_kind: str = "smoothness"

    def __post_init__(self):
        if not self.lam >= 0:
            raise ValueError(f"lambda must be >= 0, got {self.lam}")
        if self.iters < 1:
            raise ValueError(f"iters must be >= 1, got {self.iters}")
        if self.reg_kind not in ("smoothness", "identity"):
            raise ValueError(f"reg_kind must be 'smoothness' or 'identity', got {self.reg_kind!r}")


def ramp_filter(n_pad, window="ramlak"):
    """Frequency response of the band-limited ramp, scaled to 1 at Nyquist.

    Built from the spatial Ram-Lak kernel so the DC term is correct.
    """
    n = np.fft.fftfreq(n_pad) * n_pad  # integer lags in FFT order
    h = np.zeros(n_pad)
    h[0] = 0.5
    odd = (n.astype(int) % 2) == 1
    h[odd] = -2.0 / (np.pi * n[odd]) ** 2
    resp = np.real(np.fft.fft(h))
    if window == "hann":
        f = np.fft.fftfreq(n_pad)
        resp *= 0.5 * (1.0 + np.cos(2.0 * np.pi * f))
    elif window != "ramlak":
        raise ValueError(f"unknown window {window!r} (ramlak or hann)")
    return resp


def fbp(sino: Sinogram, window="ramlak"):
    """Filtered backprojection for parallel-beam sinograms, clamped to [0, 1]."""
    geom = sino.geometry
    if geom.beam != "parallel":
        raise NotImplementedError("FBP supports parallel-beam geometry only")
    y = np.asarray(sino.data, dtype=np.float64)
    nd = geom.detector_count
    n_pad = 1 << max(1, math.ceil(math.log2(2 * nd)))
    resp = ramp_filter(n_pad, window)
    spec = np.fft.fft(y, n=n_pad, axis=-1)
    filtered = np.real(np.fft.ifft(spec * resp, axis=-1))[..., :nd]
    img = backproject_array(filtered, geom) * (np.pi / (2 * geom.n_views))
    return np.clip(img, 0.0, 1.0)


# -- regularizers -----------------------------------------------------------

def _grad2d(x):
    gx = np.zeros_like(x)
    gy = np.zeros_like(x)
    gx[..., :, :-1] = x[..., :, 1:] - x[..., :, :-1]
    gy[..., :-1, :] = x[..., 1:, :] - x[..., :-1, :]
    return gx, gy


def _grad2d_adj(gx, gy):
    out = np.zeros_like(gx)
    out[..., :, :-1] -= gx[..., :, :-1]
    out[..., :, 1:] += gx[..., :, :-1]
    out[..., :-1, :] -= gy[..., :-1, :]
    out[..., 1:, :] += gy[..., :-1, :]
    return out


def reg_value(x, kind):
    if kind == "identity":
        return np.sum(x * x, axis=(-2, -1))
    gx, gy = _grad2d(x)
    return np.sum(gx * gx + gy * gy, axis=(-2, -1))


def reg_normal(x, kind):
    """The operator R with reg_value(x) = <x, R x> (R = I or D^T D)."""
    if kind == "identity":
        return x
    return _grad2d_adj(*_grad2d(x))


def estimate_lipschitz(geom, lam, kind, n_iter=50, seed=0):
    """Largest eigenvalue of 2 (A^T A + lam R), by power iteration."""
    d = geom.image_side
    v = np.random.default_rng(seed).normal(size=(d, d))
    v /= np.linalg.norm(v)
    ev = 0.0
    for _ in range(n_iter):
        w = backproject_array(project_array(v, geom), geom) + lam * reg_normal(v, kind)
        ev = float(np.sum(v * w))
        nrm = np.linalg.norm(w)
        if nrm == 0:
            return 0.0
        v = w / nrm
    return 2.0 * ev


def rls_objective(x, y, geom, lam, kind):
    r = project_array(x, geom) - y
    return np.sum(r * r, axis=(-2, -1)) + lam * reg_value(x, kind)


def rls(sino: Sinogram, cfg: RlsConfig | None = None, return_history=False):
    """Gradient descent on ||A x - y||^2 + lam R(x) with step 0.9 / L.

    Works on a single sinogram (v, d) or a stack (n, v, d). The final
    iterate is clamped to [0, 1]. With ``return_history`` the per-step
    objective values (shape (iters + 1, n)) are returned as well.
    """
    cfg = cfg or RlsConfig()
    geom = sino.geometry
    y = np.asarray(sino.data, dtype=np.float64)
    single = y.ndim == 2
    if single:
        y = y[None]
    d = geom.image_side
    L = estimate_lipschitz(geom, cfg.lam, cfg.reg_kind)
    if L <= 0:
        raise RlsDivergenceError("power iteration returned a non-positive Lipschitz estimate")
    step = 0.9 / L
    aty = backproject_array(y, geom)
    x = np.zeros((y.shape[0], d, d))
    obj = rls_objective(x, y, geom, cfg.lam, cfg.reg_kind)
    history = [obj]
    rising = np.zeros(y.shape[0], dtype=int)
    for it in range(cfg.iters):
        grad = 2.0 * (backproject_array(project_array(x, geom), geom) - aty)
        if cfg.lam:
            grad += 2.0 * cfg.lam * reg_normal(x, cfg.reg_kind)
        x = x - step * grad
        if cfg.nonneg:
            np.maximum(x, 0.0, out=x)
        new = rls_objective(x, y, geom, cfg.lam, cfg.reg_kind)
        if not np.all(np.isfinite(new)):
            raise RlsDivergenceError(f"non-finite objective at step {it} (step size {step:.4g}, L={L:.4g})")
        rising = np.where(new > obj, rising + 1, 0)
        if np.any(rising >= 10):
            raise RlsDivergenceError(
                f"objective rose for 10 consecutive steps at step {it}; step size {step:.4g} from L={L:.4g}")
        obj = new
        history.append(obj)
    out = np.clip(x, 0.0, 1.0)
    if single:
        out = out[0]
    if return_history:
        return out, np.array(history)
    return out
