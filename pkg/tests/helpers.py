"""Shared oracles for the test-suite: finite differences, naive convolution, dense projector."""
from __future__ import annotations

import math

import numpy as np

from tomoprior import tensorcore as tc


def rel_err(a, b, floor):
    """Elementwise |a - b| / max(|a|, |b|, floor)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def sample_coords(rng, arrays, n):
    """``n`` random (key, flat index) pairs drawn over every entry of ``arrays``."""
    keys = sorted(arrays)
    sizes = np.array([arrays[k].size for k in keys])
    picks = rng.choice(sizes.sum(), size=min(n, int(sizes.sum())), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    out = []
    for p in picks:
        j = int(np.searchsorted(offsets, p, side="right") - 1)
        out.append((keys[j], int(p - offsets[j])))
    return out


def central_diff(f, arr, flat_idx, h):
    """(f(x + h e_i) - f(x - h e_i)) / 2h, perturbing ``arr`` in place and restoring it."""
    view = arr.reshape(-1)
    old = view[flat_idx].copy()
    view[flat_idx] = old + h
    fp = f()
    view[flat_idx] = old - h
    fm = f()
    view[flat_idx] = old
    # the actually applied step, which differs from 2h after float32 rounding
    step = float(np.float64(old.dtype.type(old + h)) - np.float64(old.dtype.type(old - h)))
    return (fp - fm) / step


def _kink_signs(net):
    """Sign pattern of every ReLU / leaky-ReLU input of the last forward pass."""
    inputs = net._cache[0]
    return [inputs[i] > 0 for i, spec in enumerate(net.layers) if spec.kind in ("relu", "lrelu")]


def check_net_grads(net, x, *, train=False, n_coords=100, h=1e-3, seed=0, wrt_input=True,
                    fd_dtype=np.float64, floor_frac=1e-3):
    """Compare analytic gradients of <w, net(x)> with central differences.

    The analytic gradient comes from ``net`` in its own precision; the
    differences are taken on a copy of the same weights in ``fd_dtype``
    (float32 differencing at h=1e-3 is dominated by rounding noise). A
    coordinate whose +-h perturbation flips the sign of any ReLU input
    straddles a kink, where differencing is meaningless; it is redrawn.
    The relative-error floor is ``floor_frac`` times the RMS gradient, so
    coordinates whose true gradient is ~0 are judged on an absolute scale.
    Returns the relative errors of ``n_coords`` coordinates.
    """
    rng = np.random.default_rng(seed)
    x = np.asarray(x)
    out = net.forward(x.astype(net.dtype), train=train)
    w = rng.standard_normal(out.shape)
    gx, grads = net.backward(w.astype(net.dtype))

    shadow = net.astype(fd_dtype)
    xs = np.array(x, dtype=fd_dtype)
    signs = []

    def f():
        val = float(np.sum(shadow.forward(xs, train=train).astype(np.float64) * w))
        signs.append(_kink_signs(shadow))
        return val

    arrays = {"p:" + k: v for k, v in shadow.params.items()}
    analytic = {"p:" + k: v for k, v in grads.items()}
    if wrt_input:
        arrays["input"] = xs
        analytic["input"] = gx
    total = sum(v.size for v in arrays.values())
    coords = sample_coords(rng, arrays, total)
    a, n = [], []
    for key, idx in coords:
        signs.clear()
        fd = central_diff(f, arrays[key], idx, h)
        if any(np.any(p != m) for p, m in zip(*signs)):
            continue
        a.append(float(analytic[key].reshape(-1)[idx]))
        n.append(fd)
        if len(a) == n_coords:
            break
    allg = np.concatenate([np.asarray(v, dtype=np.float64).ravel() for v in analytic.values()])
    floor = floor_frac * math.sqrt(np.mean(allg**2)) + 1e-30
    return rel_err(a, n, floor)


def naive_conv2d(x, w, b, stride, pad):
    """Direct nested-loop cross-correlation; x (n, c, h, w), w (o, c, k, k)."""
    n, c, hh, ww = x.shape
    o, _, k, _ = w.shape
    xp = np.zeros((n, c, hh + 2 * pad, ww + 2 * pad))
    xp[:, :, pad : pad + hh, pad : pad + ww] = x
    ho = (hh + 2 * pad - k) // stride + 1
    wo = (ww + 2 * pad - k) // stride + 1
    y = np.zeros((n, o, ho, wo))
    for s in range(n):
        for oc in range(o):
            for i in range(ho):
                for j in range(wo):
                    acc = b[oc]
                    for ic in range(c):
                        for u in range(k):
                            for v in range(k):
                                acc += xp[s, ic, i * stride + u, j * stride + v] * w[oc, ic, u, v]
                    y[s, oc, i, j] = acc
    return y


def dense_projector(d, angles_deg, nd=None, step=0.5):
    """Explicit (v*nd, d*d) ray-weight matrix for a parallel beam, built ray by ray.

    Each ray is sampled every ``step`` pixels along its direction; every
    sample spreads weight ``step`` bilinearly onto the four neighbouring
    pixel centres. No footprint normalization.
    """
    nd = nd or d
    half = d * math.sqrt(2) / 2 + 1.0
    k_half = int(math.ceil(half / step))
    A = np.zeros((len(angles_deg) * nd, d * d))
    c = (d - 1) / 2.0
    for vi, ang in enumerate(angles_deg):
        th = math.radians(ang)
        ex, ey = math.cos(th), math.sin(th)
        ux, uy = -math.sin(th), math.cos(th)
        for di in range(nd):
            s = di - (nd - 1) / 2.0
            row = vi * nd + di
            for kk in range(-k_half, k_half + 1):
                t = kk * step
                px, py = s * ex + t * ux, s * ey + t * uy
                col, rw = px + c, c - py
                c0, r0 = math.floor(col), math.floor(rw)
                fc, fr = col - c0, rw - r0
                for rr, cc, wt in ((r0, c0, (1 - fr) * (1 - fc)), (r0, c0 + 1, (1 - fr) * fc),
                                   (r0 + 1, c0, fr * (1 - fc)), (r0 + 1, c0 + 1, fr * fc)):
                    if 0 <= rr < d and 0 <= cc < d and wt > 0:
                        A[row, rr * d + cc] += step * wt
    return A


def normalize_dense(A, d, angles_deg, nd=None):
    """Scale each pixel's per-view column mass to 1 where its footprint lies on the detector."""
    nd = nd or d
    A = A.copy()
    c = (d - 1) / 2.0
    for vi, ang in enumerate(angles_deg):
        th = math.radians(ang)
        rows = slice(vi * nd, (vi + 1) * nd)
        for r in range(d):
            for q in range(d):
                px, py = q - c, c - r
                pe = px * math.cos(th) + py * math.sin(th)
                mass = A[rows, r * d + q].sum()
                if abs(pe) + 1.5 <= (nd - 1) / 2.0 and mass > 0:
                    A[rows, r * d + q] /= mass
    return A


def rowwise_loss_grad_check(loss32, loss64, z, nets=(), h=1e-3, n=100, seed=0):
    """Analytic 32-bit gradients of per-row losses vs float64 central differences.

    ``loss32(z) -> (losses, dz)`` and ``loss64(z) -> losses`` act row-wise,
    so each coordinate is differenced on its own row as a batch of two
    (+h, -h). Coordinates whose step flips a ReLU sign in any of ``nets``
    (the float64 shadows used by ``loss64``) sit on a kink and are redrawn.
    """
    _, g = loss32(z.astype(np.float32))
    g = np.asarray(g, dtype=np.float64)
    floor = 1e-3 * np.sqrt(np.mean(g**2))
    zz = z.astype(np.float64)
    errs = []
    for i in np.random.default_rng(seed).permutation(z.size):
        r, c = divmod(int(i), z.shape[1])
        pair = np.repeat(zz[r:r + 1], 2, axis=0)
        pair[0, c] += h
        pair[1, c] -= h
        lp, lm = loss64(pair)
        if any(np.any(s[0] != s[1]) for net in nets for s in _kink_signs(net)):
            continue
        num = (lp - lm) / (2 * h)
        errs.append(abs(g[r, c] - num) / max(abs(g[r, c]), abs(num), floor))
        if len(errs) == n:
            break
    assert len(errs) == n
    return np.array(errs)


def param_loss_grad_check(net, loss, h=1e-3, n=100, seed=0):
    """Parameter gradients of a scalar loss vs float64 central differences.

    ``loss(net, dtype) -> (value, grads)``; it is called on ``net`` for the
    analytic gradients and on a float64 copy for the differences. Steps that
    flip a ReLU sign in the copy are redrawn.
    """
    _, grads = loss(net, net.dtype)
    shadow = net.astype(np.float64)
    keys = sorted(shadow.params)
    sizes = [shadow.params[k].size for k in keys]
    offs = np.cumsum([0] + sizes)
    allg = np.concatenate([grads[k].ravel() for k in keys]).astype(np.float64)
    floor = 1e-3 * np.sqrt(np.mean(allg**2))
    errs = []
    for p in np.random.default_rng(seed).permutation(sum(sizes)):
        j = int(np.searchsorted(offs, p, side="right") - 1)
        arr, i = shadow.params[keys[j]], p - offs[j]
        old = arr.flat[i]
        arr.flat[i] = old + h
        lp = loss(shadow, np.float64)[0]
        sp = _kink_signs(shadow)
        arr.flat[i] = old - h
        lm = loss(shadow, np.float64)[0]
        sm = _kink_signs(shadow)
        arr.flat[i] = old
        if any(np.any(u != v) for u, v in zip(sp, sm)):
            continue
        num = (lp - lm) / (2 * h)
        errs.append(abs(allg[p] - num) / max(abs(allg[p]), abs(num), floor))
        if len(errs) == n:
            break
    assert len(errs) == min(n, sum(sizes))
    return np.array(errs)


def naive_ssim(a, b, win=7, sigma=1.5, k1=0.01, k2=0.03):
    """Direct per-pixel SSIM over a symmetric-padded Gaussian window."""
    r = win // 2
    g = np.array([math.exp(-((i - r) ** 2) / (2 * sigma**2)) for i in range(win)])
    w = np.outer(g, g)
    w /= w.sum()
    pa = np.pad(a, r, mode="symmetric")
    pb = np.pad(b, r, mode="symmetric")
    c1, c2 = k1**2, k2**2
    vals = []
    for i in range(a.shape[0]):
        for j in range(a.shape[1]):
            wa = pa[i : i + win, j : j + win]
            wb = pb[i : i + win, j : j + win]
            ma, mb = np.sum(w * wa), np.sum(w * wb)
            va = np.sum(w * (wa - ma) ** 2)
            vb = np.sum(w * (wb - mb) ** 2)
            cov = np.sum(w * (wa - ma) * (wb - mb))
            vals.append(((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma**2 + mb**2 + c1) * (va + vb + c2)))
    return float(np.mean(vals))


# -- one small network per layer kind, for gradient checks ------------------------

def randomized(layers, seed=0, dtype=np.float32, std=0.3):
    """Net with O(1) random weights so every gradient path carries signal."""
    net = tc.Net.build(layers, seed=seed)
    rng = np.random.default_rng(seed + 100)
    for k, v in net.params.items():
        if k.endswith("weight"):
            v[...] = rng.normal(0, std, v.shape)
        elif k.endswith("bias") or k.endswith("beta"):
            v[...] = rng.normal(0, 0.1, v.shape)
        else:  # gamma, mask
            v[...] = 1 + rng.normal(0, 0.1, v.shape)
    return net.astype(dtype)


rng0 = np.random.default_rng(7)
GRAD_CASES = {
    "dense": ([tc.dense(12, 7)], rng0.standard_normal((3, 12)), False),
    "conv2d": ([tc.conv2d(2, 3, 3)], rng0.standard_normal((2, 2, 8, 8)), False),
    "conv2d_stride2_k5": ([tc.conv2d(2, 3, 5, stride=2)], rng0.standard_normal((2, 2, 8, 8)), False),
    "deconv2d": ([tc.deconv2d(3, 2, 5, 2)], rng0.standard_normal((2, 3, 4, 4)), False),
    "batchnorm_train_4d": ([tc.batchnorm(3)], rng0.standard_normal((4, 3, 5, 5)), True),
    "batchnorm_train_2d": ([tc.batchnorm(8)], rng0.standard_normal((12, 8)), True),
    "batchnorm_eval": ([tc.conv2d(1, 3, 3), tc.batchnorm(3)], rng0.standard_normal((2, 1, 6, 6)), False),
    "relu": ([tc.dense(6, 8), tc.relu(), tc.dense(8, 3)], rng0.standard_normal((4, 6)), False),
    "lrelu": ([tc.conv2d(1, 3, 3), tc.lrelu(0.2), tc.flatten(), tc.dense(48, 2)],
              rng0.standard_normal((2, 1, 4, 4)), False),
    "tanh_affine": ([tc.dense(10, 8), tc.tanh(), tc.affine(0.5, 0.5)], rng0.standard_normal((4, 10)), False),
    "sigmoid": ([tc.dense(10, 8), tc.sigmoid()], rng0.standard_normal((4, 10)), False),
    "mask_shortcut": ([tc.conv2d(1, 4, 3), tc.relu(), tc.conv2d(4, 1, 3), tc.mask_mul((1, 8, 8)),
                       tc.add_shortcut(0)], rng0.uniform(0, 1, (3, 1, 8, 8)), False),
    "conv_no_bias": ([tc.conv2d(2, 3, 3, bias=False), tc.relu(), tc.deconv2d(3, 1, 3, 2, bias=False)],
                     rng0.standard_normal((2, 2, 6, 6)), False),
    "reshape_chain": ([tc.dense(5, 2 * 4 * 4), tc.reshape((2, 4, 4)), tc.batchnorm(2), tc.relu(),
                       tc.deconv2d(2, 1, 5, 2)], rng0.standard_normal((3, 5)), True),
}
