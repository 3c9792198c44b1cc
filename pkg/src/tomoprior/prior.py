"""Projection onto a generator's range: plain, corruption-mimicking, measurement-domain.

All three solvers run ``R`` latent restarts as one batch, take Adam steps on
the latent codes and clip them back into the box [-1, 1] after every step.
The robust solver alternates with Adam steps on a shallow surrogate network
that is shared by all restarts and learns to reproduce the corruption seen
in the seed image. The reported image is always the generator output at the
chosen code, never the surrogate output.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import tensorcore as tc
from .gan import IMAGE_SIDE, GanCheckpoint, generate
from .projector import Sinogram, backproject_array, project_array

log = logging.getLogger(__name__)


class ProjectionError(RuntimeError):
    pass


@dataclass
class RobustOpts:
    t1: int = 15          # surrogate steps per cycle
    t2: int = 15          # latent steps per cycle
    lr_s: float = 1e-2
    lr_g: float = 8e-2
    cycles: int = 84
    restarts: int = 4
    seed: int = 0
    plain_steps: int | None = None   # None: 2 * cycles * t2, matching the robust budget
    surrogate_width: int = 16

    def __post_init__(self):
        if self.restarts < 1:
            raise ValueError(f"restarts must be >= 1, got {self.restarts}")
        for name in ("t1", "t2", "cycles"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.plain_steps is not None and self.plain_steps < 0:
            raise ValueError(f"plain_steps must be >= 0, got {self.plain_steps}")
        if self.lr_s < 0 or self.lr_g < 0:
            raise ValueError("learning rates must be non-negative")

    @property
    def total_iterations(self):
        """Alternating iterations of the robust solver (both phases)."""
        return self.cycles * (self.t1 + self.t2)

    @property
    def latent_steps(self):
        """Latent steps taken by the plain and measurement solvers."""
        if self.plain_steps is not None:
            return self.plain_steps
        return 2 * self.cycles * self.t2


@dataclass
class ProjectionResult:
    x_star: np.ndarray
    z_star: np.ndarray
    loss_trace: np.ndarray          # chosen restart: loss before every latent step, then final
    restart: int
    final_losses: np.ndarray        # per restart; nan for aborted restarts
    method: str
    surrogate: tc.Net | None = None
    surrogate_trace: list = field(default_factory=list)

    @property
    def final_loss(self):
        return float(self.final_losses[self.restart])


# -- surrogate --------------------------------------------------------------

def surrogate_layers(width=16, side=28):
    # Bias-free convs: f(0) = 0 and f cannot add a constant image of its
    # own, so a good surrogate fit still needs G(z) close to the seed.
    return [
        tc.conv2d(1, width, kernel=3, bias=False),
        tc.relu(),
        tc.conv2d(width, 1, kernel=3, bias=False),
        tc.mask_mul((1, side, side)),
        tc.add_shortcut(0),
    ]


def build_surrogate(seed=0, width=16, side=28) -> tc.Net:
    """mask * conv(relu(conv(x))) + x with bias-free Gaussian(0, 0.02) convs and an all-ones mask."""
    return tc.Net.build(surrogate_layers(width, side), seed=seed)


def identity_surrogate(width=16, side=28) -> tc.Net:
    """Surrogate with zeroed convolutions: exactly the identity map."""
    net = build_surrogate(0, width, side)
    for k, v in net.params.items():
        if not k.endswith(".mask"):
            v[...] = 0
    return net


# -- losses and their latent gradients --------------------------------------

def _check_seed(seed_img, side):
    x = np.asarray(seed_img, dtype=np.float32)
    if x.shape != (side, side):
        raise ValueError(f"seed image must be {side}x{side}, got {x.shape}")
    if not np.all(np.isfinite(x)) or x.min() < 0 or x.max() > 1:
        raise ValueError("seed image must be finite and lie in [0, 1]")
    return x[None, None]


def _mse_rows(diff):
    return np.mean(diff.astype(np.float64) ** 2, axis=tuple(range(1, diff.ndim)))


def image_loss(G: tc.Net, z, target, surrogate: tc.Net | None = None, grad=True):
    """Per-row ``mean((f(G(z)) - target)^2)`` and its gradient w.r.t. ``z``.

    With ``surrogate=None`` ``f`` is the identity (plain prior).
    """
    x = G.forward(z, train=False)
    out = surrogate.forward(x) if surrogate is not None else x
    diff = out - target
    loss = _mse_rows(diff)
    if not grad:
        return loss, None
    g = (2.0 / diff[0].size) * diff
    if surrogate is not None:
        g, _ = surrogate.backward(g, param_grads=False)
    gz, _ = G.backward(g, param_grads=False)
    return loss, gz


def surrogate_loss(surrogate: tc.Net, gen_out, target):
    """Mean over rows of the per-row MSE, and gradients w.r.t. surrogate params."""
    out = surrogate.forward(gen_out)
    diff = out - target
    rows = _mse_rows(diff)
    g = (2.0 / diff.size) * diff
    _, grads = surrogate.backward(g)
    return float(rows.mean()), grads


def measurement_loss(G: tc.Net, z, sino: np.ndarray, geom, grad=True):
    """Per-row ``mean((A G(z) - y)^2)`` and its gradient w.r.t. ``z``."""
    x = G.forward(z, train=False)
    resid = project_array(x[:, 0], geom) - sino
    loss = np.mean(resid**2, axis=(1, 2))
    if not grad:
        return loss, None
    gx = (2.0 / resid[0].size) * backproject_array(resid, geom)
    gz, _ = G.backward(gx[:, None].astype(np.float32), param_grads=False)
    return loss, gz


# -- solvers ----------------------------------------------------------------

class _LatentBox:
    """Restart batch with per-restart abort bookkeeping and a shared Adam state."""

    def __init__(self, rng, restarts, k, lr):
        self.z = rng.uniform(-1.0, 1.0, (restarts, k)).astype(np.float32)
        self.alive = np.ones(restarts, dtype=bool)
        self.lr = lr
        self.state = {}
        self.trace = []

    def evaluate(self, fn):
        """Run ``fn(z_alive) -> (loss, grad)``; restarts that go non-finite are aborted."""
        while True:
            idx = np.flatnonzero(self.alive)
            if idx.size == 0:
                raise ProjectionError("every restart produced a non-finite loss")
            try:
                loss, gz = fn(self.z[idx])
            except tc.NonFiniteError:
                self._abort_offenders(fn, idx)
                continue
            bad = ~np.isfinite(loss)
            if gz is not None:
                bad |= ~np.all(np.isfinite(gz), axis=1)
            if bad.any():
                log.warning("aborting restarts %s: non-finite loss", idx[bad].tolist())
                self.alive[idx[bad]] = False
                continue
            full = np.full(self.z.shape[0], np.nan)
            full[idx] = loss
            return idx, full, gz

    def _abort_offenders(self, fn, idx):
        before = self.alive.sum()
        for r in idx:
            try:
                loss, _ = fn(self.z[r : r + 1])
                ok = np.all(np.isfinite(loss))
            except tc.NonFiniteError:
                ok = False
            if not ok:
                log.warning("aborting restart %d: non-finite activation", r)
                self.alive[r] = False
        if self.alive.sum() == before:
            raise ProjectionError("non-finite activation that no single restart reproduces")

    def step(self, fn):
        idx, loss, gz = self.evaluate(fn)
        self.trace.append(loss)
        g = np.zeros_like(self.z)
        g[idx] = gz
        before = self.z.copy()
        tc.adam_step({"z": self.z}, {"z": g}, self.state, self.lr)
        np.clip(self.z, -1.0, 1.0, out=self.z)
        dead = ~self.alive
        self.z[dead] = before[dead]

    def finish(self, fn):
        _, loss, _ = self.evaluate(fn)
        self.trace.append(loss)
        masked = np.where(self.alive, loss, np.inf)
        best = int(np.argmin(masked))  # first index wins ties
        return best, loss


def _result(ckpt, box: _LatentBox, best, final, method, surrogate=None, s_trace=None):
    z_star = box.z[best].copy()
    trace = np.array([row[best] for row in box.trace])
    return ProjectionResult(
        x_star=generate(ckpt, z_star),
        z_star=z_star,
        loss_trace=trace,
        restart=best,
        final_losses=final,
        method=method,
        surrogate=surrogate,
        surrogate_trace=s_trace or [],
    )


def project_plain(seed_img, ckpt: GanCheckpoint, opts: RobustOpts | None = None) -> ProjectionResult:
    """Adam + box projection on ``mean((G(z) - seed)^2)`` from ``opts.restarts`` random starts."""
    opts = opts or RobustOpts()
    G = ckpt.generator
    target = _check_seed(seed_img, IMAGE_SIDE)
    rng = np.random.default_rng(opts.seed)
    box = _LatentBox(rng, opts.restarts, ckpt.latent_dim, opts.lr_g)

    def fn(z, grad=True):
        return image_loss(G, z, target, grad=grad)

    for _ in range(opts.latent_steps):
        box.step(fn)
    best, final = box.finish(lambda z: fn(z, grad=False))
    return _result(ckpt, box, best, final, "plain")


def project_robust(seed_img, ckpt: GanCheckpoint, opts: RobustOpts | None = None,
                   surrogate: tc.Net | None = None) -> ProjectionResult:
    """Alternate surrogate fitting (t1 steps) and latent fitting (t2 steps) for ``cycles`` rounds."""
    opts = opts or RobustOpts()
    G = ckpt.generator
    side = IMAGE_SIDE
    target = _check_seed(seed_img, side)
    rng = np.random.default_rng(opts.seed)
    box = _LatentBox(rng, opts.restarts, ckpt.latent_dim, opts.lr_g)
    if surrogate is not None:
        f = surrogate.copy()
    else:
        f = build_surrogate(opts.seed, opts.surrogate_width, side)
    f_init = f.copy()
    reinit_left = 1
    s_trace = []
    s_ref = None

    def latent_fn(z, grad=True):
        return image_loss(G, z, target, surrogate=f, grad=grad)

    for cycle in range(opts.cycles):
        if opts.t1:
            idx = np.flatnonzero(box.alive)
            gen_out = G.forward(box.z[idx], train=False)
            cycle_losses = []
            for _ in range(opts.t1):
                loss, grads = surrogate_loss(f, gen_out, target)
                if not np.isfinite(loss):
                    raise ProjectionError(f"surrogate loss became non-finite in cycle {cycle}")
                cycle_losses.append(loss)
                f.adam_step(grads, opts.lr_s)
            s_trace.extend(cycle_losses)
            if s_ref is None:
                s_ref = cycle_losses[0]
            elif min(cycle_losses) > 10.0 * s_ref:
                if reinit_left == 0:
                    raise ProjectionError(f"surrogate diverged again in cycle {cycle} after reinitialization")
                log.warning("surrogate diverged in cycle %d; reinitializing", cycle)
                reinit_left -= 1
                f.params = {k: v.copy() for k, v in f_init.params.items()}
                f.opt_state = {}
        for _ in range(opts.t2):
            box.step(latent_fn)
    best, final = box.finish(lambda z: latent_fn(z, grad=False))
    return _result(ckpt, box, best, final, "robust", surrogate=f, s_trace=s_trace)


def project_measurement(sino: Sinogram, ckpt: GanCheckpoint, opts: RobustOpts | None = None) -> ProjectionResult:
    """Fit ``A G(z)`` to the sinogram directly (needs the forward model)."""
    opts = opts or RobustOpts()
    G = ckpt.generator
    geom = sino.geometry
    if geom.image_side != IMAGE_SIDE:
        raise ValueError(f"geometry image side {geom.image_side} != generator output {IMAGE_SIDE}")
    y = np.asarray(sino.data, dtype=np.float64)
    if y.shape != geom.shape or not np.all(np.isfinite(y)):
        raise ValueError("sinogram must be a single finite (views, detectors) array")
    rng = np.random.default_rng(opts.seed)
    box = _LatentBox(rng, opts.restarts, ckpt.latent_dim, opts.lr_g)

    def fn(z, grad=True):
        return measurement_loss(G, z, y[None], geom, grad=grad)

    for _ in range(opts.latent_steps):
        box.step(fn)
    best, final = box.finish(lambda z: fn(z, grad=False))
    return _result(ckpt, box, best, final, "measurement")
