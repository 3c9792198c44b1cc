"""Small DCGAN for 28x28 images: architectures, training loop, checkpoints."""
from __future__ import annotations

import hashlib
import logging
import os
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import ntc
from . import tensorcore as tc
from .datasets import ImageSet

log = logging.getLogger(__name__)

IMAGE_SIDE = 28


class GanTrainingError(FloatingPointError):
    pass


@dataclass
class GanConfig:
    latent_dim: int = 64
    base_channels: int = 32
    epochs: int = 10
    batch_size: int = 64
    lr: float = 2e-4
    beta1: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.latent_dim < 2:
            raise ValueError(f"latent_dim must be >= 2, got {self.latent_dim}")
        if self.batch_size < 2:
            raise ValueError(f"batch_size must be >= 2, got {self.batch_size}")
        if self.base_channels < 2 or self.base_channels % 2:
            raise ValueError(f"base_channels must be even and >= 2, got {self.base_channels}")
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")


def build_generator(cfg: GanConfig, seed=None) -> tc.Net:
    """z (k) -> dense -> 7x7 -> two stride-2 deconv blocks -> 3x3 conv -> tanh -> [0, 1]."""
    b = cfg.base_channels
    layers = [
        tc.dense(cfg.latent_dim, 2 * b * 7 * 7),
        tc.reshape((2 * b, 7, 7)),
        tc.batchnorm(2 * b),
        tc.relu(),
        tc.deconv2d(2 * b, b, kernel=5, stride=2),
        tc.batchnorm(b),
        tc.relu(),
        tc.deconv2d(b, b // 2, kernel=5, stride=2),
        tc.batchnorm(b // 2),
        tc.relu(),
        tc.conv2d(b // 2, 1, kernel=3),
        tc.tanh(),
        tc.affine(0.5, 0.5),
    ]
    return tc.Net.build(layers, seed=cfg.seed if seed is None else seed)


def build_discriminator(cfg: GanConfig, seed=None) -> tc.Net:
    b = cfg.base_channels
    layers = [
        tc.conv2d(1, b, kernel=5, stride=2),
        tc.lrelu(0.2),
        tc.conv2d(b, 2 * b, kernel=5, stride=2),
        tc.lrelu(0.2),
        tc.flatten(),
        tc.dense(2 * b * 7 * 7, 1),
        tc.sigmoid(),
    ]
    return tc.Net.build(layers, seed=(cfg.seed + 1) if seed is None else seed)


@dataclass
class GanCheckpoint:
    generator: tc.Net
    discriminator: tc.Net | None
    config: GanConfig
    epoch: int = 0
    data_tag: str = ""
    history: list = field(default_factory=list)

    @property
    def latent_dim(self):
        return self.config.latent_dim


def sample_latent(rng, n, k):
    return rng.uniform(-1.0, 1.0, (n, k)).astype(np.float32)


def generate(ckpt: GanCheckpoint, z):
    """Eval-mode generator output in [0, 1]; (k,) -> (28, 28), (n, k) -> (n, 28, 28)."""
    z = np.asarray(z, dtype=np.float32)
    single = z.ndim == 1
    if single:
        z = z[None]
    if z.ndim != 2 or z.shape[1] != ckpt.latent_dim:
        raise ValueError(f"latent codes must be (n, {ckpt.latent_dim}), got {z.shape}")
    if not np.all(np.abs(z) <= 1.0):
        raise ValueError("latent code outside the box [-1, 1]")
    x = ckpt.generator.forward(z, train=False)[:, 0]
    return x[0] if single else x


def _bce_grads(p, target_real, n):
    """d/dp of the mean binary cross-entropy, and the loss itself."""
    p64 = np.clip(p.astype(np.float64), 1e-12, 1 - 1e-12)
    if target_real:
        loss = -np.mean(np.log(p64))
        g = -1.0 / (n * p64)
    else:
        loss = -np.mean(np.log1p(-p64))
        g = 1.0 / (n * (1.0 - p64))
    return float(loss), g.astype(np.float32)


def _add(a, b):
    return {k: a[k] + b[k] for k in a}


def train_dcgan(data: ImageSet, cfg: GanConfig, ckpt_dir=None, resume: GanCheckpoint | None = None,
                data_tag="", progress=None) -> GanCheckpoint:
    """Non-saturating GAN training, one D step and one G step per batch.

    Deterministic for a fixed seed; resuming from an epoch checkpoint gives
    the same result as an uninterrupted run. If ``ckpt_dir`` is given a
    checkpoint is written after every epoch as ``epoch{NNN}.ntc``.
    """
    images = np.asarray(data.images, dtype=np.float32)
    if images.shape[1:] != (IMAGE_SIDE, IMAGE_SIDE):
        raise ValueError(f"training images must be {IMAGE_SIDE}x{IMAGE_SIDE}, got {images.shape[1:]}")
    if images.min() < 0 or images.max() > 1:
        raise ValueError("training images must lie in [0, 1]")
    if resume is None:
        G = build_generator(cfg)
        D = build_discriminator(cfg)
        start = 0
        history = []
    else:
        G, D, start, history = resume.generator, resume.discriminator, resume.epoch, list(resume.history)
    n = len(images)
    bs = cfg.batch_size
    n_batches = n // bs
    if n_batches < 1:
        raise ValueError(f"need at least one full batch ({bs} images), have {n}")
    ckpt = GanCheckpoint(G, D, cfg, start, data_tag or data.source, history)
    for epoch in range(start, cfg.epochs):
        t0 = time.time()
        # one stream per epoch, so resuming from a checkpoint matches an uninterrupted run
        rng = np.random.default_rng([cfg.seed, epoch])
        perm = rng.permutation(n)
        stats = np.zeros(4)
        for bi in range(n_batches):
            real = images[perm[bi * bs : (bi + 1) * bs]][:, None]
            try:
                # discriminator step
                fake = G.forward(sample_latent(rng, bs, cfg.latent_dim), train=True)
                p_real = D.forward(real, train=True)
                loss_r, g = _bce_grads(p_real, True, bs)
                _, grads_r = D.backward(g)
                p_fake = D.forward(fake, train=True)
                loss_f, g = _bce_grads(p_fake, False, bs)
                _, grads_f = D.backward(g)
                D.adam_step(_add(grads_r, grads_f), cfg.lr, beta1=cfg.beta1)
                # generator step
                fake = G.forward(sample_latent(rng, bs, cfg.latent_dim), train=True)
                p_gen = D.forward(fake, train=True)
                loss_g, g = _bce_grads(p_gen, True, bs)
                gx, _ = D.backward(g, param_grads=False)
                _, grads_g = G.backward(gx)
                G.adam_step(grads_g, cfg.lr, beta1=cfg.beta1)
            except tc.NonFiniteError as exc:
                raise GanTrainingError(f"non-finite activation at epoch {epoch}, batch {bi}: {exc}") from exc
            if not np.isfinite([loss_r, loss_f, loss_g]).all():
                raise GanTrainingError(f"non-finite loss at epoch {epoch}, batch {bi}")
            stats += (loss_r + loss_f, loss_g, p_real.mean(), p_fake.mean())
        stats /= n_batches
        history.append({"epoch": epoch + 1, "loss_d": stats[0], "loss_g": stats[1],
                        "d_real": stats[2], "d_fake": stats[3]})
        log.info("epoch %d: loss_d=%.4f loss_g=%.4f D(real)=%.3f D(fake)=%.3f (%.1fs)",
                 epoch + 1, *stats, time.time() - t0)
        ckpt = GanCheckpoint(G, D, cfg, epoch + 1, data_tag or data.source, history)
        if ckpt_dir is not None:
            save_ntc(ckpt, os.path.join(ckpt_dir, f"epoch{epoch + 1:03d}.ntc"))
        if progress is not None:
            progress(ckpt)
    return ckpt


# -- checkpoint I/O ---------------------------------------------------------

def net_to_tensors(net: tc.Net, prefix: str) -> dict:
    ints, floats = zip(*(spec.encode() for spec in net.layers))
    out = {
        f"{prefix}arch": np.array(ints, dtype=np.int64),
        f"{prefix}arch_f": np.array(floats, dtype=np.float64),
    }
    for k, v in net.params.items():
        out[prefix + k] = v
    for k, v in net.buffers.items():
        out[prefix + k] = v
    return out


def net_from_tensors(t: dict, prefix: str) -> tc.Net:
    arch = t[f"{prefix}arch"]
    arch_f = t[f"{prefix}arch_f"]
    if arch.ndim != 2 or arch.shape[1] != tc.ARCH_WIDTH or arch_f.shape != (arch.shape[0], 2):
        raise ValueError(f"malformed architecture descriptor {prefix}arch {arch.shape}")
    layers = [tc.LayerSpec.decode(r, f) for r, f in zip(arch, arch_f)]
    net = tc.Net(layers)
    skip = {f"{prefix}arch", f"{prefix}arch_f"}
    for k, v in t.items():
        if not k.startswith(prefix) or k in skip:
            continue
        name = k[len(prefix):]
        if name.endswith(".running_mean") or name.endswith(".running_var"):
            net.buffers[name] = v.astype(np.float32, copy=False)
        else:
            net.params[name] = v.astype(np.float32, copy=False)
    net.check_params()
    return net


_META_INT = ("latent_dim", "base_channels", "epochs", "batch_size", "seed")
_META_FLOAT = ("lr", "beta1")


# wall-clock time is logged but not stored, so checkpoints are reproducible
HISTORY_KEYS = ("epoch", "loss_d", "loss_g", "d_real", "d_fake")


def _opt_to_tensors(net: tc.Net, prefix: str) -> dict:
    """Adam moments and step count, so training can resume exactly."""
    st = net.opt_state
    if not st:
        return {}
    out = {f"{prefix}t": np.int64(st["t"])}
    for k in st["m"]:
        out[f"{prefix}m.{k}"] = st["m"][k]
        out[f"{prefix}v.{k}"] = st["v"][k]
    return out


def _opt_from_tensors(t: dict, prefix: str, net: tc.Net):
    if f"{prefix}t" not in t:
        return
    m = {k[len(prefix) + 2:]: v.copy() for k, v in t.items() if k.startswith(prefix + "m.")}
    v = {k[len(prefix) + 2:]: a.copy() for k, a in t.items() if k.startswith(prefix + "v.")}
    if m.keys() != net.params.keys() or v.keys() != net.params.keys():
        raise ValueError(f"optimizer state {prefix}* does not match the network parameters")
    net.opt_state = {"t": int(t[f"{prefix}t"]), "m": m, "v": v}


def ckpt_to_tensors(ckpt: GanCheckpoint) -> dict:
    t = net_to_tensors(ckpt.generator, "G.")
    t.update(_opt_to_tensors(ckpt.generator, "opt.G."))
    if ckpt.discriminator is not None:
        t.update(net_to_tensors(ckpt.discriminator, "D."))
        t.update(_opt_to_tensors(ckpt.discriminator, "opt.D."))
    cfg = asdict(ckpt.config)
    for k in _META_INT:
        t[f"meta.{k}"] = np.int64(cfg[k])
    for k in _META_FLOAT:
        t[f"meta.{k}"] = np.float64(cfg[k])
    t["meta.epoch"] = np.int64(ckpt.epoch)
    t["meta.data_tag"] = ntc.text_tensor(ckpt.data_tag)
    if ckpt.history:
        keys = HISTORY_KEYS
        t["meta.history"] = np.array([[h[k] for k in keys] for h in ckpt.history], dtype=np.float64)
    return t


def ckpt_from_tensors(t: dict) -> GanCheckpoint:
    if "G.arch" not in t:
        raise ValueError("not a GAN checkpoint: no generator architecture tensor 'G.arch'")
    cfg = GanConfig(**{k: int(t[f"meta.{k}"]) for k in _META_INT},
                    **{k: float(t[f"meta.{k}"]) for k in _META_FLOAT})
    G = net_from_tensors(t, "G.")
    _opt_from_tensors(t, "opt.G.", G)
    D = net_from_tensors(t, "D.") if "D.arch" in t else None
    if D is not None:
        _opt_from_tensors(t, "opt.D.", D)
    history = []
    if "meta.history" in t:
        keys = HISTORY_KEYS
        history = [dict(zip(keys, map(float, row))) for row in t["meta.history"]]
    return GanCheckpoint(G, D, cfg, int(t["meta.epoch"]), ntc.tensor_text(t["meta.data_tag"]), history)


def save_ntc(ckpt: GanCheckpoint, path):
    ntc.save(path, ckpt_to_tensors(ckpt))


def load_ntc(path) -> GanCheckpoint:
    return ckpt_from_tensors(ntc.load(path))


def file_sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
