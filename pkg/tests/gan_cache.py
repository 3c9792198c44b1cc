"""The trained phantom GAN shared by the slow suites, cached under .cache/."""
from __future__ import annotations

import logging
import os
from pathlib import Path

from tomoprior.datasets import gen_phantoms
from tomoprior.gan import GanConfig, load_ntc, save_ntc, train_dcgan

CACHE = Path(os.environ.get("TOMOPRIOR_CACHE", Path(__file__).resolve().parents[1] / ".cache"))
TRAIN_N, TRAIN_SEED = 10000, 0
HELD_OUT_SEED = 1
CONFIG = GanConfig(epochs=50, seed=0)


def cache_path(cfg=CONFIG):
    return CACHE / (f"gan_phantoms{TRAIN_N}_s{TRAIN_SEED}_k{cfg.latent_dim}_c{cfg.base_channels}"
                    f"_b{cfg.batch_size}_e{cfg.epochs}_seed{cfg.seed}.ntc")


def training_set():
    return gen_phantoms(TRAIN_N, 28, TRAIN_SEED)


def trained_gan(cfg=CONFIG):
    """Load the cached checkpoint, training it first if absent (about 70 min on one core)."""
    path = cache_path(cfg)
    if not path.exists():
        logging.getLogger(__name__).warning("training the acceptance GAN; cached at %s", path)
        ckpt = train_dcgan(training_set(), cfg)
        path.parent.mkdir(parents=True, exist_ok=True)
        save_ntc(ckpt, path)
    return load_ntc(path)
