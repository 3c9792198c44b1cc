"""Command-line pipeline: simulate -> reconstruct -> project -> eval -> montage.

Every command writes ``<out>.manifest`` next to its output. The manifest
holds the full canonical command line, so ``tomoprior rerun <manifest>``
repeats the run (single-threaded unless told otherwise).

Exit codes: 0 success, 2 invalid input or flags, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import logging
import math
import os
import shlex
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import __version__, ntc
from .classical import RlsConfig, RlsDivergenceError, fbp, rls
from .datasets import IdxFormatError, ImageSet, gen_phantoms, imageset_from_tensors, load_idx
from .gan import GanCheckpoint, GanConfig, GanTrainingError, file_sha256, load_ntc, save_ntc, train_dcgan
from .metrics import EvalReport, batch_eval
from .ntc import NtcFormatError
from .prior import ProjectionError, RobustOpts, project_measurement, project_plain, project_robust
from .projector import Geometry, Sinogram, forward_project, make_limited_geometry
from .tensorcore import NonFiniteError

log = logging.getLogger("tomoprior")

BEAM_CODES = {"parallel": 0, "fan": 1}
MNIST_URL = "https://storage.googleapis.com/cvdf-datasets/mnist/"
MNIST_FILES = ("train-images-idx3-ubyte.gz", "t10k-images-idx3-ubyte.gz")


class UsageError(ValueError):
    pass


# -- helpers ----------------------------------------------------------------

def read_config(path):
    """Plain ``key = value`` lines; ``#`` starts a comment. Keys may use - or _."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{n}: expected key=value, got {line!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            out[key.replace("-", "_")] = value
    return out


def load_images(path, key="images", limit=None, subset_seed=None) -> ImageSet:
    with open(path, "rb") as fh:
        head = fh.read(4)
    if head == ntc.MAGIC:
        data = imageset_from_tensors(ntc.load(path), key)
    else:
        data = load_idx(path)
    if subset_seed is not None and limit:
        return data.subset(min(limit, len(data)), seed=subset_seed)
    if limit:
        return ImageSet(data.images[:limit], data.source, data.seed)
    return data


def geometry_from_tensors(t) -> Geometry:
    for k in ("angles", "beam", "detector_count"):
        if k not in t:
            raise UsageError(f"file has no {k!r} tensor; is it a simulate output?")
    beam = {v: k for k, v in BEAM_CODES.items()}[int(t["beam"])]
    dso = float(t["fan_dso"]) if "fan_dso" in t and float(t["fan_dso"]) > 0 else None
    side = int(t["image_side"]) if "image_side" in t else int(t["detector_count"])
    return Geometry(beam, tuple(t["angles"].tolist()), int(t["detector_count"]), side, dso)


def geometry_tensors(geom: Geometry, arc):
    return {
        "angles": np.asarray(geom.angles_deg, dtype=np.float64),
        "beam": np.int64(BEAM_CODES[geom.beam]),
        "detector_count": np.int64(geom.detector_count),
        "image_side": np.int64(geom.image_side),
        "fan_dso": np.float64(geom.fan_dso or -1.0),
        "arc_deg": np.float64(arc),
    }


def carry(t, *keys):
    return {k: t[k] for k in keys if k in t}


PATH_FLAGS = {"input", "ckpt", "gt", "inputs", "out", "ckpt_dir", "plot", "dest"}


def _abspath(dest, v):
    if dest == "pred" and "=" in str(v):
        method, path = str(v).split("=", 1)
        return f"{method}={os.path.abspath(path)}"
    return os.path.abspath(v) if dest in PATH_FLAGS else v


def _canonical_argv(sub, ns):
    """Full command line rebuilt from the parsed flags, with absolute paths."""
    argv = [ns.command]
    for action in sub._actions:
        if not action.option_strings or action.dest in ("help", "config", "threads"):
            continue
        val = getattr(ns, action.dest, None)
        flag = action.option_strings[-1]
        if isinstance(action, argparse._StoreTrueAction):
            if val:
                argv.append(flag)
        elif val is None:
            continue
        elif isinstance(val, list):
            argv.append(flag)
            argv.extend(str(_abspath(action.dest, v)) for v in val)
        else:
            argv.extend([flag, str(_abspath(action.dest, val))])
    return argv


def write_manifest(ns, sub, outputs, inputs=(), extra=None):
    """Atomically write ``<out>.manifest`` for every output file."""
    argv = _canonical_argv(sub, ns)
    lines = [
        f"subcommand={ns.command}",
        f"argv={shlex.join(argv)}",
        f"toolkit_version={__version__}",
        f"threads={ns.threads}",
    ]
    for action in sub._actions:
        if action.option_strings and action.dest not in ("help",):
            lines.append(f"flag.{action.dest}={getattr(ns, action.dest, None)}")
    for path in inputs:
        lines.append(f"input={os.path.abspath(path)} sha256={file_sha256(path)}")
    for k, v in (extra or {}).items():
        lines.append(f"{k}={v}")
    for out in outputs:
        body = lines + [f"output={os.path.abspath(out)}", f"output_sha256={file_sha256(out)}"]
        ntc.atomic_write(out + ".manifest", ("\n".join(body) + "\n").encode("utf-8"))


def read_manifest(path):
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if "=" in line:
                k, v = line.rstrip("\n").split("=", 1)
                out.setdefault(k, v)
    return out


def _map(fn, items, threads):
    if threads <= 1:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


# -- commands ---------------------------------------------------------------

def cmd_simulate(ns, sub):
    if ns.phantoms:
        data = gen_phantoms(ns.phantoms, ns.side, ns.seed)
    elif ns.input:
        data = load_images(ns.input, limit=ns.limit, subset_seed=ns.subset_seed)
    else:
        raise UsageError("simulate needs --input or --phantoms")
    geom = make_limited_geometry(ns.beam, ns.arc, ns.step, data.side, fan_dso=ns.fan_dso)
    sino = forward_project(data.images, geom).data
    tensors = {"images": data.images, "sino": sino, "source": ntc.text_tensor(data.source)}
    tensors.update(geometry_tensors(geom, ns.arc))
    ntc.save(ns.out, tensors)
    log.info("simulated %d images, %d views -> %s", len(data), geom.n_views, ns.out)
    write_manifest(ns, sub, [ns.out], [ns.input] if ns.input else ())


def cmd_reconstruct(ns, sub):
    t = ntc.load(ns.input)
    geom = geometry_from_tensors(t)
    if "sino" not in t:
        raise UsageError(f"{ns.input} has no 'sino' tensor")
    sino = t["sino"]
    if ns.method == "fbp":
        recon = fbp(Sinogram(sino, geom), ns.window)
        meta = {"window": ntc.text_tensor(ns.window)}
    else:
        cfg = RlsConfig(lam=ns.lam, iters=ns.iters, nonneg=not ns.no_nonneg, reg_kind=ns.reg)
        chunks = np.array_split(np.arange(len(sino)), max(1, min(ns.threads, len(sino))))
        parts = _map(lambda idx: rls(Sinogram(sino[idx], geom), cfg), chunks, ns.threads)
        recon = np.concatenate(parts)
        meta = {"rls_lambda": np.float64(cfg.lam), "rls_iters": np.int64(cfg.iters),
                "rls_nonneg": np.int64(cfg.nonneg), "rls_reg": ntc.text_tensor(cfg.reg_kind)}
    tensors = {"images": recon.astype(np.float32), "method": ntc.text_tensor(ns.method)}
    tensors.update(meta)
    tensors.update(carry(t, "angles", "beam", "detector_count", "image_side", "fan_dso", "arc_deg", "sino"))
    ntc.save(ns.out, tensors)
    write_manifest(ns, sub, [ns.out], [ns.input])


def cmd_train_gan(ns, sub):
    if ns.phantoms:
        data = gen_phantoms(ns.phantoms, 28, ns.data_seed)
    elif ns.input:
        data = load_images(ns.input, limit=ns.limit)
    else:
        raise UsageError("train-gan needs --input or --phantoms")
    cfg = GanConfig(latent_dim=ns.latent_dim, base_channels=ns.base_channels, epochs=ns.epochs,
                    batch_size=ns.batch_size, lr=ns.lr, beta1=ns.beta1, seed=ns.seed)
    ckpt = train_dcgan(data, cfg, ckpt_dir=ns.ckpt_dir, data_tag=data.source)
    save_ntc(ckpt, ns.out)
    write_manifest(ns, sub, [ns.out], [ns.input] if ns.input else ())


def _project_one(method, ckpt, opts, geom):
    local = GanCheckpoint(ckpt.generator.copy(), None, ckpt.config, ckpt.epoch, ckpt.data_tag)

    def run(item):
        i, seed_img, sino = item
        o = RobustOpts(**{**vars(opts), "seed": opts.seed + i})
        if method == "plain":
            return project_plain(seed_img, local, o)
        if method == "robust":
            return project_robust(seed_img, local, o)
        return project_measurement(Sinogram(sino, geom), local, o)

    return run


def cmd_project(ns, sub):
    t = ntc.load(ns.input)
    ckpt = load_ntc(ns.ckpt)
    opts = RobustOpts(t1=ns.t1, t2=ns.t2, lr_s=ns.lr_s, lr_g=ns.lr_g, cycles=ns.cycles,
                      restarts=ns.restarts, seed=ns.seed, plain_steps=ns.plain_steps)
    geom = None
    if ns.method == "measurement":
        geom = geometry_from_tensors(t)
        if "sino" not in t:
            raise UsageError(f"{ns.input} has no 'sino' tensor")
        n = len(t["sino"])
        seeds = [None] * n
        sinos = list(t["sino"])
    else:
        seeds = list(np.clip(imageset_from_tensors(t).images, 0.0, 1.0))
        n = len(seeds)
        sinos = [None] * n
    if ns.limit:
        n = min(n, ns.limit)
    items = [(i, seeds[i], sinos[i]) for i in range(n)]
    # one private generator copy per worker thread
    runners = {}

    def run(item):
        import threading
        key = threading.get_ident()
        if key not in runners:
            runners[key] = _project_one(ns.method, ckpt, opts, geom)
        return runners[key](item)

    results = _map(run, items, ns.threads)
    tensors = {
        "images": np.stack([r.x_star for r in results]),
        "z": np.stack([r.z_star for r in results]),
        "loss_trace": np.stack([r.loss_trace for r in results]),
        "restart": np.array([r.restart for r in results], dtype=np.int64),
        "final_loss": np.array([r.final_loss for r in results]),
        "method": ntc.text_tensor(ns.method),
    }
    tensors.update(carry(t, "angles", "beam", "detector_count", "image_side", "fan_dso", "arc_deg"))
    ntc.save(ns.out, tensors)
    write_manifest(ns, sub, [ns.out], [ns.input, ns.ckpt],
                   {"checkpoint_sha256": file_sha256(ns.ckpt),
                    "alternating_iterations": opts.total_iterations,
                    "plain_latent_steps": opts.latent_steps})


def cmd_eval(ns, sub):
    gt_t = ntc.load(ns.gt)
    gt = imageset_from_tensors(gt_t).images
    report = EvalReport()
    inputs = [ns.gt]
    for item in ns.pred:
        if "=" not in item:
            raise UsageError(f"--pred expects METHOD=FILE, got {item!r}")
        method, path = item.split("=", 1)
        t = ntc.load(path)
        pred = imageset_from_tensors(t).images
        n = min(len(pred), len(gt)) if ns.allow_partial else len(pred)
        if n != len(gt) and not ns.allow_partial:
            raise UsageError(f"{path}: {len(pred)} images but ground truth has {len(gt)}")
        arc = ns.arc if ns.arc is not None else float(t.get("arc_deg", gt_t.get("arc_deg", np.nan)))
        report.extend(batch_eval(pred[:n], gt[:n], method, arc))
        inputs.append(path)
    ntc.atomic_write(ns.out, report.to_csv().encode("utf-8"))
    for (method, arc), agg in sorted(report.aggregates().items()):
        print(f"{method:12s} arc={arc:g}  n={agg['n']:3d}  PSNR {agg['psnr']['mean']:6.2f} +- {agg['psnr']['std']:.2f}"
              f"  SSIM {agg['ssim']['mean']:.3f} +- {agg['ssim']['std']:.3f}")
    outputs = [ns.out]
    if ns.plot:
        plot_panels(report, ns.plot)
        outputs.append(ns.plot)
    write_manifest(ns, sub, outputs, inputs)


def plot_panels(report: EvalReport, path):
    """Box plots of PSNR and SSIM per method/arc."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    groups = sorted(report.groups().items())
    labels = [f"{m}\n{a:g} deg" for (m, a), _ in groups]
    fig, axes = plt.subplots(1, 2, figsize=(max(6, 1.6 * len(groups)) * 1.6, 4))
    for ax, metric in zip(axes, ("psnr", "ssim")):
        ax.boxplot([[getattr(r, metric) for r in rows if np.isfinite(getattr(r, metric))]
                    for _, rows in groups])
        ax.set_xticks(range(1, len(labels) + 1), labels)
        ax.set_title(metric.upper())
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)


def montage_array(images, cols):
    images = np.asarray(images, dtype=np.float64)
    k, h, w = images.shape
    rows = math.ceil(k / cols)
    grid = np.zeros((rows * h, cols * w))
    for i, img in enumerate(images):
        r, c = divmod(i, cols)
        grid[r * h : (r + 1) * h, c * w : (c + 1) * w] = img
    return np.floor(255.0 * np.clip(grid, 0.0, 1.0) + 0.5).astype(np.uint8)


def cmd_montage(ns, sub):
    from PIL import Image

    if ns.cols < 1:
        raise UsageError("--cols must be >= 1")
    stacks = []
    for path in ns.inputs:
        imgs = imageset_from_tensors(ntc.load(path), ns.key).images
        stacks.append(imgs[: ns.limit] if ns.limit else imgs)
    grid = montage_array(np.concatenate(stacks), ns.cols)
    os.makedirs(os.path.dirname(os.path.abspath(ns.out)), exist_ok=True)
    Image.fromarray(grid, mode="L").save(ns.out, format="PNG")
    write_manifest(ns, sub, [ns.out], ns.inputs)


def cmd_rerun(ns, sub):
    man = read_manifest(ns.manifest)
    if "argv" not in man:
        raise UsageError(f"{ns.manifest} is not a tomoprior manifest")
    argv = shlex.split(man["argv"])
    if ns.out:
        flag = "--out"
        if flag not in argv:
            raise UsageError("recorded command has no --out flag to override")
        argv[argv.index(flag) + 1] = ns.out
    return main(argv + ["--threads", str(ns.threads)])


def cmd_fetch_mnist(ns, sub):
    """Download the MNIST image files (network access required)."""
    import urllib.request

    os.makedirs(ns.dest, exist_ok=True)
    for name in MNIST_FILES:
        target = os.path.join(ns.dest, name)
        if os.path.exists(target):
            log.info("%s already present", target)
            continue
        log.info("fetching %s", ns.base_url + name)
        with urllib.request.urlopen(ns.base_url + name, timeout=60) as resp:
            ntc.atomic_write(target, resp.read())
        load_idx(target)  # validate


# -- parser -----------------------------------------------------------------

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value file; command-line flags override it")
    common.add_argument("--threads", type=int, default=int(os.environ.get("TOMOPRIOR_THREADS", "1")),
                        help="worker threads for per-image parallelism (1 = deterministic)")
    common.add_argument("--log-level", default="INFO")

    p = argparse.ArgumentParser(prog="tomoprior", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    subs = p.add_subparsers(dest="command", required=True)

    s = subs.add_parser("simulate", parents=[common], help="forward-project an image set")
    s.add_argument("--input", help="IDX image file or NTC file with an 'images' tensor")
    s.add_argument("--phantoms", type=int, help="generate this many ellipse phantoms instead")
    s.add_argument("--seed", type=int, default=0, help="phantom seed")
    s.add_argument("--side", type=int, default=28, help="phantom side length")
    s.add_argument("--limit", type=int, help="use at most this many input images")
    s.add_argument("--subset-seed", type=int, help="pick --limit images by seeded shuffle")
    s.add_argument("--arc", type=float, required=True, help="angular range in degrees")
    s.add_argument("--step", type=float, default=1.0, help="view spacing in degrees")
    s.add_argument("--beam", choices=("parallel", "fan"), default="parallel")
    s.add_argument("--fan-dso", type=float, help="source-to-centre distance (fan beam)")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)

    s = subs.add_parser("reconstruct", parents=[common], help="FBP or RLS seed reconstructions")
    s.add_argument("--input", required=True, help="simulate output")
    s.add_argument("--method", choices=("fbp", "rls"), default="rls")
    s.add_argument("--window", choices=("ramlak", "hann"), default="ramlak")
    s.add_argument("--lam", type=float, default=0.01)
    s.add_argument("--iters", type=int, default=200)
    s.add_argument("--reg", choices=("smoothness", "identity"), default="smoothness")
    s.add_argument("--no-nonneg", action="store_true")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_reconstruct)

    s = subs.add_parser("train-gan", parents=[common], help="train the DCGAN generator")
    s.add_argument("--input", help="IDX image file or NTC image set")
    s.add_argument("--phantoms", type=int, help="train on this many ellipse phantoms instead")
    s.add_argument("--data-seed", type=int, default=0)
    s.add_argument("--limit", type=int, help="use the first N training images")
    s.add_argument("--latent-dim", type=int, default=64)
    s.add_argument("--base-channels", type=int, default=32)
    s.add_argument("--epochs", type=int, default=10)
    s.add_argument("--batch-size", type=int, default=64)
    s.add_argument("--lr", type=float, default=2e-4)
    s.add_argument("--beta1", type=float, default=0.5)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--ckpt-dir", help="also write a checkpoint after every epoch here")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train_gan)

    s = subs.add_parser("project", parents=[common], help="project seeds onto the generator range")
    s.add_argument("--method", choices=("plain", "robust", "measurement"), required=True)
    s.add_argument("--input", required=True, help="reconstruct output (or simulate output for measurement)")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--t1", type=int, default=15)
    s.add_argument("--t2", type=int, default=15)
    s.add_argument("--lr-s", type=float, default=1e-2)
    s.add_argument("--lr-g", type=float, default=8e-2)
    s.add_argument("--cycles", type=int, default=84)
    s.add_argument("--restarts", type=int, default=4)
    s.add_argument("--plain-steps", type=int, help="latent steps for plain/measurement (default 2*cycles*t2)")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--limit", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_project)

    s = subs.add_parser("eval", parents=[common], help="PSNR/SSIM table against ground truth")
    s.add_argument("--gt", required=True, help="file whose 'images' tensor is the ground truth")
    s.add_argument("--pred", nargs="+", required=True, metavar="METHOD=FILE")
    s.add_argument("--arc", type=float, help="arc label (default: read from the files)")
    s.add_argument("--allow-partial", action="store_true", help="evaluate only the first len(pred) images")
    s.add_argument("--plot", help="also write PSNR/SSIM box plots to this PNG")
    s.add_argument("--out", required=True, help="CSV path")
    s.set_defaults(func=cmd_eval)

    s = subs.add_parser("montage", parents=[common], help="8-bit grayscale PNG grid of images")
    s.add_argument("--inputs", nargs="+", required=True)
    s.add_argument("--key", default="images")
    s.add_argument("--limit", type=int, help="images taken from each input")
    s.add_argument("--cols", type=int, default=10)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_montage)

    s = subs.add_parser("rerun", parents=[common], help="repeat a run from its manifest")
    s.add_argument("manifest")
    s.add_argument("--out", help="write to this path instead of the recorded one")
    s.set_defaults(func=cmd_rerun)

    s = subs.add_parser("fetch-mnist", parents=[common], help="download MNIST image files (needs network)")
    s.add_argument("--dest", required=True)
    s.add_argument("--base-url", default=MNIST_URL)
    s.set_defaults(func=cmd_fetch_mnist)
    return p


def _apply_config(parser, argv):
    """Re-parse with config-file values as defaults so flags still win."""
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    choices = parser._subparsers._group_actions[0].choices
    command = next((a for a in argv if a in choices), None)
    if not known.config or command is None:
        return parser.parse_args(argv)
    cfg = read_config(known.config)
    sub = choices[command]
    dests = {a.dest: a for a in sub._actions if a.option_strings}
    defaults = {}
    for key, raw in cfg.items():
        if key not in dests or key in ("help", "config"):
            raise UsageError(f"{known.config}: unknown setting {key!r} for '{command}'")
        action = dests[key]
        if isinstance(action, argparse._StoreTrueAction):
            defaults[key] = raw.lower() in ("1", "true", "yes", "on")
        elif action.nargs in ("+", "*"):
            defaults[key] = [action.type(v) if action.type else v for v in shlex.split(raw)]
        else:
            defaults[key] = action.type(raw) if action.type else raw
    for a in sub._actions:
        if a.dest in defaults:
            a.required = False
    sub.set_defaults(**defaults)
    return parser.parse_args(argv)


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        ns = _apply_config(parser, argv)
    except UsageError as exc:
        print(f"tomoprior: error: {exc}", file=sys.stderr)
        return 2
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=getattr(logging, str(ns.log_level).upper(), logging.INFO),
                        format="%(levelname)s %(name)s: %(message)s")
    sub = parser._subparsers._group_actions[0].choices[ns.command]
    if ns.threads < 1:
        print("tomoprior: error: --threads must be >= 1", file=sys.stderr)
        return 2
    try:
        from threadpoolctl import threadpool_limits
        with threadpool_limits(limits=1 if ns.threads == 1 else None):
            rc = ns.func(ns, sub)
    except (ProjectionError, RlsDivergenceError, GanTrainingError, NonFiniteError, FloatingPointError) as exc:
        print(f"tomoprior: numeric failure: {exc}", file=sys.stderr)
        return 3
    except (UsageError, ValueError, KeyError, NtcFormatError, IdxFormatError, FileNotFoundError,
            NotImplementedError) as exc:
        print(f"tomoprior: error: {exc}", file=sys.stderr)
        return 2
    return int(rc or 0)


if __name__ == "__main__":
    sys.exit(main())
