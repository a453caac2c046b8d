"""Command-line entry point: ``ssit <command> ...``.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import statistics
import sys
import time
from pathlib import Path

import numpy as np

from . import evaluate as ev
from . import pretrain as pt
from . import saliency as sl
from . import vit
from .augment import make_rng
from .config import ConfigError, RunConfig
from .data import make_synthetic, read_dataset, write_dataset
from .image_io import ImageReadError, read_image, write_image
from .imaging import resize_bilinear
from .numerics import CorruptRecordError, no_grad

log = logging.getLogger("ssit")

IMAGE_SUFFIXES = {".png", ".pgm", ".ppm"}
EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def list_images(root) -> list[Path]:
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"{root}: not a directory")
    return sorted(p for p in root.rglob("*") if p.suffix.lower() in IMAGE_SUFFIXES and p.is_file())


def load_config(path: str | None, seed: int | None) -> RunConfig:
    cfg = RunConfig.load(path) if path else RunConfig()
    if seed is not None:
        cfg.seed = seed
    return cfg.validate()


# -- commands ---------------------------------------------------------------

def cmd_saliency(args) -> int:
    files = list_images(args.input)
    cache = sl.SaliencyCache(args.out)
    if not (Path(args.out) / cache.MANIFEST).exists():
        (Path(args.out) / cache.MANIFEST).write_text("")
    failed = 0
    for path in files:
        try:
            image = read_image(path)
            cache.get(image, args.backend)
        except (ImageReadError, ValueError) as exc:
            failed += 1
            log.error("%s: %s", path, exc)
    log.info("saliency: %d images, %d failed, %d cache entries", len(files), failed, len(cache))
    return EXIT_DATA if failed else EXIT_OK


def _pretrain_images(cfg: RunConfig) -> list[np.ndarray]:
    root = Path(cfg.paths.data)
    if (root / "labels.csv").exists():
        ds = read_dataset(root)
        images, _ = ds.split("train")
    else:
        images = [read_image(p) for p in list_images(root)]
    size = cfg.vit.image_size
    out = []
    for img in images:
        if img.shape[:2] != (size, size):
            img = resize_bilinear(img, (size, size))
        if img.shape[2] != cfg.vit.in_chans:
            raise DataError(f"images have {img.shape[2]} channels, model expects {cfg.vit.in_chans}")
        out.append(img)
    if len(out) < 2:
        raise DataError(f"{root}: need at least 2 training images, found {len(out)}")
    return out


def cmd_pretrain(args) -> int:
    if args.resume:
        state = pt.load_checkpoint(args.resume)
        cfg = state.config
        if args.config:
            log.info("--resume: using the configuration stored in %s", args.resume)
    else:
        state = None
        cfg = load_config(args.config, args.seed)
        if args.epochs is not None:
            cfg.pretrain.epochs = args.epochs
            cfg.pretrain.warmup_epochs = min(cfg.pretrain.warmup_epochs, args.epochs)
        cfg.validate()
    out = Path(args.out or cfg.paths.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfg.dumps() + "\n")

    images = _pretrain_images(cfg)
    cache = sl.SaliencyCache(cfg.paths.cache)
    sals = [cache.get(img, cfg.saliency.backend) for img in images]
    log.info("pretrain: %d images, %d patches, keep %d per key view", len(images), cfg.vit.num_patches,
             cfg.vit.num_patches - sl.num_removed(cfg.vit.num_patches, cfg.pretrain.masking_ratio))

    def report(m):
        if m["step"] % max(1, args.log_every) == 0:
            log.info("step %(step)d epoch %(epoch)d lr %(lr).3g l_cl %(l_cl).4f l_seg %(l_seg).4f "
                     "loss %(loss).4f keep %(keep)d", m)

    t0 = time.time()
    state, history = pt.run_pretraining(cfg, images, sals, state=state, metrics_path=out / "metrics.jsonl",
                                        checkpoint_dir=out, on_metrics=report)
    log.info("pretrain: %d steps in %.1fs, checkpoints in %s", len(history), time.time() - t0, out)
    return EXIT_OK


def cmd_init(args) -> int:
    cfg = load_config(args.config, args.seed)
    params = vit.init_vit(cfg.vit, make_rng((cfg.seed, 0x5EED)))
    vit.save_vit(args.out, params, cfg.vit)
    log.info("wrote random-init encoder to %s", args.out)
    return EXIT_OK


def _load_eval_data(path, cfg):
    ds = read_dataset(path)
    size = cfg.image_size
    splits = {}
    for name in ("train", "val", "test"):
        imgs, grades = ds.split(name)
        if not imgs:
            raise DataError(f"{path}: split {name!r} is empty")
        arr = np.stack([img if img.shape[:2] == (size, size) else resize_bilinear(img, (size, size))
                        for img in imgs]).astype(np.float32)
        splits[name] = (arr, grades)
    return splits, ds.num_grades


def cmd_eval(args) -> int:
    backbone, vcfg = pt.load_backbone(args.ckpt)
    ecfg = load_config(args.config, None).eval
    splits, grades = _load_eval_data(args.data, vcfg)
    (tr, ytr), (va, yva), (te, yte) = splits["train"], splits["val"], splits["test"]
    kappas = []
    if args.protocol == "knn":
        R = lambda x: ev.extract(backbone, vcfg, x)
        kappas.append(ev.knn_kappa(R(tr), ytr, R(te), yte, ecfg.k, grades))
    elif args.protocol == "linear":
        R = lambda x: ev.extract(backbone, vcfg, x)
        rtr, rva, rte = R(tr), R(va), R(te)
        for seed in args.seeds:
            res = ev.linear_probe(rtr, ytr, rva, yva, rte, yte, epochs=ecfg.probe_epochs, lr=ecfg.probe_lr,
                                  num_grades=grades, batch_size=ecfg.probe_batch_size,
                                  weight_decay=ecfg.weight_decay, seed=seed)
            kappas.append(res.test_kappa)
    else:
        for seed in args.seeds:
            res = ev.fine_tune(backbone, vcfg, tr, ytr, va, yva, te, yte, epochs=ecfg.finetune_epochs,
                               lr=ecfg.finetune_lr, num_grades=grades, batch_size=ecfg.finetune_batch_size,
                               weight_decay=ecfg.weight_decay, seed=seed)
            kappas.append(res.test_kappa)
    mean = statistics.fmean(kappas)
    sd = statistics.stdev(kappas) if len(kappas) > 1 else 0.0
    record = {
        "ckpt": str(args.ckpt), "protocol": args.protocol, "train": len(ytr), "val": len(yva),
        "test": len(yte), "kappa_mean": mean, "kappa_sd": sd, "kappas": kappas,
    }
    table = (f"{'protocol':<10}{'train':>7}{'val':>7}{'test':>7}   kappa\n"
             f"{args.protocol:<10}{len(ytr):>7}{len(yva):>7}{len(yte):>7}   {mean:.4f} ± {sd:.4f}\n")
    print(table, end="")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "eval_report.txt", "a") as f:
        f.write(table)
    with open(out / "eval_records.jsonl", "a") as f:
        f.write(json.dumps(record, sort_keys=True) + "\n")
    return EXIT_OK


def heatmap(values: np.ndarray) -> np.ndarray:
    top = float(values.max())
    return values / top if top > 0 else np.zeros_like(values)


def cmd_visualize(args) -> int:
    image = read_image(args.input)
    h, w = image.shape[:2]
    if args.what == "attention":
        params, vcfg = pt.load_backbone(args.ckpt)
    else:
        state = pt.load_checkpoint(args.ckpt)
        vcfg, params = state.config.vit, state.backbone()
        decoder = {k: v for k, v in state.query.items() if k.startswith("decoder.")}
    size = vcfg.image_size
    view = image if (h, w) == (size, size) else resize_bilinear(image, (size, size))
    tokens = vit.patchify(view.astype(np.float32)[None], vcfg.patch_size)
    with no_grad():
        out = vit.forward(params, vcfg, tokens, record_attention=args.what == "attention")
        if args.what == "attention":
            grid = vit.attention_map(out)[0]
            log.info("attention map sums to %.6f", grid.sum())
            rows = np.minimum((np.arange(h) * grid.shape[0]) // h, grid.shape[0] - 1)
            cols = np.minimum((np.arange(w) * grid.shape[1]) // w, grid.shape[1] - 1)
            picture = heatmap(grid[rows][:, cols])
        else:
            seg = pt.decode_segmentation(out.patch_reprs, decoder, vcfg.patch_size, out.grid).data[0]
            picture = seg if (h, w) == (size, size) else np.clip(resize_bilinear(seg, (h, w)), 0.0, 1.0)
    write_image(args.out, picture)
    log.info("wrote %s (%d×%d)", args.out, w, h)
    return EXIT_OK


def cmd_synth(args) -> int:
    n_eval = args.n_eval if args.n_eval is not None else max(args.grades, args.n // 4)
    ds = make_synthetic(args.n, n_eval, n_eval, grades=args.grades, size=args.size, seed=args.seed or 0)
    write_dataset(ds, args.out)
    log.info("wrote %d images (%d grades) to %s", len(ds.images), args.grades, args.out)
    return EXIT_OK


# -- parser -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ssit", description="Saliency-guided self-supervised ViT pretraining and evaluation.")
    p.add_argument("--seed", type=int, default=None, help="override the configuration seed")
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--print-config", action="store_true", help="print the effective configuration and exit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("saliency", help="precompute saliency maps into a cache directory")
    s.add_argument("--input", required=True)
    s.add_argument("--backend", choices=sl.BACKENDS, default="fine")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_saliency)

    s = sub.add_parser("pretrain", help="run saliency-guided contrastive pretraining")
    s.add_argument("--config", dest="sub_config", metavar="CONFIG")
    s.add_argument("--resume", help="training-state checkpoint to continue from")
    s.add_argument("--epochs", type=int, help="override pretrain.epochs")
    s.add_argument("--out", help="run directory (default: paths.out)")
    s.add_argument("--log-every", type=int, default=10)
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("init", help="write a randomly initialized encoder checkpoint")
    s.add_argument("--config", dest="sub_config", metavar="CONFIG")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_init)

    s = sub.add_parser("eval", help="evaluate an encoder checkpoint on a labelled dataset")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--protocol", choices=("finetune", "linear", "knn"), required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--config", dest="sub_config", metavar="CONFIG")
    s.add_argument("--seeds", type=int, nargs="+", default=[0], help="seeds for the trained protocols")
    s.add_argument("--out", default=".", help="directory for the report files")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("visualize", help="render an attention or segmentation map")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--input", required=True)
    s.add_argument("--what", choices=("attention", "segmentation"), required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_visualize)

    s = sub.add_parser("synth", help="generate the synthetic graded dataset")
    s.add_argument("--grades", type=int, default=3)
    s.add_argument("--n", type=int, default=600, help="training images")
    s.add_argument("--n-eval", type=int, help="images in each of val and test (default n/4)")
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(format="%(levelname)s %(message)s", stream=sys.stderr)
    log.setLevel(logging.DEBUG if args.verbose else logging.INFO)
    if getattr(args, "sub_config", None):
        args.config = args.sub_config
    try:
        if args.print_config:
            print(load_config(args.config, args.seed).dumps())
            return EXIT_OK
        if args.command is None:
            parser.print_usage(sys.stderr)
            return EXIT_CONFIG
        return args.func(args)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except pt.NumericalError as exc:
        log.error("numerical failure: %s", exc)
        return EXIT_NUMERIC
    except FileNotFoundError as exc:
        log.error("not found: %s", exc.filename or exc)
        return EXIT_DATA
    except (DataError, ImageReadError, CorruptRecordError, ValueError) as exc:
        log.error("data error: %s", exc)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
