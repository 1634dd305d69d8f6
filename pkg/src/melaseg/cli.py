"""Command-line entry point.

Subcommands: synth, train-detect, train-seg, finetune, infer, eval, gradcheck.
Every ``key`` of the configuration is also a flag ``--key value``; a config
file (``--config path``) holds ``key = value`` lines with ``#`` comments.

Exit status: 0 success, 1 usage, 2 data error, 3 numeric failure.

The ``eval`` CSV report has the columns
``stem,tp,fp,tn,fn,accuracy,dice,jaccard,sensitivity,specificity``: one row per
image, then a ``__mean__`` row (mean of per-image values, undefined entries
excluded) and a ``__pooled__`` row (metrics of the summed counts).
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import checkpoint, netpbm
from .config import KEYS, WORKSPACE_ENV, ConfigError, RunConfig, read_config_file
from .data import DatasetError, generate_synthetic, images_to_tensor, load_dataset, read_manifest
from .experiments import crop_patches
from .detector import (Detector, build_detector, finetune_head, train_detector, write_labels)
from .metrics import evaluate_run
from .pipeline import PipelineConfig, overlay, run_pipeline
from .segmenter import build_segmenter, compute_mfb, train_segmenter
from .tensor import AdamState, ShapeError

log = logging.getLogger("melaseg")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
COMMANDS = ("synth", "train-detect", "train-seg", "finetune", "infer", "eval", "gradcheck")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="melaseg", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="key = value configuration file")
    for key in KEYS:
        p.add_argument(f"--{key.name}", dest=key.name, metavar="VALUE",
                       help=f"{key.help} [default: {key.default or 'see description'}]")
    return p


# ---------------------------------------------------------------- helpers

def _dtype(cfg: RunConfig):
    return np.float32 if cfg["dtype"] == "float32" else np.float64


def _split_samples(cfg: RunConfig, split: str):
    data = cfg.data_dir
    samples = load_dataset(data / "images", data / "masks")
    manifest = data / "manifest.txt"
    if split == "all" or not manifest.exists():
        return samples
    assignment = read_manifest(manifest)
    return [s for s in samples if assignment.get(s.stem) == split]


def _new_detector(cfg: RunConfig) -> Detector:
    return build_detector(cfg.detector_config(), cfg["det.backbone"], seed=cfg["seed"], dtype=_dtype(cfg))


def _load_detector(cfg: RunConfig, path: Path) -> Detector:
    model = _new_detector(cfg)
    model.load_state_dict(checkpoint.load(path))
    return model


def _load_segmenter(cfg: RunConfig, path: Path):
    model = build_segmenter(cfg.seg_config(), seed=cfg["seed"], dtype=_dtype(cfg))
    model.load_state_dict(checkpoint.load(path))
    return model


def _write_log(path: Path, header, rows):
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _fit_detector(cfg: RunConfig, model: Detector, epochs: int, tag: str):
    train = _split_samples(cfg, "train")
    if not train:
        raise DatasetError(["no training samples"])
    x = images_to_tensor([s.image for s in train], side=model.cfg.input_side, dtype=_dtype(cfg))
    boxes = [s.boxes for s in train]
    every = cfg["det.checkpoint_every"]

    def on_epoch(epoch, history):
        log.info("%s epoch %d loss %.6f", tag, epoch + 1, history.epoch_loss[-1])
        if every and (epoch + 1) % every == 0:
            checkpoint.save(cfg.checkpoint_dir / f"{tag}_epoch{epoch + 1:05d}.fys", model.state_dict())

    state = AdamState(lr=cfg["det.lr"], beta1=cfg["det.momentum"])
    history = train_detector(model, x, boxes, epochs, cfg["det.batch_size"], cfg["det.lr"], cfg["seed"],
                             state=state, augment=cfg["det.augment"],
                             lr_final_fraction=cfg["det.lr_final_fraction"], on_epoch=on_epoch)
    checkpoint.save(cfg.checkpoint_dir / f"{tag}.fys", model.state_dict())
    _write_log(cfg.workspace / "reports" / f"{tag}_loss.csv",
               ["epoch", "total", "localization", "confidence_obj", "confidence_noobj", "classification"],
               [[e + 1, f"{t:.8g}"] + [f"{p:.8g}" for p in parts]
                for e, (t, parts) in enumerate(zip(history.epoch_loss, history.parts))])
    print(f"{tag}: final loss {history.epoch_loss[-1]:.6f}; checkpoint {cfg.checkpoint_dir / (tag + '.fys')}")


# ---------------------------------------------------------------- commands

def cmd_synth(cfg: RunConfig) -> int:
    spec = cfg.synth_spec()
    samples = generate_synthetic(spec, cfg.data_dir)
    print(f"wrote {len(samples)} samples to {cfg.data_dir}")
    return EXIT_OK


def cmd_train_detect(cfg: RunConfig) -> int:
    _fit_detector(cfg, _new_detector(cfg), cfg["det.epochs"], "detector")
    return EXIT_OK


def cmd_train_seg(cfg: RunConfig) -> int:
    seg_cfg = cfg.seg_config()
    train = _split_samples(cfg, "train")
    if not any(s.boxes for s in train):
        raise DatasetError(["no lesion patches in the training split"])
    x, y = crop_patches(train, seg_cfg, cfg["seg.margin"], _dtype(cfg))
    try:
        weights = compute_mfb(list(y)) if cfg["seg.mfb"] else None
    except ValueError as exc:
        raise DatasetError([str(exc)]) from exc
    if weights:
        print(f"MFB weights: background {weights.background:.6f} lesion {weights.lesion:.6f}")
    model = build_segmenter(seg_cfg, seed=cfg["seed"], dtype=_dtype(cfg))

    def on_epoch(epoch, history):
        log.info("segmenter epoch %d loss %.6f", epoch + 1, history.epoch_loss[-1])

    history = train_segmenter(model, x, y, weights, seg_cfg.epochs, seg_cfg.batch_size, seg_cfg.lr,
                              cfg["seed"], lr_final_fraction=cfg["seg.lr_final_fraction"], on_epoch=on_epoch)
    checkpoint.save(cfg.checkpoint_dir / "segmenter.fys", model.state_dict())
    _write_log(cfg.workspace / "reports" / "segmenter_loss.csv", ["epoch", "loss"],
               [[e + 1, f"{v:.8g}"] for e, v in enumerate(history.epoch_loss)])
    print(f"segmenter: final loss {history.epoch_loss[-1]:.6f}")
    return EXIT_OK


def cmd_finetune(cfg: RunConfig) -> int:
    source = cfg["finetune.source"] or str(cfg.checkpoint_dir / "detector.fys")
    model = _new_detector(cfg)
    finetune_head(model, checkpoint.load(source), freeze=cfg["finetune.freeze"], seed=cfg["seed"])
    _fit_detector(cfg, model, cfg["finetune.epochs"], "finetuned")
    return EXIT_OK


def cmd_infer(cfg: RunConfig) -> int:
    det = _load_detector(cfg, cfg.checkpoint_dir / ("finetuned.fys" if (cfg.checkpoint_dir / "finetuned.fys").exists()
                                                    else "detector.fys"))
    seg = _load_segmenter(cfg, cfg.checkpoint_dir / "segmenter.fys")
    in_dir = cfg.path("infer.input", cfg.data_dir / "images")
    out_dir = cfg.path("infer.output", cfg.workspace / "infer")
    stems = sorted(p.stem for p in in_dir.glob("*.ppm"))
    manifest = cfg.data_dir / "manifest.txt"
    if cfg["infer.split"] != "all" and not cfg["infer.input"] and manifest.exists():
        assignment = read_manifest(manifest)
        stems = [s for s in stems if assignment.get(s) == cfg["infer.split"]]
    pcfg = PipelineConfig(margin=cfg["seg.margin"])

    def one(stem):
        image = netpbm.read_ppm(in_dir / f"{stem}.ppm")
        return stem, image, run_pipeline(det, seg, image, pcfg)

    # layers cache activations, so concurrent runs need separate models; keep
    # the thread pool for file decoding only when workers > 1
    if cfg["workers"] > 1:
        with ThreadPoolExecutor(cfg["workers"]) as pool:
            images = dict(pool.map(lambda s: (s, netpbm.read_ppm(in_dir / f"{s}.ppm")), stems))
        results = [(s, images[s], run_pipeline(det, seg, images[s], pcfg)) for s in stems]
    else:
        results = [one(s) for s in stems]
    empty = 0
    for stem, image, res in results:
        write_labels_dir = out_dir / "labels"
        write_labels_dir.mkdir(parents=True, exist_ok=True)
        write_labels(write_labels_dir / f"{stem}.txt", [d.box for d in res.detections],
                     [d.class_index for d in res.detections], [d.confidence for d in res.detections])
        netpbm.write_mask(out_dir / "masks" / f"{stem}.pgm", res.merged)
        for k, m in enumerate(res.masks):
            netpbm.write_mask(out_dir / "detection_masks" / f"{stem}_{k}.pgm", m)
        netpbm.write(out_dir / "overlays" / f"{stem}.ppm", overlay(image, res))
        empty += res.status != "ok"
    print(f"processed {len(results)} images into {out_dir} ({empty} without detections)")
    return EXIT_OK


def cmd_eval(cfg: RunConfig) -> int:
    pred = cfg.path("eval.pred", cfg.workspace / "infer")
    truth = cfg.path("eval.truth", cfg.data_dir)
    manifest = truth / "manifest.txt"
    only = None
    if cfg["infer.split"] != "all" and manifest.exists():
        only = {k for k, v in read_manifest(manifest).items() if v == cfg["infer.split"]}
    report = evaluate_run(pred, truth, cfg["eval.ap_iou"], only)
    sys.stdout.write(report.table_text())
    out = cfg.path("eval.report", cfg.workspace / "reports" / "eval.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(report.csv_text())
    print(f"report written to {out}")
    if report.missing:
        print(f"unmatched stems: {' '.join(report.missing)}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


def cmd_gradcheck(cfg: RunConfig) -> int:
    from .gradcheck import run_suite

    failures = 0
    worst: dict[str, float] = {}
    for name, seed, rep in run_suite(range(cfg["gradcheck.seeds"])):
        worst[name] = max(worst.get(name, 0.0), rep.max_rel_error)
        if not rep.passed:
            failures += 1
            print(f"FAIL {name} seed {seed}: max rel error {rep.max_rel_error:.3e} "
                  f"(tolerance {rep.tolerance:g}, {rep.probes} probes)")
    for name, err in worst.items():
        print(f"{name:<14} max rel error {err:.3e}")
    return EXIT_NUMERIC if failures else EXIT_OK


HANDLERS = {
    "synth": cmd_synth,
    "train-detect": cmd_train_detect,
    "train-seg": cmd_train_seg,
    "finetune": cmd_finetune,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        file_values = read_config_file(args.config) if args.config else {}
        overrides = {k.name: getattr(args, k.name) for k in KEYS if getattr(args, k.name) is not None}
        cfg = RunConfig(file_values, overrides)
    except (UsageError, ConfigError, OSError) as exc:
        print(f"melaseg: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    print(f"# melaseg {args.command} (workspace from --workspace or ${WORKSPACE_ENV})")
    print("\n".join(cfg.lines()))
    try:
        from threadpoolctl import threadpool_limits
        with threadpool_limits(1):
            return HANDLERS[args.command](cfg)
    except ConfigError as exc:
        print(f"melaseg: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DatasetError, netpbm.NetpbmError, checkpoint.CheckpointError, ShapeError,
            FileNotFoundError, KeyError) as exc:
        print(f"melaseg: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except FloatingPointError as exc:
        print(f"melaseg: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
