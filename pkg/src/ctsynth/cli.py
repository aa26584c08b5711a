"""Command-line entry point: ``ctsynth <subcommand> ...``.

Every subcommand reads one TOML run config (plus ``--set section.key=value``
overrides) and writes the merged config to ``<out>/config.resolved``.

Exit codes: 0 ok, 1 config or data error, 2 usage error, 3 numerical abort.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from .ablation import ABLATION_ROWS, run_ablation, write_ablation_csv
from .config import ConfigError, RunConfig, dump_config, load_config
from .data import CTImage, DataError, ShapeError, load_image_png, load_map_png, lung_mask, save_image_png
from .metrics import embed, fid, fold_report, get_extractor, psnr, rmse, ssim
from .phantom import dataset_from_config, write_dataset
from .seg import seg_experiment, write_long_report, write_table
from .synthesis import batch_synthesize, composite, load_generator, lung_psnr, synthesize_batch
from .trainer import NumericalAbort, Trainer, validate_stage_arg

log = logging.getLogger("ctsynth")

EXIT_OK, EXIT_CONFIG, EXIT_USAGE, EXIT_NAN = 0, 1, 2, 3


def _config(args) -> RunConfig:
    return load_config(args.config, args.set or ())


def _prepare_out(out, cfg: RunConfig) -> Path:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, out / "config.resolved")
    return out


def _write_report(rows, path) -> None:
    """rows of (metric, fold, value, mean, ci95)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "fold", "value", "mean", "ci95"])
        w.writerows(rows)


def _report_rows(name: str, values, n_folds: int):
    rep = fold_report(values, min(n_folds, len(values)))
    return [(name, i, repr(v), repr(rep.mean), repr(rep.ci95)) for i, v in enumerate(rep.fold_means)]


def save_preview(gen, samples, path, n: int = 8) -> None:
    """Tile [real | composited synthetic] for the first n samples into one PNG."""
    chunk = samples[:n]
    synth = synthesize_batch(gen, [s.map for s in chunk])
    rows = [np.concatenate([s.image.intensities, composite(o, s.image, s.map).intensities], axis=1)
            for s, o in zip(chunk, synth)]
    save_image_png(CTImage(np.concatenate(rows, axis=0)), path, bits=8)


# -- subcommands -------------------------------------------------------------------


def cmd_phantom(args) -> int:
    cfg = _config(args)
    out = _prepare_out(args.out, cfg)
    paths = write_dataset(dataset_from_config(cfg.data, cfg.augment), out)
    for split, p in paths.items():
        print(f"{split}: {p}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    stages = validate_stage_arg(args.stage)
    out = _prepare_out(args.out, cfg)
    manifest = dataset_from_config(cfg.data, cfg.augment)
    train, held = manifest.materialize("train_synth"), manifest.materialize("test_synth")
    tr = Trainer.from_checkpoint(args.resume, train, out, cfg) if args.resume else Trainer(cfg, train, out)
    try:
        tr.run(stages)
    finally:
        tr.close()
    (out / "images").mkdir(exist_ok=True)
    save_preview(tr.G, held, out / "images" / "preview.png")
    synth = synthesize_batch(tr.G, [s.map for s in held])
    rows = []
    rows += _report_rows("lung_psnr", [psnr(o, s.image, mask=lung_mask(s.map).astype(bool))
                                       for o, s in zip(synth, held)], cfg.eval.n_folds)
    rows += _report_rows("ssim", [ssim(composite(o, s.image, s.map), s.image) for o, s in zip(synth, held)],
                         cfg.eval.n_folds)
    _write_report(rows, out / "report.csv")
    print(f"held-out lung PSNR {lung_psnr(tr.G, held):.2f} dB; checkpoints in {out / 'checkpoints'}")
    return EXIT_OK


def cmd_synthesize(args) -> int:
    idx = batch_synthesize(args.manifest, args.checkpoint, args.out)
    print(f"wrote {idx}")
    return EXIT_OK


def _png_stems(d: Path) -> dict[str, Path]:
    if not d.is_dir():
        raise DataError(f"{d}: not a directory")
    return {p.stem: p for p in sorted(d.glob("*.png"))}


def cmd_evaluate(args) -> int:
    pred, ref = _png_stems(Path(args.pred)), _png_stems(Path(args.ref))
    masks = _png_stems(Path(args.masks)) if args.masks else {}
    if not pred:
        raise DataError(f"{args.pred}: no PNG images")
    missing = sorted(set(pred) - set(ref))
    if missing:
        raise DataError(f"{args.ref}: no reference for {missing[:5]}")
    vals = {"psnr": [], "rmse": [], "ssim": []}
    fakes, reals = [], []
    for stem in pred:
        a, b = load_image_png(pred[stem]), load_image_png(ref[stem])
        mask = lung_mask(load_map_png(masks[stem])).astype(bool) if stem in masks else None
        vals["psnr"].append(psnr(a, b, mask=mask))
        vals["rmse"].append(rmse(a, b, mask=mask))
        vals["ssim"].append(ssim(a, b))
        fakes.append(a)
        reals.append(b)
    rows = []
    for name, v in vals.items():
        rows += _report_rows(name, v, args.folds)
    if len(fakes) >= 2:
        ex = get_extractor("random_conv")
        d = fid(embed(reals, ex), embed(fakes, ex))
        rows.append(("fid", "all", repr(d), repr(d), ""))
    out = Path(args.out)
    target = out if out.suffix == ".csv" else out / "report.csv"
    target.parent.mkdir(parents=True, exist_ok=True)
    _write_report(rows, target)
    print(f"wrote {target}")
    return EXIT_OK


def cmd_seg_exp(args) -> int:
    cfg = _config(args)
    out = _prepare_out(args.out, cfg)
    if args.checkpoint:
        gen = load_generator(args.checkpoint)
    else:
        manifest = dataset_from_config(cfg.data, cfg.augment)
        tr = Trainer(cfg, manifest.materialize("train_synth"), out)
        try:
            tr.run()
        finally:
            tr.close()
        gen = tr.G
    results = seg_experiment(cfg, gen)
    write_table(results, out / "report.csv")
    write_long_report(results, out / "report_long.csv")
    print(f"wrote {out / 'report.csv'}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _config(args)
    out = _prepare_out(args.out, cfg)
    rows = args.rows.split(",") if args.rows else ABLATION_ROWS
    unknown = [r for r in rows if r not in ABLATION_ROWS]
    if unknown:
        raise ConfigError(f"--rows: unknown rows {unknown}")
    results = run_ablation(cfg, out, rows)
    write_ablation_csv(results, out / "report.csv")
    print(f"wrote {out / 'report.csv'}")
    return EXIT_OK if all(r.error is None for r in results) else EXIT_CONFIG


# -- parser ------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ctsynth", description="Lung CT synthesis from segmentation maps.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp, required=False):
        sp.add_argument("--config", required=required, help="TOML run config")
        sp.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override a config field")
        sp.add_argument("--out", required=True, help="output directory")

    sp = sub.add_parser("phantom", help="write a phantom dataset as PNGs plus manifests")
    with_config(sp)
    sp.set_defaults(func=cmd_phantom)

    sp = sub.add_parser("train", help="train the synthesizer")
    with_config(sp)
    sp.add_argument("--stage", default="all", help="1, 2, 3 or all")
    sp.add_argument("--resume", help="checkpoint directory to continue from")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("synthesize", help="synthesize and composite every pair of a manifest")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_synthesize)

    sp = sub.add_parser("evaluate", help="PSNR/RMSE/SSIM/FID between two image directories")
    sp.add_argument("--pred", required=True, help="directory of predicted PNGs")
    sp.add_argument("--ref", required=True, help="directory of reference PNGs with the same names")
    sp.add_argument("--masks", help="directory of map PNGs; PSNR/RMSE are then restricted to the lung")
    sp.add_argument("--folds", type=int, default=10)
    sp.add_argument("--out", required=True, help="report CSV path, or a directory to hold report.csv")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("seg-exp", help="segmentation data-mixing experiment")
    with_config(sp)
    sp.add_argument("--checkpoint", help="trained synthesizer; trained from the config if omitted")
    sp.set_defaults(func=cmd_seg_exp)

    sp = sub.add_parser("ablate", help="train and score the ablation variants")
    with_config(sp)
    sp.add_argument("--rows", help="comma-separated subset of: " + ", ".join(ABLATION_ROWS))
    sp.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, DataError, ShapeError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalAbort as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NAN


if __name__ == "__main__":
    sys.exit(main())
