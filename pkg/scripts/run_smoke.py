"""Desk-scale training smoke run: held-out lung PSNR before and after training.

    python scripts/run_smoke.py --config configs/desk.toml --out runs/smoke
"""

import argparse
import time
from pathlib import Path

from ctsynth.config import load_config
from ctsynth.phantom import dataset_from_config
from ctsynth.synthesis import lung_psnr
from ctsynth.trainer import Trainer


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--config", default="configs/desk.toml")
    ap.add_argument("--out", default="runs/smoke")
    ap.add_argument("--set", action="append", default=[])
    args = ap.parse_args()
    cfg = load_config(args.config, args.set)
    manifest = dataset_from_config(cfg.data, cfg.augment)
    train, held = manifest.materialize("train_synth"), manifest.materialize("test_synth")
    t0 = time.time()
    tr = Trainer(cfg, train, Path(args.out))
    before = lung_psnr(tr.G, held)
    tr.run()
    tr.close()
    after = lung_psnr(tr.G, held)
    print(f"lung PSNR {before:.2f} -> {after:.2f} dB (+{after - before:.2f}) in {time.time() - t0:.0f}s, "
          f"{len(tr.history)} steps")


if __name__ == "__main__":
    main()
