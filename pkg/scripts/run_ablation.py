"""Train every ablation variant at desk scale and write the FID/PSNR table.

    python scripts/run_ablation.py --config configs/desk.toml --out runs/ablation
"""

import argparse
from pathlib import Path

from ctsynth.ablation import ABLATION_ROWS, run_ablation, write_ablation_csv
from ctsynth.config import load_config


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--config", default="configs/desk.toml")
    ap.add_argument("--out", default="runs/ablation")
    ap.add_argument("--rows", help="comma-separated subset of the table rows")
    args = ap.parse_args()
    rows = args.rows.split(",") if args.rows else ABLATION_ROWS
    results = run_ablation(load_config(args.config), Path(args.out), rows)
    path = write_ablation_csv(results, Path(args.out) / "report.csv")
    for r in results:
        print(f"{r.row:<16} FID {r.fid:8.4f}  PSNR {r.psnr:6.2f}" + (f"  error: {r.error}" if r.error else ""))
    print(f"table in {path}")


if __name__ == "__main__":
    main()
