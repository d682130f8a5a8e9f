"""With/without the deformable stage across elastic smoothing sizes k.

Thin wrapper over ``regfuse ksweep`` that also prints the per-pair rows.

    python3 scripts/ksweep_study.py --k 15 20 25 30 --seeds 5 --out runs/ksweep
"""

import argparse
import json
from pathlib import Path

from regfuse.cli import main as cli_main


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--k", type=int, nargs="+", default=[15, 20, 25, 30])
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--size", type=int, default=256)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--workers", type=int, default=1)
    ap.add_argument("--out", default="runs/ksweep")
    args = ap.parse_args()
    rc = cli_main(["ksweep", "--synthetic", str(args.size), "--k", *map(str, args.k),
                   "--seeds", str(args.seeds), "--seed", str(args.seed),
                   "--workers", str(args.workers), "--out", args.out])
    rep = json.loads((Path(args.out) / "report.json").read_text())
    for r in rep["runs"]:
        print(f"k={r['k']:>3} seed={r['seed_index']}  pre {r['pre']:.4f}  "
              f"W/O {r['wo']:.4f}  W {r['w']:.4f}  field std {r['phi_std_px']:.2f} px")
    raise SystemExit(rc)


if __name__ == "__main__":
    main()
