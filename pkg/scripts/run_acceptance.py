"""Train every run the acceptance criteria depend on, into runs/acceptance/.

Seeds that already finished with the current training code and config are skipped,
so the script can be interrupted and restarted. tests/test_acceptance.py reads the
same directories.

    python scripts/run_acceptance.py             # everything, in criterion order
    python scripts/run_acceptance.py keydoor     # only runs whose name contains "keydoor"
"""
from __future__ import annotations

import argparse
import logging
import time
from pathlib import Path

from mcpo import harness
from mcpo.config import load_config

ROOT = Path(__file__).resolve().parent.parent
OUTPUT = ROOT / "runs" / "acceptance"
ABLATIONS = sorted((ROOT / "configs" / "ablations").glob("*.yaml"))
PENDULUM = ROOT / "configs" / "pendulum-mcpo.yaml"
KEYDOOR_MCPO = ROOT / "configs" / "keydoor-mcpo.yaml"
KEYDOOR_KL = ROOT / "configs" / "keydoor-kl-fixed.yaml"
EXPERIMENTS = [KEYDOOR_MCPO, KEYDOOR_KL, *ABLATIONS, PENDULUM]


def acceptance_config(path, output=OUTPUT):
    cfg = load_config(path)
    cfg.output_dir = str(output)
    return cfg


def main(argv=None) -> None:
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("filter", nargs="?", default="", help="substring of config names to run")
    p.add_argument("--fresh", action="store_true", help="retrain even when finished results exist")
    p.add_argument("--output", default=str(OUTPUT))
    args = p.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    for path in EXPERIMENTS:
        cfg = acceptance_config(path, args.output)
        if args.filter not in cfg.name:
            continue
        t0 = time.perf_counter()
        root = harness.run(cfg, reuse=not args.fresh)
        print(f"{cfg.name}: {(root / 'summary.csv').read_text().splitlines()[1]}  "
              f"({time.perf_counter() - t0:.0f}s)", flush=True)


if __name__ == "__main__":
    main()
