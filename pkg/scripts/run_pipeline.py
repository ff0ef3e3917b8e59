"""Run gen-data, train, eval and uq for one config, skipping finished stages.

    python3 scripts/run_pipeline.py scripts/configs/desk_case1.json
    python3 scripts/run_pipeline.py scripts/configs/full_one2one.json --reference fem --threads 8

The full_* configs are the full 64x64 / 1024-sample / 500-epoch setting and
take many hours on a CPU; desk_* configs finish in a few minutes.
"""

import argparse
import sys
import time
from pathlib import Path

from fieldreg.cli import main
from fieldreg.config import load_config


def run(argv, label):
    t0 = time.time()
    code = main(argv)
    print(f"# {label}: exit {code} in {time.time() - t0:.1f}s", flush=True)
    if code:
        sys.exit(code)


def parse_args():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("config")
    p.add_argument("--out")
    p.add_argument("--threads", type=int)
    p.add_argument("--reference", choices=["fem", "none"], default="none")
    p.add_argument("--force", action="store_true", help="rerun stages whose outputs exist")
    return p.parse_args()


def main_script():
    args = parse_args()
    cfg = load_config(args.config)
    out = Path(args.out or cfg.paths.out_dir)
    common = ["--config", args.config, "--out", str(out)]
    if args.threads:
        common += ["--threads", str(args.threads)]
    done = lambda key: not args.force and cfg.path(key, out).exists()  # noqa: E731
    if not (done("train_data") and done("test_data")):
        run(["gen-data", *common], "gen-data")
    if not done("checkpoint"):
        run(["train", *common], "train")
    run(["eval", *common], "eval")
    run(["uq", *common, "--reference", args.reference], "uq")


if __name__ == "__main__":
    main_script()
