"""Run every CLI stage in order for one config.

    python scripts/run_pipeline.py configs/micro.json --force
"""

import argparse
import sys

from cglo.cli import main
from cglo.config import METHODS


def run(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("config")
    ap.add_argument("--methods", nargs="+", default=list(METHODS), choices=METHODS)
    ap.add_argument("--seed", type=int)
    ap.add_argument("--force", action="store_true")
    ap.add_argument("--jobs", type=int, default=1)
    a = ap.parse_args(argv)
    common = ["--config", a.config, "--jobs", str(a.jobs)]
    if a.seed is not None:
        common += ["--seed", str(a.seed)]
    if a.force:
        common.append("--force")
    stages = [["phantom-gen"], ["simulate"], ["pretrain"]]
    stages += [["reconstruct", "--method", m] for m in a.methods]
    stages.append(["evaluate"])
    for stage in stages:
        code = main(stage + common)
        if code:
            print(f"stage {' '.join(stage)} failed with exit code {code}", file=sys.stderr)
            return code
    return 0


if __name__ == "__main__":
    sys.exit(run())
