"""Time ``stkg-activity all`` on a synthetic corpus and check repeat runs match.

    python3 scripts/throughput.py --users 10000 --workers 4 --repeat 2
"""

import argparse
import filecmp
import subprocess
import sys
import tempfile
import time
from pathlib import Path


def run(out, a):
    cmd = [sys.executable, "-m", "stkg_activity", "all", "--seed", str(a.seed), "--users", str(a.users),
           "--days", str(a.days), "--out", str(out)]
    if a.workers:
        cmd += ["--workers", str(a.workers)]
    t0 = time.perf_counter()
    subprocess.run(cmd, check=True)
    return time.perf_counter() - t0


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--users", type=int, default=10000)
    p.add_argument("--days", type=int, default=14)
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--repeat", type=int, default=2)
    a = p.parse_args()

    with tempfile.TemporaryDirectory() as tmp:
        outs = [Path(tmp) / f"run{i}" for i in range(a.repeat)]
        for out in outs:
            print(f"{out.name}: {run(out, a):.1f} s")
        names = sorted(f.name for f in outs[0].iterdir() if f.name != "run_timings.json")
        for out in outs[1:]:
            diff = [n for n in names if not filecmp.cmp(outs[0] / n, out / n, shallow=False)]
            print(f"{out.name} vs {outs[0].name}: " + ("identical" if not diff else f"differs in {', '.join(diff)}"))
        print((outs[0] / "run_summary.json").read_text(), end="")


if __name__ == "__main__":
    main()
