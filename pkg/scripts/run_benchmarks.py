#!/usr/bin/env python3
"""Run the full desk-scale benchmark suite (several hours on CPU).

Executes the shipped configs in dependency order from the repo root;
each config caches under results/<confighash>, so interrupting and
rerunning resumes where it stopped. Failures are logged and the
remaining configs still run.
"""

import json
import sys
import time
import traceback
from pathlib import Path

from wbmark.harness import ExperimentConfig, run_experiment

ORDER = [
    "configs/bm1_baseline.json",
    "configs/diction_bm1.json",
    "configs/deepsigns_bm1.json",
    "configs/uchida_bm1.json",
    "configs/riga_bm1.json",
    "configs/bm4_baseline.json",
    "configs/diction_bm4.json",
    "configs/deepsigns_bm4.json",
    "configs/pia_lenet.json",
]


def main() -> int:
    only = sys.argv[1:]
    failures = []
    for path in ORDER:
        if only and Path(path).stem not in only:
            continue
        t0 = time.time()
        print(f"=== {path} ===", flush=True)
        try:
            record = run_experiment(ExperimentConfig.from_json(path),
                                    log=lambda m: print(f"  {m}", flush=True))
            agg = record["aggregate"]
            print(f"  done in {time.time() - t0:.0f}s: "
                  f"{json.dumps(agg, sort_keys=True)}", flush=True)
        except Exception as e:
            failures.append((path, repr(e)))
            print(f"  FAILED after {time.time() - t0:.0f}s: {e!r}", flush=True)
            traceback.print_exc()
    if failures:
        print("failures:", failures)
        return 1
    print("all configs complete")
    return 0


if __name__ == "__main__":
    sys.exit(main())
