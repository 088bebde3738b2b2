#!/usr/bin/env python3
"""End-to-end demo on the tiny fixture detector: generate fixtures, then run
convert -> optimize -> calibrate -> quantize -> bench -> eval and print the
accuracy/latency summary per precision mode.

    python scripts/run_pipeline.py --out-dir runs/pipeline
"""

import argparse
import json
import os
import subprocess
import sys

HERE = os.path.dirname(os.path.abspath(__file__))
sys.path.insert(0, os.path.join(HERE, "..", "src"))


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out-dir", default="runs/pipeline")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--iters", type=int, default=20)
    args = parser.parse_args()

    fixture_dir = os.path.join(args.out_dir, "fixtures")
    subprocess.run([sys.executable, os.path.join(HERE, "make_fixtures.py"),
                    "--out-dir", fixture_dir, "--seed", str(args.seed)],
                   check=True, stdout=subprocess.DEVNULL)

    from jetforge import cli
    code = cli.main([
        "pipeline",
        "--cfg", os.path.join(fixture_dir, "tiny.cfg"),
        "--weights", os.path.join(fixture_dir, "tiny.weights"),
        "--calib-dir", os.path.join(fixture_dir, "calib"),
        "--eval-manifest", os.path.join(fixture_dir, "eval", "manifest.jsonl"),
        "--eval-images", os.path.join(fixture_dir, "eval"),
        "--out-dir", args.out_dir,
        "--seed", str(args.seed),
        "--iters", str(args.iters),
        "--warmup", "2",
    ])
    if code != 0:
        sys.exit(code)

    with open(os.path.join(args.out_dir, "pipeline_manifest.json")) as f:
        manifest = json.load(f)
    print("\nartifacts:")
    for name in sorted(manifest["files"]):
        print(f"  {name}  sha256={manifest['files'][name][:16]}...")


if __name__ == "__main__":
    main()
