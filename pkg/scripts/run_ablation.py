#!/usr/bin/env python3
"""Run the six-row ablation over a dataset and print the resulting table.

Rows: plain softmax baseline, histogram fusion (NDVI / EVI), and CRF
refinement guided by NDVI / EVI / VIS. Each row gets its own output
directory under --runs and a config file next to it.

    python scripts/make_synthetic_dataset.py --out /tmp/synth
    python scripts/run_ablation.py --dataset /tmp/synth --runs /tmp/synth_runs
"""

import argparse
import sys
from pathlib import Path

from visnir_fuse.cli import main as cli_main
from visnir_fuse.pipeline import write_report

CONFIG_TEMPLATE = """[paths]
manifest = {dataset}/manifest.txt
calibration = {dataset}/rig.txt
palette = {dataset}/palette.txt
output = {output}

[stages]
calibrate = {calibrate}
histogram = {histogram}
crf = {crf}

[fusion]
beta = {beta}

[crf]
iterations = {iterations}

[eval]
classes = {classes}
"""

VARIANTS = {
    "baseline": dict(calibrate="off", histogram="off", crf="off"),
    "hist_ndvi": dict(calibrate="global", histogram="ndvi", crf="off"),
    "hist_evi": dict(calibrate="global", histogram="evi", crf="off"),
    "crf_ndvi": dict(calibrate="global", histogram="ndvi", crf="ndvi"),
    "crf_evi": dict(calibrate="global", histogram="evi", crf="evi"),
    "crf_vis": dict(calibrate="global", histogram="off", crf="vis"),
}


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--dataset", required=True, help="dataset directory")
    parser.add_argument("--runs", required=True, help="output root for all rows")
    parser.add_argument("--beta", type=float, default=0.75)
    parser.add_argument("--iterations", type=int, default=10)
    parser.add_argument("--workers", type=int, default=1)
    parser.add_argument("--calibrate", default=None, help="override calibration mode for fused rows (global|local)")
    parser.add_argument(
        "--classes",
        default="asphalt, soil, low grass, high grass",
        help="comma-separated evaluation class subset",
    )
    args = parser.parse_args()
    dataset = Path(args.dataset).resolve()
    runs = Path(args.runs).resolve()
    runs.mkdir(parents=True, exist_ok=True)

    for name, toggles in VARIANTS.items():
        toggles = dict(toggles)
        if args.calibrate and toggles["calibrate"] != "off":
            toggles["calibrate"] = args.calibrate
        config_path = runs / f"{name}.ini"
        config_path.write_text(
            CONFIG_TEMPLATE.format(
                dataset=dataset,
                output=runs / name,
                beta=args.beta,
                iterations=args.iterations,
                classes=args.classes,
                **toggles,
            )
        )
        stages = ["align", "index", "calibrate", "fuse"]
        if toggles["crf"] != "off":
            stages.append("crf")
        stages.append("eval")
        print(f"== {name}")
        for stage in stages:
            code = cli_main(
                [stage, "--config", str(config_path), "--workers", str(args.workers)]
            )
            if code != 0:
                return code
    write_report(runs, runs / "ablation.csv", runs / "ablation.txt")
    print()
    print((runs / "ablation.txt").read_text())
    return 0


if __name__ == "__main__":
    sys.exit(main())
