#!/usr/bin/env python3
"""Generate a synthetic VIS+NIR dataset for pipeline experiments.

Writes images, labels, logit tensors, a manifest, an identity rig file and
a palette under the output directory, e.g.:

    python scripts/make_synthetic_dataset.py --out /tmp/synth --val 4 --test 4
"""

import argparse

from visnir_fuse.synthetic import SceneParams, write_scene_dataset


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", required=True, help="output dataset directory")
    parser.add_argument("--val", type=int, default=4, help="validation samples")
    parser.add_argument("--test", type=int, default=4, help="test samples")
    parser.add_argument("--size", type=int, default=64, help="image side length")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument(
        "--overconfidence", type=float, default=3.0, help="logit scale factor"
    )
    args = parser.parse_args()
    params = SceneParams(size=args.size, overconfidence=args.overconfidence)
    manifest = write_scene_dataset(
        args.out, n_val=args.val, n_test=args.test, seed=args.seed, params=params
    )
    print(f"wrote dataset manifest to {manifest}")


if __name__ == "__main__":
    main()
