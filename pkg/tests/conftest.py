from pathlib import Path

import pytest

from visnir_fuse.synthetic import write_scene_dataset

CONFIG_TEMPLATE = """[paths]
manifest = {manifest}
calibration = {calibration}
palette = {palette}
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
classes = asphalt, soil, low grass, high grass
"""


def write_config(
    path: Path,
    dataset: Path,
    output: Path,
    calibrate="off",
    histogram="off",
    crf="off",
    beta=0.75,
    iterations=10,
) -> Path:
    path.write_text(
        CONFIG_TEMPLATE.format(
            manifest=dataset / "manifest.txt",
            calibration=dataset / "rig.txt",
            palette=dataset / "palette.txt",
            output=output,
            calibrate=calibrate,
            histogram=histogram,
            crf=crf,
            beta=beta,
            iterations=iterations,
        )
    )
    return path


@pytest.fixture(scope="session")
def scene_dataset(tmp_path_factory) -> Path:
    """A small synthetic VIS+NIR dataset shared across pipeline tests."""
    root = tmp_path_factory.mktemp("dataset")
    write_scene_dataset(root, n_val=3, n_test=3, seed=0)
    return root
