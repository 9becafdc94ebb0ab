"""Segmentation post-processing with VIS+NIR vegetation indices.

Pipeline stages: align NIR to the VIS frame via a ground-plane homography,
compute NDVI/EVI, calibrate network logits by (local) temperature scaling,
fuse calibrated probabilities with per-class index histograms, refine with
fully-connected CRF mean-field inference, and report per-class IoU.
"""

__version__ = "0.1.0"

from .calibration import (
    GlobalTemperature,
    LocalTemperature,
    apply_temperature,
    confidence,
    expected_calibration_error,
    fit_global_temperature,
    fit_local_temperature,
    nll,
    reliability,
    softmax,
)
from .crf import CrfConfig, GuidanceImage, mean_field, naive_mean_field
from .fusion import (
    ClassHistogramModel,
    FusionConfig,
    accumulate_histograms,
    fuse,
    histogram_weights,
)
from .geometry import (
    CameraIntrinsics,
    Homography,
    RigGeometry,
    plane_homography,
    warp_to_vis,
)
from .lattice import gaussian_filter_bank
from .manifest import DatasetManifest, SampleRecord, load_manifest, save_manifest
from .metrics import ConfusionMatrix, accumulate_confusion, iou
from .rasters import (
    IGNORE_VALUE,
    FloatGrid,
    LabelMap,
    LabelPalette,
    LogitVolume,
    ProbabilityVolume,
    RasterImage,
    DEFAULT_PALETTE,
    load_raster,
    save_labelmap_png,
    validate_labels,
)
from .tensor_io import load_grid, load_tensor, save_tensor
from .veg_index import EviCoefficients, IndexImage, evi, ndvi
