"""Pipeline configuration: an INI file with one section per concern.

Every ablation toggle (calibration mode, histogram kind, CRF guidance) is
a first-class key so a config file corresponds to one experiment row.
Relative paths resolve against the config file's directory.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field
from pathlib import Path

from .crf import CrfConfig
from .fusion import EVI_BINS, NDVI_BINS, FusionConfig
from .temp_net import LtsTrainConfig
from .veg_index import EviCoefficients

CALIBRATE_MODES = ("off", "global", "local")
HISTOGRAM_KINDS = ("off", "ndvi", "evi")
CRF_GUIDES = ("off", "vis", "nir", "ndvi", "evi")
UNARY_SOURCES = ("auto", "fused", "calibrated")

# the quantitatively evaluated class subset
DEFAULT_EVAL_CLASSES = (
    "asphalt",
    "gravel",
    "soil",
    "low grass",
    "high grass",
    "bush",
    "tree crown",
    "tree trunk",
    "forest",
)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PipelineConfig:
    manifest: Path
    calibration_file: Path
    output: Path
    palette_file: Path | None = None
    calibrate: str = "off"
    histogram: str = "off"
    crf_guide: str = "off"
    fusion: FusionConfig = field(default_factory=FusionConfig)
    crf: CrfConfig = field(default_factory=CrfConfig)
    evi_coeffs: EviCoefficients = field(default_factory=EviCoefficients)
    lts: LtsTrainConfig = field(default_factory=LtsTrainConfig)
    lts_use_nir: bool = False
    ndvi_bins: int = NDVI_BINS
    evi_bins: int = EVI_BINS
    reliability_bins: int = 10
    unary_source: str = "auto"
    dump_marginals: bool = False
    eval_classes: tuple[str, ...] = DEFAULT_EVAL_CLASSES
    undefined_as_zero: bool = False

    def __post_init__(self):
        if self.calibrate not in CALIBRATE_MODES:
            raise ConfigError(f"calibrate must be one of {CALIBRATE_MODES}")
        if self.histogram not in HISTOGRAM_KINDS:
            raise ConfigError(f"histogram must be one of {HISTOGRAM_KINDS}")
        if self.crf_guide not in CRF_GUIDES:
            raise ConfigError(f"crf must be one of {CRF_GUIDES}")
        if self.unary_source not in UNARY_SOURCES:
            raise ConfigError(f"unary must be one of {UNARY_SOURCES}")
        if self.unary_source == "fused" and self.histogram == "off":
            raise ConfigError("unary = fused requires a histogram kind")

    def index_kinds(self) -> tuple[str, ...]:
        """Vegetation-index kinds any enabled stage depends on."""
        kinds = []
        if self.histogram in ("ndvi", "evi"):
            kinds.append(self.histogram)
        if self.crf_guide in ("ndvi", "evi") and self.crf_guide not in kinds:
            kinds.append(self.crf_guide)
        return tuple(kinds)

    def bins_for(self, kind: str) -> int:
        return self.ndvi_bins if kind == "ndvi" else self.evi_bins


def _get(parser: configparser.ConfigParser, section: str, key: str, default=None):
    if parser.has_option(section, key):
        return parser.get(section, key)
    return default


def load_config(path: str | Path) -> PipelineConfig:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config not found: {path}")
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",))
    parser.read(path)
    if not parser.has_section("paths"):
        raise ConfigError(f"{path}: missing [paths] section")
    root = path.parent

    def resolve(value: str | None) -> Path | None:
        if value is None:
            return None
        p = Path(value)
        return p if p.is_absolute() else root / p

    manifest = resolve(_get(parser, "paths", "manifest"))
    calibration = resolve(_get(parser, "paths", "calibration"))
    output = resolve(_get(parser, "paths", "output"))
    if manifest is None or calibration is None or output is None:
        raise ConfigError(f"{path}: [paths] needs manifest, calibration and output")

    def getfloat(section, key, default):
        raw = _get(parser, section, key)
        return default if raw is None else float(raw)

    def getint(section, key, default):
        raw = _get(parser, section, key)
        return default if raw is None else int(raw)

    def getbool(section, key, default):
        raw = _get(parser, section, key)
        if raw is None:
            return default
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{path}: boolean expected for {section}.{key}, got {raw!r}")

    classes_raw = _get(parser, "eval", "classes")
    eval_classes = (
        DEFAULT_EVAL_CLASSES
        if classes_raw is None
        else tuple(name.strip() for name in classes_raw.split(",") if name.strip())
    )

    try:
        return PipelineConfig(
            manifest=manifest,
            calibration_file=calibration,
            output=output,
            palette_file=resolve(_get(parser, "paths", "palette")),
            calibrate=_get(parser, "stages", "calibrate", "off").lower(),
            histogram=_get(parser, "stages", "histogram", "off").lower(),
            crf_guide=_get(parser, "stages", "crf", "off").lower(),
            fusion=FusionConfig(beta=getfloat("fusion", "beta", 0.75)),
            crf=CrfConfig(
                theta_alpha=getfloat("crf", "theta_alpha", 10.0),
                theta_beta=getfloat("crf", "theta_beta", 13.0),
                theta_gamma=getfloat("crf", "theta_gamma", 3.0),
                w_appearance=getfloat("crf", "w_appearance", 10.0),
                w_smoothness=getfloat("crf", "w_smoothness", 3.0),
                iterations=getint("crf", "iterations", 10),
            ),
            evi_coeffs=EviCoefficients(
                c1=getfloat("evi", "c1", 6.0), c2=getfloat("evi", "c2", 7.5)
            ),
            lts=LtsTrainConfig(
                learning_rate=getfloat("calibration", "lts_learning_rate", 1e-3),
                patch=getint("calibration", "lts_patch", 64),
                max_epochs=getint("calibration", "lts_epochs", 100),
                patience=getint("calibration", "lts_patience", 5),
                min_improvement=getfloat("calibration", "lts_min_improvement", 1e-5),
                hidden=getint("calibration", "lts_hidden", 16),
                seed=getint("calibration", "lts_seed", 0),
            ),
            lts_use_nir=getbool("calibration", "lts_use_nir", False),
            ndvi_bins=getint("fusion", "ndvi_bins", NDVI_BINS),
            evi_bins=getint("fusion", "evi_bins", EVI_BINS),
            reliability_bins=getint("calibration", "reliability_bins", 10),
            unary_source=_get(parser, "crf", "unary", "auto").lower(),
            dump_marginals=getbool("crf", "dump_marginals", False),
            eval_classes=eval_classes,
            undefined_as_zero=getbool("eval", "undefined_as_zero", False),
        )
    except (ValueError, TypeError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"{path}: {exc}") from exc
