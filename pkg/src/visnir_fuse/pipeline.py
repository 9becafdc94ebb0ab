"""Staged experiment pipeline over a dataset manifest.

Stages communicate through files under `<output>/<stage>/` so any stage can
be re-run or its artifacts swapped out (logits in particular come from an
external exporter). Each stage writes a `run.json` receipt with the tool
version, the stage-relevant config and the input hashes; re-running with an
unchanged receipt is a no-op unless forced.
"""

from __future__ import annotations

import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__, calibration as calib
from .config import PipelineConfig
from .crf import GuidanceImage, mean_field
from .fusion import (
    FusionConfig,
    accumulate_histograms,
    fuse,
    load_histogram_csv,
    save_histogram_csv,
)
from .geometry import load_rig_file, plane_homography, warp_to_vis
from .manifest import SampleRecord, load_manifest
from .metrics import ConfusionMatrix, accumulate_confusion, iou, save_metrics_csv
from .rasters import (
    IGNORE_VALUE,
    LabelMap,
    LogitVolume,
    ProbabilityVolume,
    RasterImage,
    DEFAULT_PALETTE,
    load_labelmap,
    load_palette,
    load_raster,
    save_labelmap_png,
    save_raster,
)
from .tensor_io import load_tensor, read_tensor, write_tensor
from .veg_index import IndexImage, evi, ndvi, save_index_png
from .rasters import FloatGrid

STAGES = ("align", "index", "calibrate", "fuse", "crf", "eval")


class PipelineError(RuntimeError):
    pass


def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _mask_to_png(mask: np.ndarray, path: Path) -> None:
    save_raster(RasterImage((mask.astype(np.uint8) * 255)), path)


def _mask_from_png(path: Path) -> np.ndarray:
    return load_raster(path).samples > 127


@dataclass
class Pipeline:
    config: PipelineConfig
    workers: int = 1
    force: bool = False

    def __post_init__(self):
        self.manifest = load_manifest(self.config.manifest)
        self.palette = (
            load_palette(self.config.palette_file)
            if self.config.palette_file
            else DEFAULT_PALETTE
        )
        self._input_hashes = None

    # ---------------------------------------------------------------- plumbing

    def _dir(self, stage: str) -> Path:
        return self.config.output / stage

    def _map(self, fn, items):
        items = list(items)
        if self.workers > 1 and len(items) > 1:
            with ThreadPoolExecutor(max_workers=self.workers) as pool:
                return list(pool.map(fn, items))
        return [fn(item) for item in items]

    def _dataset_hashes(self) -> dict:
        if self._input_hashes is None:
            hashes = {"manifest": _sha256(self.config.manifest)}
            for s in self.manifest.samples:
                for field in ("vis", "nir", "label", "logits"):
                    p = getattr(s, field)
                    if p is not None:
                        hashes[f"{s.sample_id}/{field}"] = _sha256(p)
            self._input_hashes = hashes
        return self._input_hashes

    def _receipt(self, stage: str, stage_config: dict, extra_inputs: dict) -> dict:
        return {
            "stage": stage,
            "tool_version": __version__,
            "config": stage_config,
            "inputs": {**self._dataset_hashes(), **extra_inputs},
        }

    def _should_skip(self, stage: str, receipt: dict) -> bool:
        run_file = self._dir(stage) / "run.json"
        if self.force or not run_file.exists():
            return False
        try:
            return json.loads(run_file.read_text()) == receipt
        except json.JSONDecodeError:
            return False

    def _finish(self, stage: str, receipt: dict) -> None:
        run_file = self._dir(stage) / "run.json"
        run_file.parent.mkdir(parents=True, exist_ok=True)
        run_file.write_text(json.dumps(receipt, sort_keys=True, indent=1))

    def _upstream(self, stage: str, hint: str) -> str:
        """Hash of an upstream stage receipt, with an actionable error."""
        run_file = self._dir(stage) / "run.json"
        if not run_file.exists():
            raise PipelineError(
                f"missing {stage} artifacts under {self._dir(stage)}; {hint}"
            )
        return _sha256(run_file)

    # ------------------------------------------------------------------ stages

    def run_align(self) -> None:
        """Warp every NIR image into its VIS frame and record validity masks."""
        cfg = self.config
        receipt = self._receipt(
            "align", {"calibration": str(cfg.calibration_file.name)},
            {"calibration_file": _sha256(cfg.calibration_file)},
        )
        if self._should_skip("align", receipt):
            return
        k_vis, k_nir, rig = load_rig_file(cfg.calibration_file)
        h = plane_homography(k_vis, k_nir, rig)
        out = self._dir("align")

        def one(sample: SampleRecord):
            vis = load_raster(sample.vis)
            nir = load_raster(sample.nir)
            warped, mask = warp_to_vis(nir, h, vis.width, vis.height)
            save_raster(warped, out / f"{sample.sample_id}_nir.png")
            _mask_to_png(mask, out / f"{sample.sample_id}_mask.png")

        self._map(one, self.manifest.samples)
        self._finish("align", receipt)

    def _aligned_nir(self, sample: SampleRecord) -> tuple[RasterImage, np.ndarray]:
        out = self._dir("align")
        nir_path = out / f"{sample.sample_id}_nir.png"
        if not nir_path.exists():
            raise PipelineError(
                f"missing aligned NIR for {sample.sample_id}; run the align stage first"
            )
        return load_raster(nir_path), _mask_from_png(out / f"{sample.sample_id}_mask.png")

    def run_index(self) -> None:
        """Compute every vegetation index kind the configuration needs."""
        cfg = self.config
        kinds = cfg.index_kinds()
        receipt = self._receipt(
            "index",
            {"kinds": list(kinds), "evi_c1": cfg.evi_coeffs.c1, "evi_c2": cfg.evi_coeffs.c2},
            {"align": self._upstream("align", "run the align stage first")} if kinds else {},
        )
        if self._should_skip("index", receipt):
            return
        out = self._dir("index")
        out.mkdir(parents=True, exist_ok=True)

        def one(sample: SampleRecord):
            if not kinds:
                return
            vis = load_raster(sample.vis)
            nir, mask = self._aligned_nir(sample)
            for kind in kinds:
                if kind == "ndvi":
                    image = ndvi(nir, vis, mask=mask)
                else:
                    image = evi(nir, vis, coeffs=cfg.evi_coeffs, mask=mask)
                base = out / f"{sample.sample_id}_{kind}"
                write_tensor(image.grid.values.astype(np.float32), base.with_suffix(".vnf"))
                _mask_to_png(image.valid_mask, Path(str(base) + "_mask.png"))
                save_index_png(image, Path(str(base) + "_viz.png"), coeffs=cfg.evi_coeffs)

        self._map(one, self.manifest.samples)
        self._finish("index", receipt)

    def _load_index(self, sample: SampleRecord, kind: str) -> IndexImage:
        base = self._dir("index") / f"{sample.sample_id}_{kind}"
        tensor = base.with_suffix(".vnf")
        if not tensor.exists():
            raise PipelineError(
                f"missing {kind} index for {sample.sample_id} under {self._dir('index')}; "
                f"run the index stage first"
            )
        grid = read_tensor(tensor).astype(np.float64)
        mask = _mask_from_png(Path(str(base) + "_mask.png"))
        return IndexImage(FloatGrid(grid), kind, mask)

    def _lts_stack(self, sample: SampleRecord) -> np.ndarray:
        vis = load_raster(sample.vis)
        stack = np.moveaxis(vis.reflectance(), 2, 0)
        if self.config.lts_use_nir:
            nir, _ = self._aligned_nir(sample)
            stack = np.concatenate([stack, nir.reflectance()[None, :, :]])
        return stack

    def _require_logits(self, sample: SampleRecord) -> LogitVolume:
        if sample.logits is None:
            raise PipelineError(
                f"sample {sample.sample_id} has no logits path in the manifest"
            )
        return load_tensor(sample.logits)

    def run_calibrate(self) -> None:
        """Fit the configured temperature model on the validation split."""
        cfg = self.config
        stage_config = {
            "mode": cfg.calibrate,
            "reliability_bins": cfg.reliability_bins,
            "lts": vars(cfg.lts) | {"use_nir": cfg.lts_use_nir} if cfg.calibrate == "local" else None,
        }
        extra = {}
        if cfg.calibrate == "local" and cfg.lts_use_nir:
            extra["align"] = self._upstream("align", "run the align stage first")
        receipt = self._receipt("calibrate", stage_config, extra)
        if self._should_skip("calibrate", receipt):
            return
        out = self._dir("calibrate")
        out.mkdir(parents=True, exist_ok=True)

        val = self.manifest.split("val")
        if not val and cfg.calibrate != "off":
            raise PipelineError("manifest has no val split to calibrate on")

        if cfg.calibrate == "off":
            model = calib.identity_temperature()
        elif cfg.calibrate == "global":
            pairs = [
                (self._require_logits(s), load_labelmap(s.label)) for s in val
            ]
            model = calib.fit_global_temperature(pairs)
        else:
            samples = [
                (self._lts_stack(s), self._require_logits(s), load_labelmap(s.label))
                for s in val
            ]
            model, _ = calib.fit_local_temperature(samples, cfg.lts)
        calib.save_temperature_model(model, out / "temperature.json")

        # reliability before/after on the validation split
        pre_bins, post_bins = None, None
        for s in val:
            logits = self._require_logits(s)
            labels = load_labelmap(s.label)
            raw = calib.softmax(logits)
            _, raw_arg = calib.confidence(raw)
            image = self._lts_stack(s) if cfg.calibrate == "local" else None
            cal, _ = calib.apply_temperature(logits, image, model)
            _, cal_arg = calib.confidence(cal)
            pre = calib.reliability(raw, raw_arg, labels, cfg.reliability_bins)
            post = calib.reliability(cal, cal_arg, labels, cfg.reliability_bins)
            pre_bins = pre if pre_bins is None else _merge_bins(pre_bins, pre)
            post_bins = post if post_bins is None else _merge_bins(post_bins, post)
        if pre_bins is not None:
            calib.save_reliability_csv(pre_bins, out / "reliability_uncalibrated.csv")
            calib.save_reliability_csv(post_bins, out / "reliability_calibrated.csv")
        self._finish("calibrate", receipt)

    def _temperature_model(self):
        path = self._dir("calibrate") / "temperature.json"
        if not path.exists():
            raise PipelineError(
                f"missing temperature model at {path}; run the calibrate stage first"
            )
        return calib.load_temperature_model(path)

    def _calibrated_probs(self, sample: SampleRecord, model) -> ProbabilityVolume:
        logits = self._require_logits(sample)
        image = (
            self._lts_stack(sample)
            if isinstance(model, calib.LocalTemperature)
            else None
        )
        probs, _ = calib.apply_temperature(logits, image, model)
        return probs

    def run_fuse(self) -> None:
        """Build validation histograms and write fused test predictions."""
        cfg = self.config
        extra = {"calibrate": self._upstream("calibrate", "run the calibrate stage first")}
        if cfg.histogram != "off":
            extra["index"] = self._upstream("index", "run the index stage first")
        receipt = self._receipt(
            "fuse",
            {
                "histogram": cfg.histogram,
                "beta": cfg.fusion.beta,
                "bins": cfg.bins_for(cfg.histogram) if cfg.histogram != "off" else None,
            },
            extra,
        )
        if self._should_skip("fuse", receipt):
            return
        out = self._dir("fuse")
        out.mkdir(parents=True, exist_ok=True)
        model = self._temperature_model()

        hist_model = None
        if cfg.histogram != "off":
            val = self.manifest.split("val")
            if not val:
                raise PipelineError("manifest has no val split to build histograms on")
            samples = [
                (self._load_index(s, cfg.histogram), load_labelmap(s.label)) for s in val
            ]
            hist_model = accumulate_histograms(
                samples,
                cfg.histogram,
                n_bins=cfg.bins_for(cfg.histogram),
                classes=len(self.palette),
                coeffs=cfg.evi_coeffs,
            )
            save_histogram_csv(
                hist_model,
                out / f"histogram_{cfg.histogram}.csv",
                class_names=self.palette.names,
            )

        def one(sample: SampleRecord):
            probs = self._calibrated_probs(sample, model)
            write_tensor(
                probs.values.astype(np.float32), out / f"{sample.sample_id}_calibrated.vnf"
            )
            if hist_model is None:
                labels = LabelMap(probs.values.argmax(axis=2).astype(np.uint8))
                scores = probs
            else:
                index = self._load_index(sample, cfg.histogram)
                result = fuse(probs, index, hist_model, cfg.fusion)
                labels = result.labels
                scores = result.normalized
            write_tensor(
                scores.values.astype(np.float32), out / f"{sample.sample_id}_scores.vnf"
            )
            save_labelmap_png(
                labels,
                self.palette,
                out / f"{sample.sample_id}_label.png",
                colorized_path=out / f"{sample.sample_id}_label_rgb.png",
            )

        self._map(one, self.manifest.split("test"))
        self._finish("fuse", receipt)

    def _guidance(self, sample: SampleRecord) -> GuidanceImage:
        guide = self.config.crf_guide
        if guide == "vis":
            return GuidanceImage.from_raster(load_raster(sample.vis))
        if guide == "nir":
            nir, _ = self._aligned_nir(sample)
            return GuidanceImage.from_raster(nir)
        return GuidanceImage.from_index(
            self._load_index(sample, guide), coeffs=self.config.evi_coeffs
        )

    def run_crf(self) -> None:
        """Refine fused (or calibrated) unaries with mean-field inference."""
        cfg = self.config
        if cfg.crf_guide == "off":
            raise PipelineError("crf stage requested but the config sets crf = off")
        extra = {"fuse": self._upstream("fuse", "run the fuse stage first")}
        if cfg.crf_guide in ("ndvi", "evi"):
            extra["index"] = self._upstream("index", "run the index stage first")
        if cfg.crf_guide == "nir":
            extra["align"] = self._upstream("align", "run the align stage first")
        receipt = self._receipt(
            "crf",
            {
                "guide": cfg.crf_guide,
                "unary": cfg.unary_source,
                "crf": vars(cfg.crf),
                "dump_marginals": cfg.dump_marginals,
            },
            extra,
        )
        if self._should_skip("crf", receipt):
            return
        out = self._dir("crf")
        out.mkdir(parents=True, exist_ok=True)
        unary_kind = (
            "scores" if cfg.unary_source in ("auto", "fused") else "calibrated"
        )

        def one(sample: SampleRecord):
            unary_path = self._dir("fuse") / f"{sample.sample_id}_{unary_kind}.vnf"
            if not unary_path.exists():
                raise PipelineError(
                    f"missing unaries at {unary_path}; run the fuse stage first"
                )
            unaries = ProbabilityVolume(read_tensor(unary_path).astype(np.float64))
            guide = self._guidance(sample)
            callback = None
            if cfg.dump_marginals:
                def callback(iteration, marginals, _sid=sample.sample_id):
                    write_tensor(
                        marginals.astype(np.float32),
                        out / f"{_sid}_iter{iteration:02d}.vnf",
                    )
            marginals, labels = mean_field(unaries, guide, cfg.crf, iteration_callback=callback)
            if cfg.dump_marginals:
                write_tensor(
                    marginals.values.astype(np.float32),
                    out / f"{sample.sample_id}_marginals.vnf",
                )
            save_labelmap_png(
                labels,
                self.palette,
                out / f"{sample.sample_id}_label.png",
                colorized_path=out / f"{sample.sample_id}_label_rgb.png",
            )

        self._map(one, self.manifest.split("test"))
        self._finish("crf", receipt)

    def run_eval(self) -> Path:
        """Score test predictions against ground truth; returns the CSV path."""
        cfg = self.config
        source = "crf" if cfg.crf_guide != "off" else "fuse"
        extra = {source: self._upstream(source, f"run the {source} stage first")}
        receipt = self._receipt(
            "eval",
            {
                "source": source,
                "classes": list(cfg.eval_classes),
                "undefined_as_zero": cfg.undefined_as_zero,
            },
            extra,
        )
        out = self._dir("eval")
        metrics_path = out / "metrics.csv"
        if self._should_skip("eval", receipt):
            return metrics_path
        out.mkdir(parents=True, exist_ok=True)

        test = self.manifest.split("test")
        if not test:
            raise PipelineError("manifest has no test split to evaluate")
        subset = [
            self.palette.index_of(name)
            for name in cfg.eval_classes
            if name in self.palette.names
        ]
        if not subset:
            raise PipelineError("no evaluation class exists in the palette")

        def one(sample: SampleRecord):
            pred_path = self._dir(source) / f"{sample.sample_id}_label.png"
            if not pred_path.exists():
                raise PipelineError(
                    f"missing prediction {pred_path}; run the {source} stage first"
                )
            pred = load_labelmap(pred_path)
            gt = load_labelmap(sample.label)
            mask_path = self._dir("align") / f"{sample.sample_id}_mask.png"
            mask = _mask_from_png(mask_path) if mask_path.exists() else None
            return accumulate_confusion(
                pred, gt, ConfusionMatrix.empty(len(self.palette)), eval_mask=mask
            )

        matrices = self._map(one, test)
        total = ConfusionMatrix.empty(len(self.palette))
        for m in matrices:
            total = total.merge(m)
        report = iou(total, class_subset=subset, undefined_as_zero=cfg.undefined_as_zero)
        save_metrics_csv(report, self.palette, metrics_path)
        summary = {
            "calibrate": cfg.calibrate,
            "histogram": cfg.histogram,
            "crf": cfg.crf_guide,
            "beta": cfg.fusion.beta,
            "miou": report.mean_iou,
            "per_class": {
                self.palette.names[k]: v for k, v in report.per_class.items()
            },
            "evaluated_pixels": total.total,
        }
        (out / "summary.json").write_text(json.dumps(summary, sort_keys=True, indent=1))
        self._finish("eval", receipt)
        return metrics_path

    def run_stage(self, stage: str) -> None:
        if stage not in STAGES:
            raise PipelineError(f"unknown stage {stage!r}")
        getattr(self, f"run_{stage}" if stage != "eval" else "run_eval")()


def _merge_bins(a, b):
    from .calibration import ReliabilityBins

    counts = a.counts + b.counts
    safe = np.maximum(counts, 1)
    mean_conf = (a.mean_confidence * a.counts + b.mean_confidence * b.counts) / safe
    accuracy = (a.accuracy * a.counts + b.accuracy * b.counts) / safe
    return ReliabilityBins(a.edges, mean_conf, accuracy, counts)


# ------------------------------------------------------------------- reporting

ROW_ORDER = (
    ("off", "off"),  # baseline softmax
    ("ndvi", "off"),
    ("evi", "off"),
    (None, "ndvi"),
    (None, "evi"),
    (None, "vis"),
    (None, "nir"),
)


def _row_rank(histogram: str, crf_guide: str) -> int:
    for rank, (hist, crf_g) in enumerate(ROW_ORDER):
        if crf_g == crf_guide and (hist is None or hist == histogram):
            return rank
    return len(ROW_ORDER)


def collect_report(runs_root: str | Path) -> list[dict]:
    """Gather eval summaries of every completed run under a directory."""
    runs_root = Path(runs_root)
    rows = []
    if not runs_root.exists():
        return rows
    for child in sorted(runs_root.iterdir()):
        summary = child / "eval" / "summary.json"
        if summary.exists():
            doc = json.loads(summary.read_text())
            doc["run"] = child.name
            rows.append(doc)
    rows.sort(key=lambda r: (_row_rank(r["histogram"], r["crf"]), r["run"]))
    return rows


def write_report(runs_root: str | Path, out_csv: Path, out_txt: Path) -> int:
    """Ablation table across completed runs; returns the row count."""
    import csv as csv_mod

    rows = collect_report(runs_root)
    if not rows:
        raise PipelineError(f"no runs found under {runs_root}")
    class_names = sorted({name for r in rows for name in r["per_class"]})
    out_csv.parent.mkdir(parents=True, exist_ok=True)
    with open(out_csv, "w", newline="") as fh:
        writer = csv_mod.writer(fh)
        writer.writerow(["run", "lts", "histogram", "crf", "miou_percent", *class_names])
        for r in rows:
            writer.writerow(
                [
                    r["run"],
                    r["calibrate"],
                    r["histogram"],
                    r["crf"],
                    f"{100.0 * r['miou']:.2f}",
                    *(
                        ""
                        if r["per_class"].get(name) is None
                        else f"{100.0 * r['per_class'][name]:.2f}"
                        for name in class_names
                    ),
                ]
            )
    widths = [28, 10, 10, 6, 8]
    header = ["run", "calibrate", "histogram", "crf", "mIoU%"]
    lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths))]
    lines.append("-" * len(lines[0]))
    for r in rows:
        lines.append(
            "  ".join(
                str(v).ljust(w)
                for v, w in zip(
                    [r["run"], r["calibrate"], r["histogram"], r["crf"], f"{100 * r['miou']:.2f}"],
                    widths,
                )
            )
        )
    out_txt.write_text("\n".join(lines) + "\n")
    return len(rows)
