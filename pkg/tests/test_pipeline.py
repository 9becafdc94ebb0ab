import json

import numpy as np
import pytest

from visnir_fuse.cli import main as cli_main
from visnir_fuse.config import ConfigError, load_config
from visnir_fuse.manifest import load_manifest
from visnir_fuse.pipeline import Pipeline, PipelineError, write_report
from visnir_fuse.rasters import load_raster
from visnir_fuse.tensor_io import read_tensor
from visnir_fuse.veg_index import ndvi

from conftest import write_config


def run_stages(config_path, stages, workers=1, force=False):
    for stage in stages:
        code = cli_main(
            [stage, "--config", str(config_path), "--workers", str(workers)]
            + (["--force"] if force else [])
        )
        assert code == 0, f"stage {stage} failed"


ALL_STAGES = ("align", "index", "calibrate", "fuse", "eval")


class TestAlign:
    def test_identity_calibration_outputs_equal_inputs(self, scene_dataset, tmp_path):
        cfg = write_config(tmp_path / "c.ini", scene_dataset, tmp_path / "out")
        run_stages(cfg, ["align"])
        manifest = load_manifest(scene_dataset / "manifest.txt")
        for sample in manifest.samples:
            warped = load_raster(tmp_path / "out" / "align" / f"{sample.sample_id}_nir.png")
            original = load_raster(sample.nir)
            np.testing.assert_array_equal(warped.samples, original.samples)
            mask = load_raster(tmp_path / "out" / "align" / f"{sample.sample_id}_mask.png")
            assert (mask.samples == 255).all()

    def test_outputs_and_masks_per_sample(self, scene_dataset, tmp_path):
        cfg = write_config(tmp_path / "c.ini", scene_dataset, tmp_path / "out")
        run_stages(cfg, ["align"])
        manifest = load_manifest(scene_dataset / "manifest.txt")
        pngs = sorted((tmp_path / "out" / "align").glob("*_nir.png"))
        masks = sorted((tmp_path / "out" / "align").glob("*_mask.png"))
        assert len(pngs) == len(manifest.samples)
        assert len(masks) == len(manifest.samples)

    def test_missing_calibration_file_fails(self, scene_dataset, tmp_path):
        cfg = write_config(tmp_path / "c.ini", scene_dataset, tmp_path / "out")
        text = cfg.read_text().replace("rig.txt", "nope.txt")
        cfg.write_text(text)
        assert cli_main(["align", "--config", str(cfg)]) == 1


class TestIndex:
    def test_matches_direct_computation(self, scene_dataset, tmp_path):
        cfg = write_config(
            tmp_path / "c.ini", scene_dataset, tmp_path / "out", histogram="ndvi"
        )
        run_stages(cfg, ["align", "index"])
        manifest = load_manifest(scene_dataset / "manifest.txt")
        sample = manifest.samples[0]
        stored = read_tensor(
            tmp_path / "out" / "index" / f"{sample.sample_id}_ndvi.vnf"
        )
        direct = ndvi(load_raster(sample.nir), load_raster(sample.vis))
        np.testing.assert_allclose(stored, direct.grid.values.astype(np.float32), atol=1e-7)

    def test_unknown_kind_rejected_at_config(self, scene_dataset, tmp_path):
        cfg = write_config(
            tmp_path / "c.ini", scene_dataset, tmp_path / "out", histogram="savi"
        )
        with pytest.raises(ConfigError, match="histogram"):
            load_config(cfg)

    def test_no_kinds_needed_is_cheap_noop(self, scene_dataset, tmp_path):
        cfg = write_config(tmp_path / "c.ini", scene_dataset, tmp_path / "out")
        run_stages(cfg, ["align", "index"])
        assert not list((tmp_path / "out" / "index").glob("*.vnf"))


class TestCalibrate:
    def test_global_recovers_overconfidence_scale(self, scene_dataset, tmp_path):
        # replace logits and labels with a calibrated generator scaled by 2
        import shutil

        from PIL import Image

        from visnir_fuse.synthetic import sample_calibrated_logits
        from visnir_fuse.tensor_io import write_tensor

        data2 = tmp_path / "data2"
        shutil.copytree(scene_dataset, data2)
        manifest = load_manifest(data2 / "manifest.txt")
        rng = np.random.default_rng(123)
        for s in manifest.samples:
            z, labels = sample_calibrated_logits(64, 64, 4, rng, scale=2.0)
            write_tensor(z.values.astype(np.float32), s.logits)
            Image.fromarray(labels.labels).save(s.label)
        cfg = write_config(tmp_path / "c.ini", data2, tmp_path / "out", calibrate="global")
        run_stages(cfg, ["calibrate"])
        doc = json.loads((tmp_path / "out" / "calibrate" / "temperature.json").read_text())
        assert doc["variant"] == "global"
        assert 1.9 <= doc["t"] <= 2.1

    def test_off_mode_writes_identity_model(self, scene_dataset, tmp_path):
        cfg = write_config(tmp_path / "c.ini", scene_dataset, tmp_path / "out")
        run_stages(cfg, ["calibrate"])
        doc = json.loads((tmp_path / "out" / "calibrate" / "temperature.json").read_text())
        assert doc == {"variant": "global", "t": 1.0, "at_bound": False}

    def test_reliability_reports_written_pre_and_post(self, scene_dataset, tmp_path):
        cfg = write_config(tmp_path / "c.ini", scene_dataset, tmp_path / "out", calibrate="global")
        run_stages(cfg, ["calibrate"])
        pre = (tmp_path / "out" / "calibrate" / "reliability_uncalibrated.csv").read_text()
        post = (tmp_path / "out" / "calibrate" / "reliability_calibrated.csv").read_text()
        assert pre.splitlines()[0] == "bin_low,bin_high,mean_conf,accuracy,count"
        assert len(pre.splitlines()) == len(post.splitlines()) == 11
        assert pre != post

    def test_local_mode_end_to_end(self, scene_dataset, tmp_path):
        cfg = write_config(tmp_path / "c.ini", scene_dataset, tmp_path / "out", calibrate="local")
        text = cfg.read_text() + "\n[calibration]\nlts_epochs = 2\nlts_patch = 32\n"
        cfg.write_text(text)
        run_stages(cfg, ["calibrate", "fuse", "eval"])
        doc = json.loads((tmp_path / "out" / "calibrate" / "temperature.json").read_text())
        assert doc["variant"] == "local"
        assert (tmp_path / "out" / "eval" / "metrics.csv").exists()


class TestFuseCrfEval:
    def test_beta_zero_no_crf_equals_plain_softmax_baseline(self, scene_dataset, tmp_path):
        base = write_config(tmp_path / "base.ini", scene_dataset, tmp_path / "out_base")
        run_stages(base, ALL_STAGES)
        fused = write_config(
            tmp_path / "fused.ini",
            scene_dataset,
            tmp_path / "out_fused",
            calibrate="global",
            histogram="ndvi",
            beta=0.0,
        )
        run_stages(fused, ALL_STAGES)
        a = (tmp_path / "out_base" / "eval" / "metrics.csv").read_bytes()
        b = (tmp_path / "out_fused" / "eval" / "metrics.csv").read_bytes()
        assert a == b

    def test_crf_without_index_gives_actionable_error(self, scene_dataset, tmp_path, capsys):
        cfg = write_config(
            tmp_path / "c.ini", scene_dataset, tmp_path / "out", crf="ndvi"
        )
        run_stages(cfg, ["align", "calibrate", "fuse"])
        assert cli_main(["crf", "--config", str(cfg)]) == 1
        err = capsys.readouterr().err
        assert "index" in err and "run the index stage first" in err

    def test_full_crf_pipeline_writes_labels(self, scene_dataset, tmp_path):
        cfg = write_config(
            tmp_path / "c.ini",
            scene_dataset,
            tmp_path / "out",
            calibrate="global",
            histogram="ndvi",
            crf="ndvi",
            iterations=3,
        )
        run_stages(cfg, ["align", "index", "calibrate", "fuse", "crf", "eval"])
        manifest = load_manifest(scene_dataset / "manifest.txt")
        for sample in manifest.split("test"):
            assert (tmp_path / "out" / "crf" / f"{sample.sample_id}_label.png").exists()
            assert (tmp_path / "out" / "crf" / f"{sample.sample_id}_label_rgb.png").exists()
        summary = json.loads((tmp_path / "out" / "eval" / "summary.json").read_text())
        assert summary["crf"] == "ndvi"
        assert 0.0 <= summary["miou"] <= 1.0

    def test_workers_flag_gives_identical_results(self, scene_dataset, tmp_path):
        a = write_config(tmp_path / "a.ini", scene_dataset, tmp_path / "out_a",
                         calibrate="global", histogram="ndvi")
        b = write_config(tmp_path / "b.ini", scene_dataset, tmp_path / "out_b",
                         calibrate="global", histogram="ndvi")
        run_stages(a, ALL_STAGES, workers=1)
        run_stages(b, ALL_STAGES, workers=3)
        ma = (tmp_path / "out_a" / "eval" / "metrics.csv").read_bytes()
        mb = (tmp_path / "out_b" / "eval" / "metrics.csv").read_bytes()
        assert ma == mb

    def test_idempotent_rerun_and_force(self, scene_dataset, tmp_path):
        cfg = write_config(tmp_path / "c.ini", scene_dataset, tmp_path / "out")
        run_stages(cfg, ["align"])
        receipt = tmp_path / "out" / "align" / "run.json"
        first = receipt.stat().st_mtime_ns
        run_stages(cfg, ["align"])  # unchanged: skip
        assert receipt.stat().st_mtime_ns == first
        run_stages(cfg, ["align"], force=True)
        assert receipt.stat().st_mtime_ns > first

    def test_receipt_records_version_config_and_hashes(self, scene_dataset, tmp_path):
        from visnir_fuse import __version__

        cfg = write_config(tmp_path / "c.ini", scene_dataset, tmp_path / "out")
        run_stages(cfg, ["align"])
        doc = json.loads((tmp_path / "out" / "align" / "run.json").read_text())
        assert doc["tool_version"] == __version__
        assert doc["stage"] == "align"
        assert "manifest" in doc["inputs"]
        assert any(key.endswith("/nir") for key in doc["inputs"])


class TestWarpMaskFlow:
    def test_shift_rig_masks_pixels_through_index_and_eval(self, scene_dataset, tmp_path):
        # rig that translates the NIR image 10 px left in the VIS frame:
        # H = K (I + t n^T / d) K^{-1} with t = (0.03, 0, 0), n = (0, 0, -1)
        import shutil

        data2 = tmp_path / "data2"
        shutil.copytree(scene_dataset, data2)
        (data2 / "rig.txt").write_text(
            "vis_intrinsics = 500 500 32 32\n"
            "nir_intrinsics = 500 500 32 32\n"
            "rotation = 1 0 0 0 1 0 0 0 1\n"
            "translation = 0.03 0 0\n"
            "plane_normal = 0 0 -1\n"
            "plane_distance = 1.5\n"
        )
        cfg = write_config(
            tmp_path / "c.ini", data2, tmp_path / "out",
            calibrate="global", histogram="ndvi",
        )
        run_stages(cfg, ALL_STAGES)
        manifest = load_manifest(data2 / "manifest.txt")
        sid = manifest.samples[0].sample_id
        align_mask = load_raster(tmp_path / "out" / "align" / f"{sid}_mask.png").samples > 127
        assert not align_mask[:, -10:].any()  # unmapped strip
        assert align_mask[:, :-10].all()
        index_mask = load_raster(
            tmp_path / "out" / "index" / f"{sid}_ndvi_mask.png"
        ).samples > 127
        assert not index_mask[:, -10:].any()  # mask propagates into the index
        summary = json.loads((tmp_path / "out" / "eval" / "summary.json").read_text())
        # evaluated pixel count excludes the strip and the ignore labels
        full = sum(
            (load_raster(s.label).samples[:, :-10] != 255).sum()
            for s in manifest.split("test")
        )
        assert summary["evaluated_pixels"] == int(full)


class TestReport:
    def test_rows_follow_ablation_order(self, scene_dataset, tmp_path):
        runs = tmp_path / "runs"
        variants = {
            "r_base": dict(),
            "r_hist_ndvi": dict(calibrate="global", histogram="ndvi"),
            "r_hist_evi": dict(calibrate="global", histogram="evi"),
            "r_crf_ndvi": dict(calibrate="global", histogram="ndvi", crf="ndvi"),
            "r_crf_evi": dict(calibrate="global", histogram="evi", crf="evi"),
            "r_crf_vis": dict(calibrate="global", crf="vis"),
        }
        for name, kw in variants.items():
            cfg = write_config(
                tmp_path / f"{name}.ini", scene_dataset, runs / name,
                iterations=2, **kw
            )
            stages = list(ALL_STAGES)
            if kw.get("crf"):
                stages.insert(4, "crf")
            run_stages(cfg, stages)
        assert cli_main(["report", "--runs", str(runs)]) == 0
        lines = (runs / "ablation.csv").read_text().splitlines()
        assert len(lines) == 7  # header + six rows
        order = [line.split(",")[0] for line in lines[1:]]
        assert order == [
            "r_base",
            "r_hist_ndvi",
            "r_hist_evi",
            "r_crf_ndvi",
            "r_crf_evi",
            "r_crf_vis",
        ]
        assert (runs / "ablation.txt").exists()

    def test_two_runs_two_rows(self, scene_dataset, tmp_path):
        runs = tmp_path / "runs"
        for name in ("one", "two"):
            cfg = write_config(tmp_path / f"{name}.ini", scene_dataset, runs / name)
            run_stages(cfg, ALL_STAGES)
        write_report(runs, runs / "ablation.csv", runs / "ablation.txt")
        assert len((runs / "ablation.csv").read_text().splitlines()) == 3

    def test_empty_dir_reports_no_runs(self, tmp_path, capsys):
        assert cli_main(["report", "--runs", str(tmp_path / "empty")]) == 1
        assert "no runs found" in capsys.readouterr().err
