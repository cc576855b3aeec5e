import csv
import json
import os
import sys

import numpy as np
import pytest
from PIL import Image

sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..'))

from gridood.cli import main, tally_top_k
from gridood.gridnet import GridNet, load_checkpoint
from gridood.imageio import write_ppm
from gridood.oodmetrics import auroc, evaluate_scores, fpr_at_tpr
from gridood.oodscore import ABLATION_METHODS, score_method
from gridood.settings import Settings
from gridood.splitmix import SplitMix64
from gridood.synthscenes import generate_dataset, rasterize

SMALL_RUN = {
    "dataset": {"seed": 3, "image_size": 32, "num_classes": 2,
                "counts": {"train": 8, "val": 6, "test_id": 6, "test_ood": 6}},
    "network": {"image_size": 32, "widths": [4, 4, 6, 6, 8], "head_width": 4, "num_classes": 2},
    "train": {"epochs": 1, "batch_size": 4, "seed": 1, "lr_backbone": 1e-3, "lr_heads": 1e-2},
    "sweep": {"epochs": 1, "top_k": 2},
}


def write_config(directory, **overrides) -> str:
    config = json.loads(json.dumps(SMALL_RUN))
    config["output_dir"] = str(directory / "run")
    config.update(overrides)
    path = directory / "gridood.json"
    path.write_text(json.dumps(config))
    return str(path)


def read_csv(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    """One yolood and one flat run shared by the read-only commands."""
    directory = tmp_path_factory.mktemp("trained")
    config = write_config(directory)
    assert main(["train", "--config", config]) == 0
    assert main(["train", "--config", config, "--set", "train.mode=flat", "--output", str(directory / "flat")]) == 0
    return directory, config


class TestGen:

    def test_writes_every_split(self, tmp_path):
        config = write_config(tmp_path)
        assert main(["gen", "--config", config]) == 0
        dataset = tmp_path / "run" / "dataset"
        for split, count in SMALL_RUN["dataset"]["counts"].items():
            assert (dataset / split / "annotations.json").is_file()
            assert len(list((dataset / split).glob("*.ppm"))) == count

    def test_regeneration_is_identical(self, tmp_path):
        config = write_config(tmp_path)
        assert main(["gen", "--config", config, "--output", str(tmp_path / "a")]) == 0
        assert main(["gen", "--config", config, "--output", str(tmp_path / "b")]) == 0
        for first in sorted((tmp_path / "a").rglob("*.*")):
            second = tmp_path / "b" / first.relative_to(tmp_path / "a")
            assert first.read_bytes() == second.read_bytes()

    def test_unknown_key_names_the_key(self, tmp_path, caplog):
        """
        GIVEN: an override with a misspelt key
        WHEN: any command loads the configuration
        THEN: the run fails with exit code 2 and the message names the key
        """
        config = write_config(tmp_path)
        assert main(["gen", "--config", config, "--set", "network.strdie=8"]) == 2
        assert "network.strdie" in caplog.text

    def test_missing_config_writes_defaults(self, tmp_path):
        path = tmp_path / "fresh.json"
        assert main(["gen", "--config", str(path)]) == 2
        assert json.loads(path.read_text())["network"]["num_classes"] == 4


class TestTrainAndEval:

    def test_train_writes_artifacts(self, trained):
        directory, _ = trained
        run = directory / "run"
        assert load_checkpoint(run / "checkpoint.gridood").mode == "yolood"
        assert len((run / "train_log.jsonl").read_text().splitlines()) == 1
        assert json.loads((run / "config.json").read_text())["train"]["epochs"] == 1
        assert load_checkpoint(directory / "flat" / "checkpoint.gridood").mode == "flat"

    def test_eval_report_matches_recomputed_scores(self, trained):
        directory, config = trained
        assert main(["eval", "--config", config, "--methods", "yolood;yolood_agg(max,max);yolood_obj"]) == 0
        output = directory / "run" / "eval"
        report = json.loads((output / "report.json").read_text())
        assert sorted(report["methods"]) == ["yolood", "yolood_agg(max,max)", "yolood_obj"]
        assert 0.0 <= report["id_macro_ap"] <= 1.0

        rows = read_csv(output / "scores.csv")
        assert len(rows) == 12
        for name in report["methods"]:
            id_scores = [float(r[name]) for r in rows if r["split"] == "test_id"]
            ood_scores = [float(r[name]) for r in rows if r["split"] == "test_ood"]
            assert report["methods"][name]["auroc"] == pytest.approx(auroc(id_scores, ood_scores), abs=1e-12)
            assert report["methods"][name]["fpr95"] == pytest.approx(fpr_at_tpr(id_scores, ood_scores), abs=1e-12)
        assert len(read_csv(output / "report.csv")) == 9

    def test_flat_checkpoint_with_flat_methods(self, trained):
        directory, config = trained
        out = directory / "flat_eval"
        assert main(["eval", "--config", config, "--checkpoint", str(directory / "flat" / "checkpoint.gridood"),
                     "--methods", "flat_msp;flat_maxlogit;flat_joint_energy", "--output", str(out)]) == 0
        assert sorted(json.loads((out / "report.json").read_text())["methods"]) == \
            ["flat_joint_energy", "flat_maxlogit", "flat_msp"]

    def test_incompatible_method_exits_2(self, trained):
        directory, config = trained
        assert main(["eval", "--config", config, "--checkpoint", str(directory / "flat" / "checkpoint.gridood"),
                     "--methods", "yolood", "--output", str(directory / "never")]) == 2
        assert not (directory / "never").exists()

    def test_unknown_method_exits_2(self, trained):
        _, config = trained
        assert main(["eval", "--config", config, "--methods", "yolood_agg(min,max)"]) == 2

    def test_mismatched_dataset_exits_2(self, trained):
        _, config = trained
        assert main(["eval", "--config", config, "--set", "dataset.num_classes=1",
                     "--set", "network.num_classes=1"]) == 2

    def test_resume_with_other_class_count_exits_2(self, trained, tmp_path):
        directory, config = trained
        assert main(["train", "--config", config, "--output", str(tmp_path),
                     "--set", "dataset.num_classes=1", "--set", "network.num_classes=1",
                     "--set", f"train.resume_from={directory / 'run' / 'checkpoint.gridood'}"]) == 2


class TestAblateAndHeatmap:

    def test_ablation_rows(self, trained):
        directory, config = trained
        assert main(["ablate", "--config", config]) == 0
        rows = read_csv(directory / "run" / "ablate" / "ablation.csv")
        assert [r["method"] for r in rows][:2] == ["yolood_agg(max,max)", "yolood_agg(max,multiply)"]
        assert len(rows) == 9
        assert all(0.0 <= float(r["auroc"]) <= 1.0 for r in rows)

    def test_max_sum_row_equals_yolood_eval(self, trained):
        directory, config = trained
        assert main(["ablate", "--config", config, "--output", str(directory / "ablate_check")]) == 0
        assert main(["eval", "--config", config, "--output", str(directory / "eval_check")]) == 0
        row = next(r for r in read_csv(directory / "ablate_check" / "ablation.csv")
                   if r["method"] == "yolood_agg(max,sum)")
        report = json.loads((directory / "eval_check" / "report.json").read_text())["methods"]["yolood"]
        for metric in ("fpr95", "auroc", "aupr"):
            assert float(row[metric]) == report[metric]

    def test_rows_match_direct_scoring(self, trained):
        """
        GIVEN: the trained yolood checkpoint
        WHEN: ablate runs and the same test scenes are scored one by one with the scoring functions
        THEN: every ablation row carries the metrics of the directly computed scores
        """
        directory, config = trained
        assert main(["ablate", "--config", config, "--output", str(directory / "ablate_direct")]) == 0
        rows = {r["method"]: r for r in read_csv(directory / "ablate_direct" / "ablation.csv")}

        dataset = generate_dataset(Settings.read_settings(config).dataset)
        network = GridNet.from_checkpoint(load_checkpoint(directory / "run" / "checkpoint.gridood"))
        id_grids = [network.forward(scene.image) for scene in dataset.test_id]
        ood_grids = [network.forward(scene.image) for scene in dataset.test_ood]
        assert sorted(rows) == sorted(ABLATION_METHODS)
        for name in ABLATION_METHODS:
            report = evaluate_scores(name, [score_method(name, grids=g) for g in id_grids],
                                     [score_method(name, grids=g) for g in ood_grids])
            for metric, value in report.metrics().items():
                assert float(rows[name][metric]) == pytest.approx(value, abs=1e-9)

    def test_ablate_rejects_flat_checkpoint(self, trained):
        directory, config = trained
        assert main(["ablate", "--config", config,
                     "--checkpoint", str(directory / "flat" / "checkpoint.gridood")]) == 2

    def test_heatmap_files(self, trained):
        directory, config = trained
        assert main(["heatmap", "--config", config, "--index", "2", "--split", "test_ood"]) == 0
        output = directory / "run" / "heatmap"
        for k, size in zip((1, 2, 3), (1, 2, 4)):
            with Image.open(output / f"heatmap_head{k}.pgm") as im:
                assert im.mode == "L" and im.size == (size, size)
        with Image.open(output / "overlay.ppm") as im:
            assert im.mode == "RGB" and im.size == (32, 32)
        assert (output / "heatmap_head3.pgm").read_bytes().startswith(b"P5")

    def test_heatmap_missing_sample_exits_2(self, trained):
        _, config = trained
        assert main(["heatmap", "--config", config, "--index", "99"]) == 2
        assert main(["heatmap", "--config", config, "--image", "/nonexistent.ppm"]) == 2


class TestHeatmapAfterTraining:

    def test_background_scores_below_an_id_scene(self, tmp_path):
        """
        GIVEN: a detector trained for a few epochs on 64x64 scenes
        WHEN: heatmaps are drawn for a background-only image and a training scene
        THEN: the background heatmap has the lower mean
        """
        config = json.loads(json.dumps(SMALL_RUN))
        config["dataset"].update(image_size=64, counts={"train": 16, "val": 4, "test_id": 2, "test_ood": 2})
        config["network"]["image_size"] = 64
        config["train"]["epochs"] = 8
        config["output_dir"] = str(tmp_path / "run")
        path = tmp_path / "gridood.json"
        path.write_text(json.dumps(config))
        assert main(["train", "--config", str(path)]) == 0

        background = tmp_path / "background.ppm"
        write_ppm(background, rasterize([], 64, SplitMix64(11)).data)
        assert main(["heatmap", "--config", str(path), "--image", str(background),
                     "--output", str(tmp_path / "bg")]) == 0
        assert main(["heatmap", "--config", str(path), "--split", "train", "--index", "0",
                     "--output", str(tmp_path / "id")]) == 0

        def mean_heat(directory):
            values = []
            for k in (1, 2, 3):
                with Image.open(directory / f"heatmap_head{k}.pgm") as im:
                    values.extend(np.asarray(im, dtype=np.float64).ravel())
            return float(np.mean(values))

        assert mean_heat(tmp_path / "bg") < mean_heat(tmp_path / "id")


class TestSweep:

    def test_invalid_triplet_exits_2(self, tmp_path):
        config = write_config(tmp_path)
        assert main(["sweep-p", "--config", config, "--set", "sweep.p_grid=[[0.5,0.1,0.0]]"]) == 2

    def test_sweep_writes_rows_and_tally(self, tmp_path):
        config = write_config(tmp_path)
        assert main(["sweep-p", "--config", config]) == 0
        output = tmp_path / "run" / "sweep_p"
        rows = read_csv(output / "sweep_p.csv")
        assert [(float(r["p1"]), float(r["p2"]), float(r["p3"])) for r in rows] == \
            [(0.0, 0.0, 0.0), (0.0, 0.1, 0.5), (0.0, 0.5, 1.0)]
        tally = json.loads((output / "sweep_p_tally.json").read_text())
        assert tally["top_k"] == 2 and len(tally["ranked"]) == 2
        assert tally["selected"][0] == 0.0

    def test_repeated_sweep_is_identical(self, tmp_path):
        config = write_config(tmp_path)
        for name in ("a", "b"):
            assert main(["sweep-p", "--config", config, "--set", "sweep.p_grid=[[0.0,0.1,0.5]]",
                         "--output", str(tmp_path / name)]) == 0
        for filename in ("sweep_p.csv", "sweep_p_tally.json"):
            assert (tmp_path / "a" / filename).read_bytes() == (tmp_path / "b" / filename).read_bytes()

    def test_tally_prefers_better_ranked_value_on_ties(self):
        rows = [{"p": (0.0, 0.1, 0.5), "val_macro_ap": 0.9},
                {"p": (0.0, 0.2, 0.6), "val_macro_ap": 0.8},
                {"p": (0.1, 0.2, 0.3), "val_macro_ap": 0.1}]
        tally = tally_top_k(rows, 2)
        assert tally["selected"] == [0.0, 0.1, 0.5]
        assert tally["counts"]["p1"] == {"0.0": 2}


class TestAggregate:

    def test_mean_and_population_std(self, tmp_path):
        for seed, value in ((1, 0.6), (2, 0.8)):
            (tmp_path / f"r{seed}.json").write_text(json.dumps({
                "id_macro_ap": value,
                "methods": {"yolood": {"fpr95": value, "auroc": value, "aupr": value}},
            }))
        assert main(["aggregate", str(tmp_path / "r1.json"), str(tmp_path / "r2.json"),
                     "--output", str(tmp_path / "agg.csv")]) == 0
        rows = {(r["method"], r["metric"]): r for r in read_csv(tmp_path / "agg.csv")}
        assert float(rows[("yolood", "auroc")]["mean"]) == pytest.approx(0.7)
        assert float(rows[("yolood", "auroc")]["std"]) == pytest.approx(0.1)
        assert rows[("classifier", "id_macro_ap")]["n"] == "2"

    def test_unreadable_report_exits_2(self, tmp_path):
        assert main(["aggregate", str(tmp_path / "missing.json")]) == 2


class TestParser:

    def test_requires_a_command(self):
        with pytest.raises(SystemExit):
            main([])

    def test_scores_are_finite(self, trained):
        directory, config = trained
        assert main(["eval", "--config", config, "--output", str(directory / "plain")]) == 0
        rows = read_csv(directory / "plain" / "scores.csv")
        assert np.all(np.isfinite([float(r["yolood"]) for r in rows]))
