"""Full synthetic benchmark at S=160; takes hours, so it only runs with GRIDOOD_RUN_ACCEPTANCE=1."""
import os
import sys
import warnings

import pytest

sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..'))

from gridood.cli import evaluate_checkpoint
from gridood.gridnet import GridNet, save_checkpoint
from gridood.oodscore import ABLATION_METHODS
from gridood.settings import RunConfig
from gridood.synthscenes import generate_dataset
from gridood.trainer import Trainer, train

pytestmark = pytest.mark.skipif(os.environ.get("GRIDOOD_RUN_ACCEPTANCE") != "1",
                                reason="set GRIDOOD_RUN_ACCEPTANCE=1 to run the full benchmark")

FLAT_METHODS = ["flat_maxlogit", "flat_msp", "flat_joint_energy"]


@pytest.fixture(scope="module")
def benchmark():
    config = RunConfig()
    return config, generate_dataset(config.dataset)


def test_untrained_network_is_near_chance(benchmark):
    config, dataset = benchmark
    untrained = Trainer(dataset, config.network, config.train).checkpoint(0)
    reports, _, _ = evaluate_checkpoint(untrained, dataset, ["yolood"])
    assert 0.3 <= reports["yolood"].auroc <= 0.7


def test_trained_benchmark(benchmark, tmp_path):
    """
    GIVEN: the default benchmark (seed 42, 30 epochs, p=(0.0, 0.1, 0.5))
    WHEN: the grid detector is trained twice and evaluated
    THEN: the classifier and the OOD score clear their gates and both runs are byte-identical
    """
    config, dataset = benchmark
    checkpoint, log = train(dataset, config.network, config.train, config.responsibility)
    assert log.records[-1].val_macro_ap >= 0.90

    reports, _, _ = evaluate_checkpoint(checkpoint, dataset, list(ABLATION_METHODS) + ["yolood"])
    assert reports["yolood"].auroc >= 0.85
    assert reports["yolood"].fpr95 <= 0.60
    single_factor = max(reports["yolood_obj"].auroc, reports["yolood_cls"].auroc)
    if reports["yolood"].auroc < single_factor - 0.02:
        # reported, not blocking
        warnings.warn(f"joint score AUROC {reports['yolood'].auroc:.4f} trails single factor {single_factor:.4f}")

    again, again_log = train(dataset, config.network, config.train, config.responsibility)
    assert again_log == log
    save_checkpoint(tmp_path / "a.gridood", checkpoint)
    save_checkpoint(tmp_path / "b.gridood", again)
    assert (tmp_path / "a.gridood").read_bytes() == (tmp_path / "b.gridood").read_bytes()
    assert GridNet.from_checkpoint(again).state_dict().keys() == checkpoint.params.keys()


def test_flat_baselines(benchmark):
    config, dataset = benchmark
    flat = config.train.model_copy(update={"mode": "flat"})
    checkpoint, _ = train(dataset, config.network, flat)
    reports, _, _ = evaluate_checkpoint(checkpoint, dataset, FLAT_METHODS)
    for name in FLAT_METHODS:
        assert reports[name].auroc > 0.5
