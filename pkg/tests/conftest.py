"""Shared fixtures: the committed experiment artifacts (built once per
session from the committed config) and a fast small-scale split for
property tests."""

from pathlib import Path

import pytest
from dataclasses import replace

from mupkit import model_zoo
from mupkit.config import load_config

CONFIG_PATH = Path(__file__).resolve().parent.parent / "configs" / "experiment.ini"

# verdict lines recorded by the acceptance tests; replayed after the run so
# they survive output capture
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.ensure_newline()
    terminalreporter.section("acceptance criteria")
    for line in ACCEPTANCE_LINES:
        terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def run_cfg():
    return load_config(CONFIG_PATH)


@pytest.fixture(scope="session")
def committed(run_cfg):
    """(dataset, zoo) exactly as `mupkit train configs/experiment.ini`
    would build them, kept in memory."""
    d = run_cfg.dataset
    data = model_zoo.generate_dataset(d.seed, d.classes, d.per_class,
                                      d.image_shape)
    zoo = {}
    for arch_name in run_cfg.zoo.arches:
        arch = model_zoo.build_arch(arch_name, data.image_shape,
                                    data.num_classes)
        for s in run_cfg.zoo.train_seeds:
            net = model_zoo.train(arch, data, replace(run_cfg.zoo.train, seed=s))
            zoo[f"{arch_name}-s{s}"] = net
    return data, zoo


@pytest.fixture(scope="session")
def small_data():
    return model_zoo.generate_dataset(seed=1, num_classes=3,
                                      per_class_count=60,
                                      image_shape=(1, 10, 10))


@pytest.fixture(scope="session")
def small_zoo(small_data):
    cfg = model_zoo.TrainConfig(epochs=6, learning_rate=0.05, batch_size=16)
    zoo = {}
    for arch_name, s in (("mlp", 0), ("cnn_b", 1)):
        arch = model_zoo.build_arch(arch_name, small_data.image_shape,
                                    small_data.num_classes)
        zoo[f"{arch_name}-s{s}"] = model_zoo.train(arch, small_data,
                                                   replace(cfg, seed=s))
    return zoo


@pytest.fixture()
def small_net(small_zoo):
    return small_zoo["cnn_b-s1"]
