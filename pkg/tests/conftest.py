import copy

import pytest
import torch

from ttt_histo.data import DataConfig, build_splits
from ttt_histo.model import build_model
from ttt_histo.training import TrainingConfig, train_joint

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def small_data_cfg():
    return DataConfig(n_slides=6, slide_size=512, patches_per_class=8, seed=5)


@pytest.fixture(scope="session")
def small_splits(small_data_cfg):
    return build_splits(small_data_cfg)


def _trained(task, splits):
    model = build_model(task=task, latent_dim=64, seed=11)
    cfg = TrainingConfig(task=task, steps=300, log_period=100, val_steps=3, seed=11)
    train_joint(model, splits, cfg)
    return model


@pytest.fixture(scope="session")
def _simclr_model(small_splits):
    return _trained("simclr", small_splits)


@pytest.fixture(scope="session")
def _rsp_model(small_splits):
    return _trained("rsp", small_splits)


@pytest.fixture
def simclr_model(_simclr_model):
    return copy.deepcopy(_simclr_model)


@pytest.fixture
def rsp_model(_rsp_model):
    return copy.deepcopy(_rsp_model)


@pytest.fixture
def tiny_model():
    return build_model(image_size=8, latent_dim=8, task="simclr", seed=3)


@pytest.fixture(scope="session")
def tiny_splits():
    return build_splits(DataConfig(n_slides=6, slide_size=128, patch_size=8, patches_per_class=6,
                                   n_regions=6, seed=1))


# -- acceptance summary -------------------------------------------------------------

_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    number, title = mark.args
    # parametrized tests share a criterion: any failing item fails it
    status, seconds = _CRITERIA.get(number, (title, "PASS", 0.0))[1:]
    if rep.failed:
        status = "FAIL"
    _CRITERIA[number] = (title, status, seconds + rep.duration)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, status, seconds = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {number}: {status}  {title} ({seconds:.1f}s)")
