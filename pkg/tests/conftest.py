import numpy as np
import pytest

from dynslice.corpora import make_choice_items, synthetic_text
from dynslice.model import ModelConfig, encode, init_model
from dynslice.train import TrainHyperparams, model_from_tensors, train_toy

TRAIN_STEPS = 300


@pytest.fixture(scope="session")
def texts():
    return {
        "train": synthetic_text(16384, seed=1, style="story"),
        "lr_calib": synthetic_text(4096, seed=2, style="story"),
        "ppl_calib": synthetic_text(4096, seed=3, style="article"),
        "held_out": synthetic_text(4096, seed=4, style="story"),
    }


@pytest.fixture(scope="session")
def corpora(texts):
    return {k: np.asarray(encode(v), dtype=np.int64) for k, v in texts.items()}


@pytest.fixture(scope="session")
def trained_model(corpora):
    """Seed-0 default-config model after a short training run."""
    model = init_model(ModelConfig(), seed=0)
    return train_toy(model, corpora["train"], TRAIN_STEPS, TrainHyperparams(seq_len=64, seed=0))


@pytest.fixture(scope="session")
def choice_items(texts):
    return make_choice_items(texts["held_out"], 100, seed=5)


def with_random_gains(model, seed=0, spread=0.3):
    """Same model with non-trivial RMSNorm gains, so absorption is exercised."""
    rng = np.random.default_rng(seed)
    t = {
        k: (v * (1 + spread * rng.standard_normal(v.shape))).astype(v.dtype) if "norm" in k else v
        for k, v in model.tensors().items()
    }
    return model_from_tensors(model, t)


# -- acceptance reporting --------------------------------------------------------

_ACCEPTANCE = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, title): numbered acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("acceptance")
    if mark is None:
        return
    number, title = mark.args
    failed = rep.failed or (rep.when == "call" and rep.skipped)
    prev = _ACCEPTANCE.get(number, (title, "PASS"))[1]
    if rep.when == "call" or failed:
        _ACCEPTANCE[number] = (title, "FAIL" if failed or prev == "FAIL" else "PASS")


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        title, status = _ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number}: {status}  {title}")
