import numpy as np
import pytest

from attnmix.toytask import ToyVocab, generate_dataset, model_config_for
from attnmix.transformer import init_weights


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def tiny_cfg():
    return model_config_for(ToyVocab())


@pytest.fixture(scope="session")
def random_weights(tiny_cfg):
    return init_weights(tiny_cfg, seed=7)


@pytest.fixture(scope="session")
def rag_samples():
    return generate_dataset(seed=3, n_samples=12, chunks_per_sample=2, distractor_fraction=0.5)


# -- acceptance summary: one line per criterion at the end of the run ----------------

_criteria: dict[str, tuple[str, str]] = {}


def pytest_runtest_logreport(report):
    props = dict(report.user_properties)
    if "criterion" not in props:
        return
    if report.when == "call" or report.failed:
        _criteria[props["criterion"]] = ("PASS" if report.passed else "FAIL", props.get("detail", ""))


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_criteria, key=lambda k: (not k[0].isdigit(), k.zfill(3))):
        outcome, detail = _criteria[key]
        terminalreporter.write_line(f"[{outcome}] {key}: {detail}")
