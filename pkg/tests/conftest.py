import numpy as np
import pytest

from transpeft.model import ModelConfig, TransformerModel

SMALL = ModelConfig(n_layers=2, d_model=16, d_ff=32, n_heads=2, vocab_size=64, max_seq_len=16)


@pytest.fixture
def small_model():
    return TransformerModel.init(SMALL, seed=0)


@pytest.fixture
def tokens():
    return np.random.default_rng(0).integers(0, SMALL.vocab_size, size=(3, 7))


# ------------------------------------------------------------------ acceptance reporting

_CRITERIA: dict[int, list] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion number and title")


def pytest_runtest_makereport(item, call):
    mark = item.get_closest_marker("criterion")
    if mark is None or call.when != "call":
        return
    n, title = mark.args
    entry = _CRITERIA.setdefault(n, [title, True, []])
    entry[1] = entry[1] and call.excinfo is None
    entry[2].extend(item.user_properties and [v for k, v in item.user_properties if k == "detail"] or [])


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        title, ok, details = _CRITERIA[n]
        line = f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {title}"
        if details:
            line += "  [" + "; ".join(details) + "]"
        terminalreporter.write_line(line)
