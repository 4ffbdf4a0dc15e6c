import numpy as np
import pytest
import torch

from moodshift.ingest import SyntheticDatasetSpec, generate_synthetic
from moodshift.labels import chunk_dataset
from moodshift.training import build_dataset, plan_folds, subject_majority_moods

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def small_synthetic():
    spec = SyntheticDatasetSpec(num_subjects=5, videos_per_subject=2, frames_per_video=12, seed=3)
    tracks, store = generate_synthetic(spec)
    return spec, tracks, store


@pytest.fixture(scope="session")
def small_dataset(small_synthetic):
    _, tracks, store = small_synthetic
    chunks = chunk_dataset(tracks)
    ds = build_dataset(chunks, store)
    plan = plan_folds(ds.subjects, 5, 0, subject_majority_moods(chunks))
    return ds, plan


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# ---------------------------------------------------------------- acceptance report
# Tests marked ``criterion(n, text)`` get one PASS/FAIL line in the terminal summary.

_criteria: dict[int, tuple[str, str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, text): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when != "call" and not rep.failed:
        return
    number, text = mark.args
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    status = "PASS" if rep.passed else "FAIL"
    if number not in _criteria or status == "FAIL":
        _criteria[number] = (status, text, detail)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        status, text, detail = _criteria[number]
        line = f"{status} C{number}: {text}"
        terminalreporter.write_line(line + (f" [{detail}]" if detail else ""))
