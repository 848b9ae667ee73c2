import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

torch.set_num_threads(1)


@pytest.fixture
def rng():
    import numpy as np

    return np.random.default_rng(1234)


TINY_MODEL = dict(dim=8, image_size=32, frames=4, depths=(1, 1, 1, 1), d_state=2, expand=1,
                  mem_sizes=(6, 5, 4, 3))


@pytest.fixture(scope="session")
def tiny_data(tmp_path_factory):
    """Two 9-frame training videos (10 windows at k=4) and three short test videos."""
    from stnmamba.data import SynthSpec, synthesize_dataset

    root = tmp_path_factory.mktemp("tiny_data")
    spec = SynthSpec(size=32, n_train=2, n_test=3, n_frames=9, radius=(3.0, 4.0),
                     anomaly_length=(2, 3))
    synthesize_dataset(root / "train_part", spec, seed=0)
    spec_test = SynthSpec(size=32, n_train=1, n_test=3, n_frames=16, radius=(3.0, 4.0),
                          anomaly_length=(4, 5))
    synthesize_dataset(root / "test_part", spec_test, seed=1)
    import shutil

    shutil.copytree(root / "train_part" / "training", root / "ds" / "training")
    shutil.copytree(root / "test_part" / "testing", root / "ds" / "testing")
    return root / "ds"


# --- acceptance summary: one line per criterion --------------------------------

_ACCEPTANCE = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    num = getattr(item.function, "criterion", None)
    if num is None:
        return
    if report.when == "call" or (report.when == "setup" and report.failed):
        details = "; ".join("%s=%s" % kv for kv in item.user_properties)
        _ACCEPTANCE[num] = ("PASS" if report.passed else "FAIL", item.function.title, details)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_ACCEPTANCE):
        status, title, details = _ACCEPTANCE[num]
        line = "criterion %2d  %s  %s" % (num, status, title)
        terminalreporter.write_line(line + ("  [%s]" % details if details else ""))


def criterion(num, title):
    def mark(fn):
        fn.criterion, fn.title = num, title
        return fn
    return mark
