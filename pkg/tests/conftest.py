import os

import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile("default")


def write_digits_idx(directory, n=None):
    """8x8 handwritten digits as an IDX pair; grey levels 0..16 rescaled to 0..255."""
    from sklearn.datasets import load_digits

    from subspace_margins.datasets import LabeledDataset, write_idx

    d = load_digits()
    x = d.images.reshape(len(d.images), -1) / 16.0
    y = d.target
    if n is not None:
        x, y = x[:n], y[:n]
    ds = LabeledDataset(np.rint(x * 255) / 255, y, image_shape=(1, 8, 8))
    img, lbl = os.path.join(directory, "digits-images.idx"), os.path.join(directory, "digits-labels.idx")
    write_idx(ds, img, lbl)
    return img, lbl


@pytest.fixture(scope="session")
def digits_idx(tmp_path_factory):
    return write_digits_idx(str(tmp_path_factory.mktemp("digits")))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES = []


def report_criterion(number, passed, detail):
    line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
