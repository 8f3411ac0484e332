import numpy as np
import pytest

from perceptdist.data import save_image
from perceptdist.synthetic import noise_amplitude_pairs, smooth_images, write_mos_dataset

ACCEPTANCE_RESULTS = {}


def record_criterion(number, title, ok, detail=""):
    ACCEPTANCE_RESULTS[number] = (title, ok, detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_RESULTS):
        title, ok, detail = ACCEPTANCE_RESULTS[number]
        status = {True: "PASS", False: "FAIL", None: "SKIP"}[ok]
        terminalreporter.write_line(f"[{status}] {number}. {title} {detail}".rstrip())


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def corpus(tmp_path_factory):
    """A handful of decoded test images of assorted sizes and content."""
    from perceptdist.data import decode_image

    root = tmp_path_factory.mktemp("corpus")
    rng = np.random.default_rng(7)
    images = list(smooth_images(3, 64, seed=3))
    images.append(smooth_images(1, 176, seed=4)[0])
    images.append(rng.random((3, 48, 80)).astype(np.float32))
    checker = (np.indices((64, 64)).sum(axis=0) % 2).astype(np.float32)
    images.append(np.stack([checker] * 3))
    images.append(np.full((3, 32, 32), 0.5, dtype=np.float32))
    out = []
    for i, img in enumerate(images):
        path = root / f"corpus{i}.png"
        save_image(path, img)
        out.append(decode_image(path).data[0])
    return out


@pytest.fixture(scope="session")
def noise_pairs():
    return noise_amplitude_pairs()


@pytest.fixture
def mos_dataset(tmp_path, noise_pairs):
    return write_mos_dataset(tmp_path / "mos", noise_pairs)
