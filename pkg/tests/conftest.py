import numpy as np
import pytest

from mpmnet.data import encode_idx_images, encode_idx_labels


def synthetic_digits(n, seed=0, noise=0.15):
    """MNIST-shaped images where digit k lights a 6x6 patch at its own grid cell."""
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 10, n)
    labels[:10] = np.arange(10)  # every digit present
    images = rng.random((n, 1, 28, 28)) * noise
    for i, k in enumerate(labels):
        r, c = divmod(int(k), 4)
        images[i, 0, 2 + 8 * r:8 + 8 * r, 2 + 6 * c:8 + 6 * c] += 0.8
    images = np.round(np.clip(images, 0, 1) * 255) / 255  # exact IDX round trip
    return images, labels


@pytest.fixture(scope="session")
def synthetic_root(tmp_path_factory):
    """A data root holding synthetic IDX files under the official MNIST names."""
    root = tmp_path_factory.mktemp("data")
    for split, n, seed, prefix in (("train", 300, 0, "train"), ("test", 120, 1, "t10k")):
        imgs, labs = synthetic_digits(n, seed)
        (root / f"{prefix}-images-idx3-ubyte").write_bytes(encode_idx_images(imgs))
        (root / f"{prefix}-labels-idx1-ubyte").write_bytes(encode_idx_labels(labs))
    return root


# one line per acceptance criterion, shown after the run whatever the capture mode
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
