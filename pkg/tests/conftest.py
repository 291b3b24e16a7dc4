import pytest

from clecnn.data import Manifest, SynthConfig, generate_synthetic, load_images, split_dev_test


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """25 patients at 72x72, split 20 dev / 5 test."""
    root = tmp_path_factory.mktemp("small") / "data"
    m = generate_synthetic(SynthConfig(25, (6, 10), image_size=72, crop_size=64, seed=0), root)
    dev, test = split_dev_test(m, 5 / 25, 0)
    Manifest(dev.records + test.records, root).write(root / "manifest.csv")
    return root, dev, test


@pytest.fixture(scope="session")
def small_images(small_dataset):
    _, dev, test = small_dataset
    return load_images(dev), load_images(test)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("#")[1].split()[0])):
            terminalreporter.write_line(line)
