import numpy as np
import pytest
from PIL import Image


def smooth_image(rng, h=48, w=48):
    """Well-exposed test picture: low-frequency color field plus mild noise."""
    yy, xx = np.mgrid[0:h, 0:w] / max(h, w)
    chans = []
    for _ in range(3):
        a, b, c = rng.uniform(-3, 3, 3)
        chans.append(0.5 + 0.3 * np.sin(a * xx + b * yy + c))
    img = np.stack(chans, -1) + rng.normal(0, 0.03, (h, w, 3))
    return np.clip(img, 0.02, 0.98).astype(np.float32)


@pytest.fixture
def image_dir(tmp_path):
    """Three small PNGs in a fresh directory."""
    d = tmp_path / "src"
    d.mkdir()
    rng = np.random.default_rng(7)
    for i in range(3):
        img = smooth_image(rng, 40 + 4 * i, 44)
        Image.fromarray((img * 255).round().astype(np.uint8)).save(d / f"img{i}.png")
    return d


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
