import sys
import time
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from flowsep.flow import load_model  # noqa: E402
from flowsep.spectral import magnitude  # noqa: E402
from flowsep.toy import toy_clips, toy_train_config  # noqa: E402
from flowsep.training import stack, train_on_tensor  # noqa: E402

TOY_TRAIN_CLIPS = 64
TOY_SEED = 0


class ToyPriors:
    def __init__(self, root: Path):
        self.config = toy_train_config(seed=TOY_SEED)
        self.paths, self.models, self.train_seconds = {}, {}, {}
        for band in ("low", "high"):
            clips = toy_clips(band, TOY_TRAIN_CLIPS, self.config.segment_seconds, self.config.sample_rate, TOY_SEED)
            data = stack([magnitude(c, self.config.stft).trimmed_even() for c in clips])
            t0 = time.perf_counter()
            self.paths[band] = train_on_tensor(data, self.config, band, root / band)
            self.train_seconds[band] = time.perf_counter() - t0
            self.models[band], _, _ = load_model(self.paths[band])

    @property
    def pair(self):
        return [self.models["low"], self.models["high"]]

    def held_out(self, band: str, index: int):
        return toy_clips(band, 1, 1.0, self.config.sample_rate, seed=1000 + index)[0]


@pytest.fixture(scope="session")
def toy_priors(tmp_path_factory):
    return ToyPriors(tmp_path_factory.mktemp("toy_priors"))


ACCEPTANCE_LINES = {}


def record_criterion(number: int, passed: bool, detail: str) -> None:
    ACCEPTANCE_LINES[number] = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[n])
