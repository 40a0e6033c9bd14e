import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from fedload.config import OUTPUT_ENV, ExperimentConfig  # noqa: E402

TINY = {
    "fleet": {
        "archetypes": [
            {"base_load": 0.3, "amplitude": 1.2, "peak_hour": 7, "noise_std": 0.05, "n_clients": 2},
            {"base_load": 0.5, "amplitude": 2.5, "peak_hour": 19, "noise_std": 0.3, "n_clients": 2, "size_spread": 0.4},
        ],
        "hours": 24 * 6,
        "seed": 1,
    },
    "grid": {"fc1": [3, 5], "fc2": [4], "epochs": [2, 4]},
    "lstm_hidden": 3,
    "k": 2,
    "local_epochs": 2,
    "ablation": True,
}


@pytest.fixture
def tiny_config(tmp_path, monkeypatch):
    monkeypatch.delenv(OUTPUT_ENV, raising=False)
    return ExperimentConfig.from_dict({**TINY, "output_dir": str(tmp_path / "run")})


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
