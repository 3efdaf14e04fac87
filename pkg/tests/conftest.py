import sys
from pathlib import Path

import pytest
import yaml

sys.path.insert(0, str(Path(__file__).parent))

# small enough to run end to end in seconds, large enough to hold both classes
TINY = {
    "corpus": {"train_count": 150, "test_count": 150},
    "calibrate": {"sample_count": 60, "variants_per_clip": 3,
                  "targets": {"prevalence_band": [0.0, 1.0], "cross_class_band": [0.0, 1.0]}},
    "levels": [0, 2],
    "train": {"max_epochs": 2},
}


@pytest.fixture
def tiny_config(tmp_path):
    p = tmp_path / "tiny.yaml"
    p.write_text(yaml.safe_dump(dict(TINY, output_dir=str(tmp_path / "runs"))))
    return p


def pytest_terminal_summary(terminalreporter):
    from _verdicts import LINES

    if LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(LINES):
            terminalreporter.write_line(line)
