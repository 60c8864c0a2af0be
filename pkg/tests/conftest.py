from pathlib import Path

import hypothesis
import pytest
import torch

hypothesis.settings.register_profile("default", max_examples=25, deadline=None)
hypothesis.settings.register_profile("ci", max_examples=100, deadline=None)
hypothesis.settings.load_profile("default")

REPO = Path(__file__).resolve().parents[1]
CORPUS = REPO / "data" / "mini_hr"


@pytest.fixture(scope="session")
def corpus_dir() -> Path:
    return CORPUS


@pytest.fixture(scope="session")
def corpus_paths() -> list[Path]:
    paths = sorted(CORPUS.glob("*.png"))
    assert len(paths) == 20
    return paths


@pytest.fixture(autouse=True)
def _seed_torch():
    torch.manual_seed(0)


def pytest_terminal_summary(terminalreporter):
    from helpers import acceptance_lines

    lines = acceptance_lines()
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
