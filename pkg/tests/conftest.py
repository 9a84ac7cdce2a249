"""Shared fixtures: a small rendered dataset reused across test modules."""

import pytest

ACCEPTANCE_RESULTS = []


def record_criterion(line):
    ACCEPTANCE_RESULTS.append(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_RESULTS:
            terminalreporter.write_line(line)

from viewsynth.renderer import angle_grid, generate_dataset


@pytest.fixture(scope="session")
def micro_manifest(tmp_path_factory):
    """16px 'can' dataset, 3 instances, 2 pitches x 4 yaws."""
    root = tmp_path_factory.mktemp("micro_data")
    grid = angle_grid((0.0, 10.0), 10.0, (0.0, 270.0), 90.0)
    return generate_dataset(["can"], 3, grid, 16, str(root))
