"""Shared fixtures: synthetic cities at two scales plus trained models.

Everything heavyweight is session-scoped so the acceptance suite pays for
city generation and model training exactly once.
"""

import pytest

from hoodval import cli

# training settings used by the test suite; smaller than the production
# defaults so the whole suite stays inside its time budget
TRAIN_OVERRIDES = (
    "--set", "learning_rate=0.08",
    "--set", "n_estimators=250",
    "--set", "max_depth=5",
    "--set", "early_stopping_rounds=30",
)


def run_cli(*args, expect=0):
    rc = cli.main([str(a) for a in args])
    assert rc == expect, f"cli exited {rc}, wanted {expect}: {args}"
    return rc


@pytest.fixture(scope="session")
def small_city(tmp_path_factory):
    """400-block city with the full pipeline run through fold assignment."""
    out = tmp_path_factory.mktemp("smallcity")
    run_cli("synth", "--out", out, "--seed", 11, "--blocks", 400,
            "--listings", 2600, "--noise", 0.02, "--share", 0.6)
    cfg = out / "city.cfg"
    run_cli("ingest", "--out", out, "--config", cfg)
    run_cli("features", "--out", out, "--config", cfg)
    run_cli("egohood", "--out", out, "--config", cfg)
    run_cli("folds", "--out", out, "--config", cfg, "--seed", 3)
    return out


@pytest.fixture(scope="session")
def trained_city(small_city):
    """The small city plus property and full variant models and evaluation."""
    cfg = small_city / "city.cfg"
    for variant in ("property", "full"):
        run_cli("train", "--out", small_city, "--config", cfg,
                "--variant", variant, *TRAIN_OVERRIDES)
    run_cli("evaluate", "--out", small_city, "--config", cfg)
    return small_city


@pytest.fixture(scope="session")
def big_city(tmp_path_factory):
    """2,000-block city taken only as far as fold assignment."""
    out = tmp_path_factory.mktemp("bigcity")
    run_cli("synth", "--out", out, "--seed", 7, "--blocks", 2000,
            "--listings", 10000, "--noise", 0.02)
    cfg = out / "city.cfg"
    run_cli("ingest", "--out", out, "--config", cfg)
    run_cli("folds", "--out", out, "--config", cfg, "--seed", 5)
    return out


ACCEPTANCE_NAMES = {
    1: "distance decay values",
    2: "land-use mix values",
    3: "egohood aggregation algebra",
    4: "spatially independent folds",
    5: "network shortest paths",
    6: "boosting optimizer",
    7: "contribution sum property",
    8: "error metrics",
    9: "neighborhood-signal experiment",
    10: "persistence and reproducibility",
}


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = {}
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, ()):
            nodeid = getattr(rep, "nodeid", "")
            if "test_acceptance.py::test_c" not in nodeid:
                continue
            num = int(nodeid.split("test_c", 1)[1][:2])
            lines[num] = "PASS" if outcome == "passed" else "FAIL"
    if lines:
        terminalreporter.section("acceptance criteria")
        for num in sorted(lines):
            name = ACCEPTANCE_NAMES.get(num, "")
            terminalreporter.write_line(f"criterion {num:2d} ({name}): {lines[num]}")
