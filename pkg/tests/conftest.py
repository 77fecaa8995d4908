import pytest

SMALL_CONFIG = """\
seed: 3
waypoint_spacing: 20.0
candidate_ranges: [10, 20, 30]
gt_range: 40
offsets: {radius: 0.25, count: 4}
forest: {n_trees: 10, max_depth: 4, min_leaf: 2, features_per_split: null, seed: 3, bootstrap: true}
scene:
  segments:
    - {kind: intersection, length: 40, tree_density: 20}
    - {kind: corridor, length: 60}
  noise_sigma: 0.03
  seed: 3
"""


@pytest.fixture
def small_config_file(tmp_path):
    p = tmp_path / "small.yaml"
    p.write_text(SMALL_CONFIG)
    return p


ACCEPTANCE_LINES = []


@pytest.fixture
def verdict():
    """Record one acceptance line; lines are printed again in the terminal summary."""
    def record(n, ok, detail):
        line = f"criterion {n}: {'PASS' if ok else 'FAIL'} ({detail})"
        print(line)
        ACCEPTANCE_LINES.append(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
