import numpy as np
import pytest

from slamer.semantic_map import INDOOR_CLASSES, build_distance_fields, rasterize_shapes


def random_map(rng, width, height, resolution=0.1, p_occ=0.1, n_labels=None):
    """Random valid two-layer map (free cells may carry spatial labels)."""
    from slamer.semantic_map import ClassTable, Pose2D, SemanticGridMap

    table = INDOOR_CLASSES if n_labels is None else ClassTable(tuple(f"c{i}" for i in range(n_labels)))
    L = len(table)
    occ = rng.random((height, width)) < p_occ
    physical = np.where(occ, rng.integers(1, L, size=(height, width)), -1)
    semantic = np.where(occ, physical, np.where(rng.random((height, width)) < 0.05,
                                                rng.integers(1, L, size=(height, width)), 0))
    return SemanticGridMap(resolution, Pose2D(), table, physical, semantic)


@pytest.fixture
def room():
    """8 x 6 m room with typed walls, a door and a spatial no-entry line."""
    shapes = [
        {"type": "rect", "label": "others", "min": [0, 0], "max": [8, 0.2]},
        {"type": "rect", "label": "fence", "min": [0, 5.8], "max": [8, 6]},
        {"type": "rect", "label": "others", "min": [0, 0.2], "max": [0.2, 5.8]},
        {"type": "rect", "label": "close_door", "min": [7.8, 0.2], "max": [8, 5.8]},
        {"type": "segment", "label": "no_entry_line", "physical": False,
         "p0": [4, 1], "p1": [4, 3], "thickness": 0.1},
    ]
    return build_distance_fields(rasterize_shapes((8, 6), 0.05, shapes))


def pytest_terminal_summary(terminalreporter):
    """Echo the acceptance criterion lines collected during the run."""
    try:
        from test_acceptance import REPORT
    except ImportError:
        return
    if REPORT:
        terminalreporter.section("acceptance criteria")
        for line in sorted(REPORT):
            terminalreporter.write_line(line)
