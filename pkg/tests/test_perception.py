import numpy as np
import pytest

from triage_rl.gridworld import CellType, Grid, Position, generate_episode
from triage_rl.perception import (OPTION_DIM, PERFECT, STATE_DIM, PerceptionMask, featurize, featurize_path,
                                  option_featurize)


def grid_from(rows):
    return Grid(np.array(rows, np.int8), np.ones(len(rows), np.int8))


def blocks(s):
    return s.reshape(-1, 4)


def test_dimensions():
    g = generate_episode(np.random.default_rng(0))
    s = featurize(g, Position(0, 1))
    assert s.shape == (STATE_DIM,) == (76,)
    assert option_featurize(s, 0).shape == (OPTION_DIM,) == (78,)


def test_layout_current_cell_then_lookahead_left_to_right():
    rows = [[0, 1, 0], [1, 2, 3]] + [[0, 0, 0]] * 6
    s = featurize(grid_from(rows), Position(0, 1))
    b = blocks(s)
    assert b[0].argmax() == CellType.GRASS
    assert [b[i].argmax() for i in (1, 2, 3)] == [CellType.GRASS, CellType.STONE, CellType.CAR]


def test_final_row_has_zero_lookahead():
    g = generate_episode(np.random.default_rng(1))
    s = featurize(g, Position(g.horizon, 2))
    assert s[4:].sum() == 0 and s[:4].sum() == 1


def test_blind_cells_read_as_road():
    rows = [[0, 0, 0], [3, 3, 3], [0, 0, 0]]
    s = featurize(grid_from(rows), Position(0, 1), PerceptionMask.from_names(["car"]))
    assert all(b.argmax() == CellType.ROAD for b in blocks(s)[1:4])


def test_blocks_are_one_hot_or_empty():
    rng = np.random.default_rng(2)
    for _ in range(20):
        g = generate_episode(rng)
        for view in ("absolute", "egocentric"):
            for row in range(g.row_count):
                for lane in range(3):
                    sums = blocks(featurize(g, Position(row, lane), view=view)).sum(axis=1)
                    assert set(np.unique(sums)) <= {0.0, 1.0}


def test_egocentric_view_pads_off_grid_lanes():
    rows = [[1, 2, 3]] * 8
    s = featurize(grid_from(rows), Position(0, 0), view="egocentric")
    b = blocks(s)
    assert b[1].sum() == 0
    assert b[2].argmax() == CellType.GRASS and b[3].argmax() == CellType.STONE


def test_unknown_view():
    with pytest.raises(ValueError):
        featurize(grid_from([[0, 0, 0]] * 2), Position(0, 1), view="sideways")


def test_option_bits():
    s = featurize(generate_episode(np.random.default_rng(3)), Position(0, 1))
    x0, x1 = option_featurize(s, 0), option_featurize(s, 1)
    assert np.sum(x0 != x1) == 2
    z = option_featurize(np.zeros(STATE_DIM), 1)
    assert np.flatnonzero(z).tolist() == [77]


def test_path_features_match_pointwise():
    g = generate_episode(np.random.default_rng(4))
    lanes = [1, 0, 0, 1, 2]
    mask = PerceptionMask.from_names(["grass"])
    stacked = featurize_path(g, lanes, mask)
    for t, lane in enumerate(lanes):
        np.testing.assert_array_equal(stacked[t], featurize(g, Position(t, lane), mask))


def test_mask_names_roundtrip_and_union():
    m = PerceptionMask.from_names(["stone", "car"])
    assert PerceptionMask.from_names(m.to_list()) == m
    assert m.union(PerceptionMask.from_names(["grass"])).to_list() == ["car", "grass", "stone"]
    assert not PERFECT.as_array().any()
