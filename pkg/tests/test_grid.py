#!/usr/bin/env python
"""
Tests for code grid helpers.
"""
import numpy as np
import pytest

from absorb.grid import (mask_value, full_mask, mask_count, check_grid, check_shapes,
                         enumerate_grids, grid_index)
from absorb.utils.errors import ConfigurationError, InvalidInputError, CapacityError

def test_mask_value():
    assert mask_value(1024) == 1024
    grid = full_mask(3, 2, 5)
    assert grid.shape == (3,2)
    assert mask_count(grid, 5) == 6
    assert np.all(grid == 5)

def test_check_grid():
    grid = np.array([[0,1],[2,3]])
    np.testing.assert_equal(check_grid(grid, 4), grid)
    with pytest.raises(InvalidInputError, match='mask'):
        check_grid([[0,4]], 4)
    np.testing.assert_equal(check_grid([[0,4]], 4, allow_mask=True), [[0,4]])
    with pytest.raises(InvalidInputError):
        check_grid([[0,5]], 4, allow_mask=True)
    with pytest.raises(InvalidInputError):
        check_grid([[-1,0]], 4)
    with pytest.raises(ConfigurationError):
        check_grid([0,1], 4)
    with pytest.raises(ConfigurationError):
        check_grid([[0.5,1]], 4)

def test_check_shapes():
    check_shapes(np.zeros((2,3)), np.ones((2,3)))
    with pytest.raises(ConfigurationError, match='Shape mismatch'):
        check_shapes(np.zeros((2,3)), np.ones((3,2)))

def test_enumerate_grids():
    grids = enumerate_grids(2, 1, 3)
    assert grids.shape == (9,2,1)
    np.testing.assert_equal(grids[0], [[0],[0]])
    np.testing.assert_equal(grids[1], [[0],[1]])
    np.testing.assert_equal(grids[3], [[1],[0]])
    np.testing.assert_equal(grids[-1], [[2],[2]])
    np.testing.assert_equal(grid_index(grids, 3), np.arange(9))

    grids = enumerate_grids(2, 2, 2)
    np.testing.assert_equal(grid_index(grids, 2), np.arange(16))
    assert grid_index(np.array([[1,0],[0,1]]), 2) == 9

    with pytest.raises(CapacityError):
        enumerate_grids(10, 4, 4)

if __name__ == "__main__":
    test_enumerate_grids()
