import numpy as np
import pytest

from monompc.box import Hyperrect
from monompc.partition import (
    PartitionSpec,
    clip_cuts,
    leaf_boxes,
    tiling_constraints,
    validate_tiling,
)

BOX = Hyperrect([0.0, 0.0], [4.0, 2.0])


def test_single_leaf():
    s = PartitionSpec.single(2)
    assert s.n_leaves == 1 and s.n_cuts == 0 and s.n_sources == 4
    (b,) = leaf_boxes(s, BOX, [])
    assert b.allclose(BOX)


def test_levels_layout_and_order():
    s = PartitionSpec.from_levels([0, 1], 2)
    assert s.n_leaves == 4 and s.n_cuts == 3
    np.testing.assert_array_equal(s.cut_axes, [0, 1, 1])
    cuts = s.default_cuts(BOX)
    np.testing.assert_allclose(cuts, [2.0, 1.0, 1.0])
    boxes = leaf_boxes(s, BOX, cuts)
    np.testing.assert_allclose(boxes[0].lo, BOX.lo)  # leaf 0 holds the lower corner
    np.testing.assert_allclose(boxes[-1].hi, BOX.hi)  # last leaf holds the upper corner
    np.testing.assert_allclose(boxes[1].lo, [0.0, 1.0])
    np.testing.assert_allclose(boxes[2].hi, [4.0, 1.0])
    assert validate_tiling(boxes, BOX, 5000).ok


def test_nested_tree_and_config_round_trip():
    s = PartitionSpec.from_nested([0, None, [1, None, None]], 2)
    assert s.n_leaves == 3
    s2 = PartitionSpec.from_config(s.to_config(), 2)
    assert s2.tree == s.tree
    assert PartitionSpec.from_config({"levels": [1]}, 2).cut_axes.tolist() == [1]
    assert PartitionSpec.from_config([0, 0], 2).n_leaves == 4
    assert PartitionSpec.from_config(None, 2).n_leaves == 1
    with pytest.raises(ValueError):
        PartitionSpec.from_config({"axes": [0]}, 2)


@pytest.mark.parametrize("tree", [(2, None, None), (-1, None, None), (True, None, None), (0, None)])
def test_invalid_trees(tree):
    with pytest.raises(ValueError):
        PartitionSpec(tree, 2)


def test_tiling_rows_count_and_meaning():
    s = PartitionSpec.from_levels([0, 1], 2)
    rows = tiling_constraints(s)
    assert len(rows) == 2 * s.n_cuts
    env = {"lo0": 0.0, "lo1": 0.0, "hi0": 4.0, "hi1": 2.0, "c0": 2.0, "c1": 1.0, "c2": 3.0}
    vals = [r.value(env) for r in rows]
    # c2 = 3 lies above hi1 = 2, so exactly one row is violated
    assert sum(v < 0 for v in vals) == 1


def test_validate_tiling_detects_overlap_and_gaps():
    a = Hyperrect([0.0, 0.0], [2.5, 2.0])
    b = Hyperrect([2.0, 0.0], [4.0, 2.0])
    rep = validate_tiling([a, b], BOX, 4000)
    assert not rep.ok and rep.overlapping > 0 and rep.max_multiplicity == 2
    c = Hyperrect([3.0, 0.0], [4.0, 2.0])
    rep = validate_tiling([Hyperrect([0.0, 0.0], [2.0, 2.0]), c], BOX, 4000)
    assert not rep.ok and rep.uncovered > 0


def test_clip_cuts_repairs_out_of_order_cuts():
    s = PartitionSpec.from_levels([0, 1], 2)
    cuts = clip_cuts(s, [5.0, 1.0, 3.0], BOX)
    # root cut clipped to the upper face; the flat right child copies the left child's cut
    np.testing.assert_allclose(cuts, [4.0, 1.0, 1.0])
    assert validate_tiling(leaf_boxes(s, BOX, cuts), BOX, 2000).uncovered == 0


def test_leaf_of_point():
    s = PartitionSpec.from_levels([0], 2)
    cuts = s.default_cuts(BOX)
    assert s.leaf_of_point(BOX, cuts, [1.0, 1.0]) == 0
    assert s.leaf_of_point(BOX, cuts, [3.0, 1.0]) == 1
    assert s.leaf_of_point(BOX, cuts, [9.0, 1.0]) == 1
