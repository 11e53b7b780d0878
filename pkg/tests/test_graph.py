import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ctbg.graph import (
    Block,
    Box,
    Edge,
    assemble_blocks,
    blocks_to_lists,
    centers_sizes,
    connected_components,
    iou,
    successor_map,
    union_box,
)
from oracles import iou_reference, reachable_pairs


def boxes_strategy():
    coord = st.floats(0.0, 1.0, allow_nan=False)
    extent = st.floats(0.01, 0.5, allow_nan=False)
    return st.builds(lambda x, y, w, h: Box(x, y, x + w, y + h), coord, coord, extent, extent)


def test_box_validates():
    with pytest.raises(ValueError):
        Box(0.5, 0.0, 0.5, 1.0)
    with pytest.raises(ValueError):
        Box(0.0, 0.8, 1.0, 0.2)


def test_union_box_example():
    u = union_box(Box(0.1, 0.1, 0.3, 0.2), Box(0.25, 0.05, 0.5, 0.15))
    assert u.as_tuple() == (0.1, 0.05, 0.5, 0.2)


@settings(max_examples=100, deadline=None)
@given(boxes_strategy(), boxes_strategy())
def test_union_box_contains_both(a, b):
    u = union_box(a, b)
    for bx in (a, b):
        assert u.x0 <= bx.x0 and u.y0 <= bx.y0 and u.x1 >= bx.x1 and u.y1 >= bx.y1


def test_iou_disjoint_and_identical():
    a = Box(0.0, 0.0, 0.2, 0.2)
    assert iou(a, Box(0.5, 0.5, 0.7, 0.7)) == 0.0
    assert iou(a, Box(0.2, 0.0, 0.4, 0.2)) == 0.0  # touching edges
    assert iou(a, a) == 1.0


def test_iou_half_overlap():
    # two unit-square halves overlapping in a quarter
    a = Box(0.0, 0.0, 0.4, 0.4)
    b = Box(0.2, 0.0, 0.6, 0.4)
    # inter = 0.2*0.4, union = 2*0.16 - 0.08
    assert abs(iou(a, b) - (0.08 / 0.24)) < 1e-12


@settings(max_examples=150, deadline=None)
@given(boxes_strategy(), boxes_strategy())
def test_iou_matches_reference(a, b):
    assert abs(iou(a, b) - iou_reference(a.as_tuple(), b.as_tuple())) < 1e-9
    assert abs(iou(a, b) - iou(b, a)) < 1e-12
    assert 0.0 <= iou(a, b) <= 1.0


def test_centers_sizes():
    c, s = centers_sizes([Box(0.1, 0.2, 0.5, 0.4)])
    np.testing.assert_allclose(c, [[0.3, 0.3]])
    np.testing.assert_allclose(s, [[0.4, 0.2]])


@settings(max_examples=100, deadline=None)
@given(
    n=st.integers(1, 9),
    data=st.data(),
)
def test_connected_components_match_reachability(n, data):
    pairs = data.draw(
        st.lists(
            st.tuples(st.integers(0, n - 1), st.integers(0, n - 1)), max_size=12
        )
    )
    labels = connected_components(n, pairs)
    reach = reachable_pairs(n, pairs)
    for i in range(n):
        for j in range(n):
            if i != j:
                assert (labels[i] == labels[j]) == ((i, j) in reach)
    # labels are canonical smallest members
    for i in range(n):
        assert labels[labels[i]] == labels[i] and labels[i] <= i


class TestAssemble:
    def test_simple_chain(self):
        blocks = assemble_blocks(4, [Edge(0, 1, 0.9), Edge(1, 2, 0.8)])
        assert blocks_to_lists(blocks) == [[0, 1, 2], [3]]

    def test_cycle_broken_at_weakest(self):
        blocks = assemble_blocks(4, [Edge(0, 1, 0.9), Edge(1, 2, 0.8), Edge(2, 0, 0.7)])
        assert blocks_to_lists(blocks) == [[0, 1, 2], [3]]

    def test_two_cycle_tie_drops_smaller_src(self):
        blocks = assemble_blocks(2, [Edge(0, 1, 0.5), Edge(1, 0, 0.5)])
        assert blocks_to_lists(blocks) == [[1, 0]]

    def test_degree_competition(self):
        blocks = assemble_blocks(4, [Edge(0, 1, 0.9), Edge(2, 1, 0.8), Edge(0, 3, 0.7)])
        assert blocks_to_lists(blocks) == [[0, 1], [2], [3]]

    def test_score_priority_wins(self):
        # the lower-scored edge to the contested destination loses
        blocks = assemble_blocks(3, [Edge(0, 2, 0.4), Edge(1, 2, 0.6)])
        assert blocks_to_lists(blocks) == [[0], [1, 2]]

    def test_no_edges_all_singletons(self):
        assert blocks_to_lists(assemble_blocks(3, [])) == [[0], [1], [2]]

    def test_bad_edge_rejected(self):
        with pytest.raises(ValueError):
            assemble_blocks(3, [Edge(1, 1, 0.5)])
        with pytest.raises(ValueError):
            assemble_blocks(3, [Edge(0, 3, 0.5)])

    @settings(max_examples=200, deadline=None)
    @given(
        n=st.integers(1, 10),
        data=st.data(),
    )
    def test_partition_and_acyclicity(self, n, data):
        m = data.draw(st.integers(0, 2 * n))
        edges = []
        for _ in range(m):
            s = data.draw(st.integers(0, n - 1))
            d = data.draw(st.integers(0, n - 1))
            if s == d:
                continue
            edges.append(Edge(s, d, round(data.draw(st.floats(0.0, 1.0, width=32)), 3)))
        blocks = assemble_blocks(n, edges)
        flat = [u for b in blocks for u in b.units]
        assert sorted(flat) == list(range(n))  # exact partition
        # determinism
        again = assemble_blocks(n, list(edges))
        assert blocks_to_lists(again) == blocks_to_lists(blocks)

    def test_accepted_edges_exist_in_input(self):
        edges = [Edge(0, 1, 0.3), Edge(1, 2, 0.2), Edge(3, 4, 0.9), Edge(4, 3, 0.1)]
        blocks = assemble_blocks(5, edges)
        allowed = {(e.src, e.dst) for e in edges}
        for b in blocks:
            for a, c in zip(b.units, b.units[1:]):
                assert (a, c) in allowed


def test_successor_map():
    out = successor_map([Block((2, 0, 1)), Block((3,))], 4)
    np.testing.assert_array_equal(out, [1, 4, 0, 4])
