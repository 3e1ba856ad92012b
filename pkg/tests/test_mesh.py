import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from msaplan.mesh import (
    BoxMesh,
    PartitionError,
    RankWeights,
    auto_box_dims,
    build_box_mesh,
    check_unit_depth,
    comm_plan,
    largest_remainder,
    partition_from_assignment,
    partition_rcb,
    partition_stats,
    target_counts,
)


def brute_faces(mesh):
    out = set()
    for e in range(mesh.n_elements):
        for n in mesh.neighbors(e):
            out.add((min(e, n), max(e, n)))
    return out


class TestBoxMesh:
    @pytest.mark.parametrize("dims,elems,faces", [((2, 1, 1), 2, 1), ((1, 1, 1), 1, 0), ((3, 2, 2), 12, 20)])
    def test_counts(self, dims, elems, faces):
        m = build_box_mesh(*dims)
        assert (m.n_elements, m.n_faces, len(m.faces)) == (elems, faces, faces)

    def test_tgv_size(self):
        assert build_box_mesh(64, 64, 64).n_elements == 262144

    def test_faces_match_neighbor_walk(self):
        m = BoxMesh(4, 3, 2)
        assert {tuple(f) for f in m.faces.tolist()} == brute_faces(m)

    def test_id_layout_is_x_fastest(self):
        m = BoxMesh(3, 2, 2)
        assert m.coords[1].tolist() == [1, 0, 0]
        assert m.coords[3].tolist() == [0, 1, 0]
        assert m.coords[6].tolist() == [0, 0, 1]

    def test_rejects_zero_dimension(self):
        with pytest.raises(PartitionError):
            BoxMesh(0, 1, 1)


class TestAutoDims:
    def test_cube(self):
        assert auto_box_dims(262144) == (64, 64, 64)
        assert auto_box_dims(2097152) == (128, 128, 128)

    def test_pipe_has_a_near_cubic_box(self):
        dims = auto_box_dims(36480)
        assert dims == (38, 32, 30) and np.prod(dims) == 36480

    def test_prime_fails_with_hint(self):
        with pytest.raises(PartitionError, match="explicit mesh dimensions"):
            auto_box_dims(10007)

    def test_aspect_limit(self):
        assert auto_box_dims(9) == (3, 3, 1)
        assert auto_box_dims(7) == (7, 1, 1)
        with pytest.raises(PartitionError):
            auto_box_dims(11)


class TestApportionment:
    def test_symmetric(self):
        assert target_counts(10, (1, 1)) == [5, 5]

    def test_gpu_rank_with_24_cores(self):
        counts = target_counts(10, (100,) + (1,) * 24)
        # 10*100/124 = 8.06 -> 8; two leftover units go to the first two cores
        assert counts[0] == 8
        assert counts[1:3] == [1, 1] and sum(counts[3:]) == 0

    def test_ties_go_to_lower_index(self):
        assert largest_remainder([1.5, 1.5, 1.0], 4) == [2, 1, 1]

    def test_deep_rbc_24_gpus_plus_576_cores(self):
        weights = (30000.0,) * 24 + (1377152 / 576,) * 576
        counts = target_counts(2097152, weights)
        assert counts[:24] == [30000] * 24
        assert {c for c in counts[24:]} == {2390, 2391}
        assert sum(counts) == 2097152

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.one_of(st.just(0.0), st.floats(0.01, 50)), min_size=1, max_size=30), st.integers(1, 10000))
    def test_within_one_of_quota(self, weights, total):
        if sum(weights) <= 0:
            weights = weights + [1.0]
        rw = RankWeights(tuple(weights))
        counts = target_counts(total, rw)
        q = rw.quotas(total)
        assert sum(counts) == total
        assert all(abs(c - t) < 1 for c, t in zip(counts, q))
        stats = partition_stats(partition_from_assignment(np.repeat(np.arange(len(counts)), counts), len(counts)), rw)
        worst = max((t + 1) / t for t in q if t > 0)
        assert stats.imbalance <= worst + 1e-12

    def test_rejects_bad_weights(self):
        with pytest.raises(PartitionError):
            RankWeights((0.0, 0.0))
        with pytest.raises(PartitionError):
            RankWeights((-1.0, 2.0))


class TestRcb:
    def test_cube_splits_along_x_first(self):
        m = BoxMesh(2, 2, 2)
        p = partition_rcb(m, (4, 4))
        assert set(m.coords[p.elements_of(0), 0].tolist()) == {0}
        assert set(m.coords[p.elements_of(1), 0].tolist()) == {1}

    def test_two_elements(self):
        m = BoxMesh(2, 1, 1)
        p = partition_rcb(m, (1, 1))
        assert p.assignment.tolist() == [0, 1]
        assert comm_plan(m, p, 7).inter_rank_faces == 1

    def test_uneven_three_ranks(self):
        m = BoxMesh(4, 4, 4)
        p = partition_rcb(m, (32, 16, 16))
        assert p.counts == (32, 16, 16)
        slab = m.coords[p.elements_of(0)]
        assert sorted(set(slab[:, 0].tolist())) == [0, 1]
        assert np.bincount(p.assignment, minlength=3).tolist() == [32, 16, 16]

    def test_counts_must_sum(self):
        with pytest.raises(PartitionError):
            partition_rcb(BoxMesh(2, 2, 2), (3, 4))

    def test_zero_count_ranks_allowed(self):
        p = partition_rcb(BoxMesh(2, 2, 2), (0, 8, 0))
        assert p.counts == (0, 8, 0)

    def test_assignment_is_read_only(self):
        p = partition_rcb(BoxMesh(2, 2, 2), (4, 4))
        with pytest.raises(ValueError):
            p.assignment[0] = 1

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 6), st.integers(1, 6), st.integers(1, 6), st.data())
    def test_exact_counts(self, nx, ny, nz, data):
        m = BoxMesh(nx, ny, nz)
        n = data.draw(st.integers(1, min(8, m.n_elements)))
        counts = target_counts(m.n_elements, data.draw(st.lists(st.floats(0.1, 5), min_size=n, max_size=n)))
        p = partition_rcb(m, counts)
        assert list(p.counts) == counts
        assert np.bincount(p.assignment, minlength=n).tolist() == counts


class TestCommPlan:
    def test_single_face(self):
        m = BoxMesh(2, 1, 1)
        plan = comm_plan(m, partition_from_assignment([0, 1], 2), 7)
        assert plan.points(0, 1) == plan.points(1, 0) == 64
        assert plan.messages(0) == [(1, 64)] and plan.messages(1) == [(0, 64)]

    def test_single_rank(self):
        m = BoxMesh(3, 3, 3)
        plan = comm_plan(m, partition_rcb(m, (27,)), 7)
        assert plan.total_exchanged_points == 0 and plan.messages(0) == []

    def test_slabs(self):
        m = BoxMesh(4, 4, 4)
        p = partition_rcb(m, (32, 32))
        plan = comm_plan(m, p, 7)
        assert plan.pair_faces == {(0, 1): 16}
        assert plan.points(0, 1) == 1024

    def test_unknown_rank(self):
        plan = comm_plan(BoxMesh(2, 1, 1), partition_from_assignment([0, 1], 2), 7)
        with pytest.raises(KeyError):
            plan.messages(5)

    def test_csv(self, tmp_path):
        m = BoxMesh(2, 1, 1)
        p = partition_from_assignment([0, 1], 2)
        comm_plan(m, p, 7).write_csv(tmp_path / "c.csv")
        p.write_csv(tmp_path / "p.csv")
        assert (tmp_path / "c.csv").read_text() == "rank_a,rank_b,points\n0,1,64\n"
        assert (tmp_path / "p.csv").read_text() == "element_id,rank\n0,0\n1,1\n"

    @settings(max_examples=100, deadline=None)
    @given(st.integers(1, 5), st.integers(1, 5), st.integers(1, 5), st.integers(1, 6), st.data())
    def test_matches_neighbor_walk(self, nx, ny, nz, ranks, data):
        m = BoxMesh(nx, ny, nz)
        a = data.draw(st.lists(st.integers(0, ranks - 1), min_size=m.n_elements, max_size=m.n_elements))
        p = partition_from_assignment(a, ranks)
        plan = comm_plan(m, p, 3)
        expected = {}
        for e, f in brute_faces(m):
            r, s = a[e], a[f]
            if r != s:
                k = (min(r, s), max(r, s))
                expected[k] = expected.get(k, 0) + 1
        assert plan.pair_faces == expected
        assert check_unit_depth(m, p, plan)


def test_unit_depth_check_catches_a_wrong_plan():
    m = BoxMesh(3, 1, 1)
    p = partition_from_assignment([0, 1, 1], 2)
    plan = comm_plan(m, p, 7)
    assert check_unit_depth(m, p, plan)
    wrong = type(plan)(2, 64, {(0, 1): 2})  # element 2 is two layers from the interface
    assert not check_unit_depth(m, p, wrong)


class TestStats:
    def test_balanced(self):
        p = partition_from_assignment([0, 0, 1, 1], 2)
        s = partition_stats(p, (1, 1))
        assert (s.imbalance, s.max_count, s.min_count) == (1.0, 2, 2)

    def test_weighted(self):
        p = partition_from_assignment([0, 0, 0, 1], 2)
        assert partition_stats(p, (1, 1)).imbalance == 1.5
        assert partition_stats(p, (3, 1)).imbalance == 1.0


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(1, 6), st.integers(1, 5), st.data())
def test_splitting_a_rank_never_removes_faces(nx, ny, nz, ranks, data):
    m = BoxMesh(nx, ny, nz)
    a = data.draw(st.lists(st.integers(0, ranks - 1), min_size=m.n_elements, max_size=m.n_elements))
    victim = data.draw(st.integers(0, ranks - 1))
    flip = data.draw(st.lists(st.booleans(), min_size=m.n_elements, max_size=m.n_elements))
    b = [ranks if (r == victim and f) else r for r, f in zip(a, flip)]
    before = comm_plan(m, partition_from_assignment(a, ranks), 7).inter_rank_faces
    after = comm_plan(m, partition_from_assignment(b, ranks + 1), 7).inter_rank_faces
    assert after >= before


def test_rcb_is_deterministic():
    m = BoxMesh(9, 7, 5)
    counts = target_counts(m.n_elements, (5.0, 1.0, 1.0, 3.0, 2.0))
    assert partition_rcb(m, counts).assignment.tobytes() == partition_rcb(m, counts).assignment.tobytes()
