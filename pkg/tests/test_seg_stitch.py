import numpy as np
import pytest

from uvavatar.maps import DEFAULT_PALETTE, SegmentationMap
from uvavatar.seg_stitch import (
    FlowNetwork,
    MrfProblem,
    alpha_expansion,
    build_unary,
    discretize,
    max_flow,
    stitch,
)
from uvavatar.synth import reference_segmentation

from conftest import humanoid, texel_table
from oracles import edmonds_karp, exhaustive_potts, grid_edges, icm_energy, row_dp_potts


class TestMaxFlow:
    def test_textbook_network(self):
        # CLRS figure 26.1: maximum flow 23
        arcs = [(0, 1, 16), (0, 2, 13), (1, 3, 12), (2, 1, 4), (2, 4, 14), (3, 2, 9), (3, 5, 20), (4, 3, 7), (4, 5, 4)]
        t, h, c = map(np.array, zip(*arcs))
        value, side = max_flow(FlowNetwork(6, t, h, c.astype(float), 0, 5))
        assert value == pytest.approx(23.0, abs=1e-12)
        assert side[0] and not side[5]

    def test_random_graphs_match_oracle(self, rng):
        for _ in range(40):
            n = int(rng.integers(3, 9))
            m = int(rng.integers(1, 3 * n))
            t, h = rng.integers(0, n, m), rng.integers(0, n, m)
            c = rng.uniform(0, 3, m)
            value, side = max_flow(FlowNetwork(n, t, h, c, 0, n - 1))
            assert value == pytest.approx(edmonds_karp(n, t, h, c, 0, n - 1), abs=1e-9)
            assert c[side[t] & ~side[h]].sum() == pytest.approx(value, abs=1e-9)

    def test_disconnected(self):
        value, side = max_flow(FlowNetwork(3, [0], [1], [5.0], 0, 2))
        assert value == 0.0 and side.tolist() == [True, True, False]

    @pytest.mark.parametrize("kw", [dict(capacities=[-1.0]), dict(heads=[7]), dict(sink=0)])
    def test_validation(self, kw):
        args = dict(num_nodes=3, tails=[0], heads=[1], capacities=[1.0], source=0, sink=2)
        args.update(kw)
        with pytest.raises(ValueError):
            FlowNetwork(**args)


class TestMrf:
    def test_duplicate_edges_collapse(self):
        p = MrfProblem(np.zeros((3, 2)), [[0, 1], [1, 0], [1, 2], [2, 2]])
        assert p.edges.tolist() == [[0, 1], [1, 2]]

    def test_rejects_negative_unary(self):
        with pytest.raises(ValueError):
            MrfProblem(-np.ones((2, 2)), [[0, 1]])

    def test_binary_grids_exact(self, rng):
        for h, w in ((3, 3), (4, 4)):
            for _ in range(10):
                prob = MrfProblem(rng.uniform(0, 2, size=(h * w, 2)), grid_edges(h, w), rng.uniform(0.1, 2))
                assert prob.energy(alpha_expansion(prob)) == pytest.approx(exhaustive_potts(prob), abs=1e-9)

    def test_three_labels_small_exact_bound(self, rng):
        for _ in range(5):
            prob = MrfProblem(rng.uniform(0, 2, size=(9, 3)), grid_edges(3, 3), 0.8)
            e = prob.energy(alpha_expansion(prob))
            opt = exhaustive_potts(prob)
            assert opt - 1e-9 <= e <= 2 * opt + 1e-9

    def test_row_dp_oracle_agrees_with_exhaustive(self, rng):
        prob = MrfProblem(rng.uniform(0, 2, size=(12, 3)), grid_edges(3, 4), 0.7)
        assert row_dp_potts(prob.unary, 3, 4, 0.7) == pytest.approx(exhaustive_potts(prob), abs=1e-9)

    def test_beats_icm_on_8x8(self, rng):
        prob = MrfProblem(rng.uniform(0, 3, size=(64, 3)), grid_edges(8, 8), 1.0)
        lab = alpha_expansion(prob)
        assert prob.energy(lab) <= icm_energy(prob) + 1e-9
        assert prob.energy(lab) <= 2 * row_dp_potts(prob.unary, 8, 8, 1.0)

    def test_zero_smoothness_is_argmin(self, rng):
        u = rng.uniform(size=(30, 4))
        prob = MrfProblem(u, grid_edges(5, 6), 0.0)
        assert np.array_equal(alpha_expansion(prob), u.argmin(1))

    def test_label_permutation_invariance(self, rng):
        u = rng.uniform(0, 2, size=(16, 3))
        perm = np.array([2, 0, 1])
        a = MrfProblem(u, grid_edges(4, 4), 0.9)
        b = MrfProblem(u[:, perm], grid_edges(4, 4), 0.9)
        assert a.energy(alpha_expansion(a)) == pytest.approx(b.energy(alpha_expansion(b)), abs=1e-9)

    def test_bad_init(self):
        with pytest.raises(ValueError):
            alpha_expansion(MrfProblem(np.zeros((2, 2)), [[0, 1]]), init=np.array([0, 5]))


class TestUnaries:
    def test_vote_oracle(self, rng):
        r, L = 8, 4
        obs = []
        for _ in range(3):
            seg = SegmentationMap(rng.integers(0, L, (r, r)), rng.random((r, r)) < 0.6, DEFAULT_PALETTE[:L])
            obs.append((seg, rng.uniform(0, 1, (r, r))))
        u = build_unary(obs, L)
        for i in range(r):
            for j in range(r):
                votes = np.zeros(L)
                for seg, w in obs:
                    if seg.mask[i, j]:
                        votes[seg.labels[i, j]] += w[i, j]
                assert np.allclose(u[i, j], votes.sum() - votes, atol=1e-12)

    def test_unobserved_is_zero(self):
        seg = SegmentationMap.empty(4)
        assert not build_unary([(seg, 1.0)], 6).any()

    def test_negative_weight(self):
        with pytest.raises(ValueError):
            build_unary([(SegmentationMap.empty(4), -1.0)], 6)

    def test_discretize_ties_lowest(self):
        s = np.zeros((2, 2, 3))
        s[0, 0] = [1, 1, 0]
        assert discretize(s).labels[0, 0] == 0


class TestStitch:
    def test_agreeing_views_reproduce_truth(self):
        tpl, atlas = humanoid()
        table = texel_table(64)
        truth = reference_segmentation(table, tpl, atlas)
        half = table.points[..., 2] >= 0
        front = SegmentationMap(truth.labels, truth.mask & half)
        back = SegmentationMap(truth.labels, truth.mask & ~half)
        out = stitch([(front, 1.0), (back, 1.0)], table, smoothness=0.1)
        assert out.equals(truth)

    def test_majority_wins(self, rng):
        tpl, atlas = humanoid()
        table = texel_table(64)
        truth = reference_segmentation(table, tpl, atlas)
        noisy = SegmentationMap(np.where(rng.random(truth.labels.shape) < 0.5, 1, truth.labels), truth.mask)
        out = stitch([(truth, 1.0), (truth, 1.0), (noisy, 1.0)], table, smoothness=0.1)
        assert out.equals(truth)

    def test_empty_observations(self):
        with pytest.raises(ValueError):
            stitch([], texel_table(64))
