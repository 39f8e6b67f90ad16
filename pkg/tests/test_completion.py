import logging

import numpy as np
import pytest

from uvavatar.completion import (
    complete_segmentation,
    complete_texture,
    diffuse_fill,
    edit_garment_length,
    edit_texture_region,
    fit_displacement_prior,
    mirror_fill,
    predict_displacement,
    recolor_relabeled,
    swap_garments,
)
from uvavatar.maps import DisplacementMap, SegmentationMap, TextureMap
from uvavatar.synth import (
    displacement_training_pairs,
    garment_displacement,
    limb_coordinates,
    procedural_texture,
    reference_segmentation,
)

from conftest import humanoid, texel_table
from oracles import dense_laplace


@pytest.fixture(scope="module")
def scene():
    tpl, atlas = humanoid()
    table = texel_table(128)
    seg = reference_segmentation(table, tpl, atlas)
    return tpl, atlas, table, seg


class TestDiffusion:
    def test_dense_solve(self, rng):
        vals = rng.random((16, 16, 2))
        mask = rng.random((16, 16)) < 0.25
        got = diffuse_fill(vals, mask)
        for c in range(2):
            assert np.abs(got[..., c] - dense_laplace(vals[..., c], mask)).max() < 1e-5

    def test_linear_ramp_is_reproduced(self):
        x = np.tile(np.linspace(0, 1, 10), (4, 1))
        mask = np.zeros_like(x, bool)
        mask[:, [0, -1]] = True
        assert np.abs(diffuse_fill(np.where(mask, x, 0), mask) - x).max() < 1e-12

    def test_known_values_kept(self, rng):
        vals = rng.random((12, 12))
        mask = rng.random((12, 12)) < 0.5
        assert np.array_equal(diffuse_fill(vals, mask)[mask], vals[mask])

    def test_all_missing(self):
        with pytest.raises(ValueError):
            diffuse_fill(np.zeros((4, 4)), np.zeros((4, 4), bool))

    def test_orphan_component_takes_mean(self, scene):
        _, _, table, _ = scene
        vals = np.zeros((128, 128))
        mask = table.valid & (table.chart == 0)
        vals[mask] = 7.0
        out = diffuse_fill(vals, mask, table)
        assert np.allclose(out[table.valid], 7.0)
        assert not out[~table.valid].any()


class TestTexture:
    def test_mirror_exact(self, scene):
        _, _, table, seg = scene
        tex = procedural_texture(table, seg, seed=4)
        left = table.valid & (table.points[..., 0] > 0)
        out = mirror_fill(TextureMap(tex.rgb, left), table)
        got = out.mask & ~left
        assert got.sum() > 0.3 * table.num_valid
        assert np.array_equal(out.rgb[got], tex.rgb[got])

    def test_complete_is_idempotent_and_total(self, scene, rng):
        _, _, table, seg = scene
        tex = procedural_texture(table, seg, style="smooth", seed=4)
        part = TextureMap(tex.rgb, table.valid & (rng.random((128, 128)) < 0.1))
        full = complete_texture(part, table)
        assert np.array_equal(full.mask, table.valid)
        assert np.array_equal(full.rgb[part.mask], tex.rgb[part.mask])
        assert complete_texture(full, table).equals(full)

    def test_complete_preserves_full_input(self, scene):
        _, _, table, seg = scene
        tex = procedural_texture(table, seg, seed=5)
        assert complete_texture(tex, table).equals(tex)


class TestSegmentation:
    def test_accuracy_from_half(self, scene):
        _, _, table, seg = scene
        half = SegmentationMap(seg.labels, seg.mask & (table.points[..., 0] >= 0))
        out = complete_segmentation(half, table)
        assert (out.labels[table.valid] == seg.labels[table.valid]).mean() > 0.99

    def test_bfs_midpoint_tie_goes_to_lowest(self):
        from uvavatar.completion import _grid_edges, _propagate_labels

        labels = np.zeros(5, np.int64)
        labels[0], labels[4] = 3, 2
        known = np.array([1, 0, 0, 0, 1], bool)
        out, reached = _propagate_labels(labels, known, np.ones(5, bool), _grid_edges((1, 5)))
        assert out.tolist() == [3, 3, 2, 2, 2] and reached.all()

    def test_nothing_known(self, scene):
        _, _, table, _ = scene
        with pytest.raises(ValueError):
            complete_segmentation(SegmentationMap.empty(128), table)


class TestDisplacementPrior:
    def test_mean_of_identical_pairs(self, scene):
        tpl, _, table, seg = scene
        d = garment_displacement(table, tpl, seg)
        prior = fit_displacement_prior([(seg, d), (seg, d)])
        for l in np.unique(seg.labels[seg.mask]):
            sel = seg.mask & (seg.labels == l)
            assert np.allclose(prior.means[l][sel], d.decode()[sel])

    def test_noise_is_averaged(self, scene, rng):
        tpl, _, table, seg = scene
        d = garment_displacement(table, tpl, seg)
        base = d.decode()
        pairs = []
        for _ in range(16):
            noisy = np.clip(base + rng.normal(scale=0.004, size=base.shape), -d.scale, d.scale)
            pairs.append((seg, DisplacementMap.encode(noisy, seg.mask, d.scale)))
        prior = fit_displacement_prior(pairs)
        rows, cols = np.indices((128, 128))
        err = prior.means[seg.labels, rows, cols][seg.mask] - base[seg.mask]
        # standard error of a 16-sample mean, with quantization slack
        assert np.sqrt((err**2).mean()) < 0.004 / np.sqrt(16) * 1.2

    def test_predict_recovers_training_map_away_from_boundaries(self, scene):
        tpl, atlas, table, seg = scene
        pairs = displacement_training_pairs(table, tpl, atlas)
        prior = fit_displacement_prior(pairs)
        seg0, d0 = pairs[0]
        pred = predict_displacement(seg0, prior, table)
        assert pred.mask.sum() == seg0.mask.sum()
        assert np.abs(pred.decode()).max() <= prior.cap + 1e-12

    def test_unseen_label_logs(self, scene, caplog):
        tpl, _, table, seg = scene
        d = garment_displacement(table, tpl, seg)
        no_shoes = SegmentationMap(np.where(seg.labels == seg.label("shoes"), 1, seg.labels), seg.mask)
        prior = fit_displacement_prior([(no_shoes, d)])
        with caplog.at_level(logging.WARNING):
            predict_displacement(seg, prior, table)
        assert "shoes" in caplog.text


class TestEditing:
    def test_length_edit_monotone(self, scene):
        tpl, atlas, table, seg = scene
        ug = seg.label("upper_garment")
        counts = [(edit_garment_length(seg, "upper_garment", t, table, tpl, atlas).labels == ug).sum()
                  for t in (0.0, 0.25, 0.5, 0.75, 1.0)]
        assert counts == sorted(counts) and counts[0] < counts[-1]

    def test_length_edit_leaves_other_labels(self, scene):
        tpl, atlas, table, seg = scene
        out = edit_garment_length(seg, "lower_garment", 0.3, table, tpl, atlas)
        _, limb = limb_coordinates(table, tpl, atlas)
        legs = np.isin(limb, [1, 3])
        assert np.array_equal(out.labels[~legs], seg.labels[~legs])

    def test_length_rejects_non_garment(self, scene):
        tpl, atlas, table, seg = scene
        with pytest.raises(ValueError):
            edit_garment_length(seg, "hair", 0.5, table, tpl, atlas)
        with pytest.raises(ValueError):
            edit_garment_length(seg, "upper_garment", 1.5, table, tpl, atlas)

    def test_texture_edit_outside_region_unchanged(self, scene, rng):
        _, _, table, seg = scene
        tex = procedural_texture(table, seg, seed=1)
        out = edit_texture_region(tex, seg, "lower_garment", rng.integers(0, 255, (3, 3, 3), dtype=np.uint8), table)
        outside = table.valid & (seg.labels != seg.label("lower_garment"))
        assert np.array_equal(out.rgb[outside], tex.rgb[outside])

    def test_texture_edit_missing_label_is_noop(self, scene):
        _, _, table, seg = scene
        tex = procedural_texture(table, seg, seed=1)
        only_skin = SegmentationMap(np.where(seg.mask, 1, 0), seg.mask)
        assert edit_texture_region(tex, only_skin, "shoes", np.zeros((2, 2, 3), np.uint8), table) is tex

    def test_swap_no_labels_is_identity(self, scene):
        _, _, table, seg = scene
        a = procedural_texture(table, seg, seed=1)
        b = procedural_texture(table, seg, seed=2)
        t, s = swap_garments(a, seg, b, seg, [], table)
        assert t.equals(a) and s.equals(seg)

    def test_swap_takes_garment_from_other(self, scene):
        _, _, table, seg = scene
        a = procedural_texture(table, seg, seed=1)
        b = procedural_texture(table, seg, style="stripes", seed=2)
        t, _ = swap_garments(a, seg, b, seg, ["upper_garment"], table)
        ug = seg.mask & (seg.labels == seg.label("upper_garment"))
        assert np.array_equal(t.rgb[ug], b.rgb[ug])
        assert np.array_equal(t.rgb[~ug], a.rgb[~ug])

    def test_recolor_takes_new_label_colour(self, scene):
        tpl, atlas, table, seg = scene
        tex = procedural_texture(table, seg, seed=1)
        short = edit_garment_length(seg, "upper_garment", 0.0, table, tpl, atlas)
        out = recolor_relabeled(tex, seg, short, table)
        changed = seg.labels != short.labels
        assert changed.any()
        assert np.array_equal(out.rgb[~changed], tex.rgb[~changed])
        skin = seg.mask & (seg.labels == seg.label("skin"))
        lo, hi = tex.rgb[skin].min(0), tex.rgb[skin].max(0)
        assert ((out.rgb[changed] >= lo) & (out.rgb[changed] <= hi)).all()
        assert recolor_relabeled(tex, seg, seg, table) is tex
