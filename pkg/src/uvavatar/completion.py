"""Deterministic map completion baselines and UV-space editing.

Texture completion copies mirrored texels and fills the rest harmonically. Segmentation
completion mirrors labels and then grows them along the seam-aware texel graph. Displacement
prediction uses per-label mean offsets fitted from examples.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components
from scipy.sparse.linalg import spsolve

from .body_model import DEFAULT_OFFSET_CAP, BodyTemplate
from .maps import GARMENT_LABELS, DisplacementMap, SegmentationMap, TextureMap
from .synth import limb_coordinates, limb_joint_ids
from .uv_atlas import TexelTable, UvAtlas

log = logging.getLogger(__name__)


def _grid_edges(shape) -> np.ndarray:
    h, w = shape
    idx = np.arange(h * w).reshape(h, w)
    return np.concatenate([
        np.stack([idx[:, :-1].ravel(), idx[:, 1:].ravel()], 1),
        np.stack([idx[:-1, :].ravel(), idx[1:, :].ravel()], 1),
    ])


def _domain(shape, table: TexelTable | None):
    """(domain mask, undirected edges between domain texels) for a map of the given shape."""
    if table is None:
        return np.ones(shape, bool), _grid_edges(shape)
    if shape != (table.resolution, table.resolution):
        raise ValueError("map resolution does not match the texel table")
    return table.valid, table.adjacency_edges()


def mirror_fill(partial: TextureMap, table: TexelTable) -> TextureMap:
    """Copy colours from valid mirror texels into invalid texels."""
    if partial.resolution != table.resolution:
        raise ValueError("map resolution does not match the texel table")
    mask = partial.mask.ravel()
    sym = table.symmetry.ravel()
    dst = np.nonzero(~mask & (sym >= 0))[0]
    dst = dst[mask[sym[dst]]]
    rgb = partial.rgb.reshape(-1, 3).copy()
    rgb[dst] = rgb[sym[dst]]
    out = mask.copy()
    out[dst] = True
    r = partial.resolution
    return TextureMap(rgb.reshape(r, r, 3), out.reshape(r, r))


def _mirror_labels(partial: SegmentationMap, table: TexelTable):
    mask = partial.mask.ravel().copy()
    labels = partial.labels.ravel().copy()
    sym = table.symmetry.ravel()
    dst = np.nonzero(~mask & (sym >= 0))[0]
    dst = dst[mask[sym[dst]]]
    labels[dst] = labels[sym[dst]]
    mask[dst] = True
    return labels, mask


def diffuse_fill(values: np.ndarray, mask: np.ndarray, table: TexelTable | None = None) -> np.ndarray:
    """Harmonic fill of texels outside ``mask`` with known texels as Dirichlet boundary.

    ``values`` is (H, W) or (H, W, C). The Laplacian lives on the 4-neighbour grid, or on the
    seam-aware texel graph of ``table`` (texels outside the atlas are left as zero). Unknown
    components with no known texel take the global mean of the known values.
    """
    values = np.asarray(values, dtype=np.float64)
    squeeze = values.ndim == 2
    vals = values[..., None] if squeeze else values
    shape = vals.shape[:2]
    mask = np.asarray(mask, bool)
    if mask.shape != shape:
        raise ValueError("mask shape does not match values")
    domain, edges = _domain(shape, table)
    known = (mask & domain).ravel()
    if not known.any():
        raise ValueError("diffusion fill needs at least one valid texel")
    flat = vals.reshape(-1, vals.shape[2]).copy()
    flat[~domain.ravel()] = 0.0
    unknown = np.nonzero(domain.ravel() & ~known)[0]
    if len(unknown):
        n = flat.shape[0]
        a, b = edges[:, 0], edges[:, 1]
        adj = sp.coo_matrix((np.ones(2 * len(a)), (np.r_[a, b], np.r_[b, a])), shape=(n, n)).tocsr()
        adj.data[:] = 1.0  # collapse duplicate grid/seam pairs
        # components of unknown texels that touch no known texel fall back to the mean
        _, comp = connected_components(adj, directed=False)
        seeded = np.zeros(comp.max() + 1, bool)
        seeded[comp[known]] = True
        orphan = unknown[~seeded[comp[unknown]]]
        solve = unknown[seeded[comp[unknown]]]
        flat[orphan] = flat[known].mean(0)
        if len(solve):
            deg = np.asarray(adj.sum(1)).ravel()
            sub = adj[solve][:, solve]
            lap = sp.diags(deg[solve]) - sub
            rhs = adj[solve][:, known] @ flat[known]
            sol = spsolve(lap.tocsc(), rhs)
            flat[solve] = sol.reshape(len(solve), -1)
    out = flat.reshape(vals.shape)
    return out[..., 0] if squeeze else out


def complete_texture(partial: TextureMap, table: TexelTable) -> TextureMap:
    """Mirror fill, then harmonic fill; input texels are preserved exactly."""
    mirrored = mirror_fill(partial, table)
    filled = diffuse_fill(mirrored.rgb.astype(np.float64), mirrored.mask, table)
    rgb = np.where(mirrored.mask[..., None], mirrored.rgb, np.clip(np.rint(filled), 0, 255).astype(np.uint8))
    rgb[~table.valid] = 0
    return TextureMap(rgb.astype(np.uint8), table.valid.copy())


def _propagate_labels(labels: np.ndarray, known: np.ndarray, domain: np.ndarray, edges: np.ndarray):
    """Multi-source breadth-first growth; a texel reached from several labels takes the lowest."""
    labels = labels.copy()
    known = known.copy()
    a = np.r_[edges[:, 0], edges[:, 1]]
    b = np.r_[edges[:, 1], edges[:, 0]]
    inside = domain[a] & domain[b]
    a, b = a[inside], b[inside]
    frontier = known.copy()
    big = np.iinfo(np.int64).max
    while True:
        sel = frontier[a] & ~known[b]
        if not sel.any():
            break
        cand = np.full(len(labels), big)
        np.minimum.at(cand, b[sel], labels[a[sel]])
        new = cand < big
        labels[new] = cand[new]
        known |= new
        frontier = new
    return labels, known


def complete_segmentation(partial: SegmentationMap, table: TexelTable) -> SegmentationMap:
    """Mirror labels, then give each remaining texel the label of its nearest labeled texel."""
    if partial.resolution != table.resolution:
        raise ValueError("map resolution does not match the texel table")
    domain = table.valid.ravel()
    labels, mask = _mirror_labels(partial, table)
    mask &= domain
    if not mask.any():
        raise ValueError("segmentation completion needs at least one valid texel")
    labels, reached = _propagate_labels(labels, mask, domain, table.adjacency_edges())
    # atlas islands with no labeled texel at all borrow the most common label
    stray = domain & ~reached
    if stray.any():
        labels[stray] = np.bincount(labels[mask]).argmax()
    labels[~domain] = 0
    r = table.resolution
    return SegmentationMap(labels.reshape(r, r), table.valid.copy(), partial.palette)


@dataclass(frozen=True, eq=False)
class DisplacementPrior:
    """Per-label mean offset fields; ``seen[l]`` marks texels with at least one example."""

    means: np.ndarray  # (L, R, R, 3) meters
    seen: np.ndarray  # (L, R, R) bool
    labels: tuple[str, ...]
    cap: float = DEFAULT_OFFSET_CAP

    @property
    def resolution(self) -> int:
        return self.means.shape[1]


def fit_displacement_prior(pairs) -> DisplacementPrior:
    """Mean displacement per (label, texel) over the training pairs; unseen pairs stay zero."""
    if not pairs:
        raise ValueError("at least one (segmentation, displacement) pair is required")
    seg0, disp0 = pairs[0]
    r, palette, cap = seg0.resolution, seg0.palette, disp0.scale
    L = len(palette)
    sums = np.zeros((L, r, r, 3))
    counts = np.zeros((L, r, r))
    rows, cols = np.indices((r, r))
    for seg, disp in pairs:
        if seg.resolution != r or disp.resolution != r:
            raise ValueError("all pairs must share one resolution")
        if seg.palette != palette:
            raise ValueError("all segmentations must share one palette")
        m = seg.mask & disp.mask
        vals = disp.decode()
        np.add.at(sums, (seg.labels[m], rows[m], cols[m]), vals[m])
        np.add.at(counts, (seg.labels[m], rows[m], cols[m]), 1.0)
    seen = counts > 0
    means = np.where(seen[..., None], sums / np.maximum(counts, 1)[..., None], 0.0)
    return DisplacementPrior(means, seen, palette, cap)


def predict_displacement(seg: SegmentationMap, prior: DisplacementPrior, table: TexelTable | None = None) -> DisplacementMap:
    """Per-label prior offsets, relaxed once (weight 0.5) at label boundaries."""
    if seg.resolution != prior.resolution:
        raise ValueError("segmentation and prior resolutions differ")
    if seg.palette != prior.labels:
        raise ValueError("segmentation palette differs from the prior's labels")
    r = seg.resolution
    labels = seg.labels
    for l in np.unique(labels[seg.mask]):
        if not prior.seen[l].any():
            log.warning("label %r absent from displacement prior; using zero offsets", prior.labels[l])
    rows, cols = np.indices((r, r))
    vals = prior.means[labels, rows, cols]
    vals[~seg.mask] = 0.0
    flat = vals.reshape(-1, 3)
    lab = labels.ravel()
    mask = seg.mask.ravel()
    edges = _grid_edges((r, r)) if table is None else table.adjacency_edges()
    a, b = np.r_[edges[:, 0], edges[:, 1]], np.r_[edges[:, 1], edges[:, 0]]
    keep = mask[a] & mask[b]
    a, b = a[keep], b[keep]
    boundary = np.zeros(r * r, bool)
    boundary[a[lab[a] != lab[b]]] = True
    nsum = np.zeros_like(flat)
    ncount = np.zeros(r * r)
    np.add.at(nsum, a, flat[b])
    np.add.at(ncount, a, 1.0)
    relax = boundary & (ncount > 0)
    out = flat.copy()
    out[relax] = 0.5 * flat[relax] + 0.5 * nsum[relax] / ncount[relax, None]
    out = np.clip(out, -prior.cap, prior.cap)
    return DisplacementMap.encode(out.reshape(r, r, 3), seg.mask.copy(), prior.cap)


def _label_index(seg: SegmentationMap, label) -> int:
    if isinstance(label, str):
        return seg.label(label)
    label = int(label)
    if not 0 <= label < len(seg.palette):
        raise KeyError(f"label {label} outside palette")
    return label


def _band(region: np.ndarray, domain: np.ndarray, edges: np.ndarray, width: int) -> np.ndarray:
    """Region texels within ``width`` graph steps of a domain texel outside the region."""
    a = np.r_[edges[:, 0], edges[:, 1]]
    b = np.r_[edges[:, 1], edges[:, 0]]
    keep = domain[a] & domain[b]
    a, b = a[keep], b[keep]
    reached = domain & ~region
    band = np.zeros_like(region)
    frontier = reached.copy()
    for _ in range(width):
        hit = np.zeros_like(region)
        hit[b[frontier[a]]] = True
        hit &= region & ~band
        band |= hit
        frontier = hit
    return band


def edit_texture_region(texture: TextureMap, seg: SegmentationMap, label, swatch: np.ndarray,
                        table: TexelTable, band_width: int = 2) -> TextureMap:
    """Tile ``swatch`` over the texels labeled ``label`` and re-blend a band at the region edge."""
    swatch = np.asarray(swatch)
    if swatch.ndim != 3 or swatch.shape[2] != 3 or swatch.shape[0] == 0 or swatch.shape[1] == 0:
        raise ValueError("swatch must be a non-empty (H, W, 3) image")
    if texture.resolution != seg.resolution:
        raise ValueError("texture and segmentation resolutions differ")
    l = _label_index(seg, label)
    region = seg.mask & (seg.labels == l)
    if not region.any():
        return texture
    r = texture.resolution
    rows, cols = np.indices((r, r))
    tiled = swatch[rows % swatch.shape[0], cols % swatch.shape[1]].astype(np.uint8)
    rgb = texture.rgb.copy()
    rgb[region] = tiled[region]
    domain, edges = _domain((r, r), table)
    band = _band(region.ravel(), domain.ravel(), edges, band_width).reshape(r, r)
    mask = texture.mask.copy() | region
    mask[band] = False
    return complete_texture(TextureMap(rgb, mask), table)


def edit_garment_length(seg: SegmentationMap, garment, t: float, table: TexelTable,
                        template: BodyTemplate, atlas: UvAtlas) -> SegmentationMap:
    """Set sleeve/trouser length: limb texels with coordinate <= t get the garment (none at t = 0).

    Upper garments act on the arms, lower garments on the legs.
    """
    l = _label_index(seg, garment)
    name = seg.palette[l]
    if name not in GARMENT_LABELS:
        raise ValueError(f"{name!r} is not a garment label")
    if not 0.0 <= t <= 1.0:
        raise ValueError("length parameter must lie in [0, 1]")
    coord, limb = limb_coordinates(table, template, atlas)
    names = sorted(limb_joint_ids(template))
    kind = "arm" if name == "upper_garment" else "leg"
    ids = [i for i, n in enumerate(names) if n.endswith(kind)]
    sel = np.isin(limb, ids) & seg.mask
    labels = seg.labels.copy()
    # t = 0 removes the garment entirely, including texels clipped to the limb root
    cover = (coord <= t) if t > 0 else np.zeros_like(sel)
    labels[sel & cover] = l
    labels[sel & ~cover] = seg.label("skin")
    return SegmentationMap(labels, seg.mask.copy(), seg.palette)


def recolor_relabeled(texture: TextureMap, old: SegmentationMap, new: SegmentationMap,
                      table: TexelTable) -> TextureMap:
    """Repaint texels whose label changed, diffusing only from unchanged texels of the new label."""
    changed = old.mask & new.mask & (old.labels != new.labels)
    if not changed.any():
        return texture
    rgb = texture.rgb.copy()
    keep = texture.mask & ~changed
    for l in np.unique(new.labels[changed]):
        dst = changed & (new.labels == l)
        src = keep & (new.labels == l)
        if not src.any():
            continue  # no reference colour for this label; leave the texels as they were
        rgb[dst] = np.clip(np.rint(diffuse_fill(rgb, src, table)[dst]), 0, 255).astype(np.uint8)
    return TextureMap(rgb, texture.mask.copy())


def swap_garments(tex_a: TextureMap, seg_a: SegmentationMap, tex_b: TextureMap, seg_b: SegmentationMap,
                  labels, table: TexelTable) -> tuple[TextureMap, SegmentationMap]:
    """Move the garments ``labels`` of subject B onto subject A."""
    res = {tex_a.resolution, seg_a.resolution, tex_b.resolution, seg_b.resolution, table.resolution}
    if len(res) != 1:
        raise ValueError("maps do not share one atlas resolution")
    if seg_a.palette != seg_b.palette:
        raise ValueError("segmentations use different palettes")
    ids = [_label_index(seg_a, l) for l in labels]
    if not ids:
        return tex_a, seg_a
    rgb = tex_a.rgb.copy()
    lab = seg_a.labels.copy()
    tmask = tex_a.mask.copy()
    smask = seg_a.mask.copy()
    stale = np.zeros_like(smask)
    for l in ids:
        take = seg_b.mask & (seg_b.labels == l)
        rgb[take] = tex_b.rgb[take]
        lab[take] = l
        tmask[take] = tex_b.mask[take]
        smask[take] = True
        stale |= seg_a.mask & (seg_a.labels == l) & ~take
    tmask[stale] = False
    smask[stale] = False
    new_tex = TextureMap(rgb, tmask)
    new_seg = SegmentationMap(lab, smask, seg_a.palette)
    if stale.any() or not tmask[table.valid].all():
        new_tex = complete_texture(new_tex, table)
    if stale.any():
        new_seg = complete_segmentation(new_seg, table)
    return new_tex, new_seg
