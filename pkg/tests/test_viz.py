import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from PIL import Image

from textssl.dataset import LineImage, corpus_from_lines
from textssl.labelgen import ConvAutoencoder, LabelManifest
from textssl.viz import (CONTEXT_MARGIN, Region, TrigramIndex, dump_reconstructions, nearest_neighbor_patches,
                         save_retrieval_panels, save_trigram_panel, trigram_matches, trigram_scan)


def _slices(x):
    # (B, 40, W) -> one raw 320-dim vector per 8-px slice
    b, h, w = x.shape
    return x.reshape(b, h, w // 8, 8).permute(0, 2, 1, 3).reshape(b, w // 8, -1)


def _lines(n, frames=6, seed=0):
    rng = np.random.default_rng(seed)
    return [LineImage(f"l{i}", rng.random((40, 8 * frames), dtype=np.float32)) for i in range(n)]


def test_reconstruction_panels(tmp_path, printed):
    ae = ConvAutoencoder(channels=(4, 4, 8, 8), latent_dim=8)
    lines = [e.image for e in printed.entries[:2]]
    paths = dump_reconstructions(ae, lines, tmp_path / "a")
    assert [p.name for p in paths] == [f"recon_{i:04d}_{l.id}.png" for i, l in enumerate(lines)]
    img = np.asarray(Image.open(paths[0]))
    assert img.shape == (2 * 40 + 4, lines[0].width)
    again = dump_reconstructions(ae, lines, tmp_path / "b")
    assert all(a.read_bytes() == b.read_bytes() for a, b in zip(paths, again))


def test_self_retrieval_is_exact():
    lines = _lines(4)
    panels = nearest_neighbor_patches(_slices, lines, lines, n=5, seed=3)
    for i, p in enumerate(panels):
        assert len(p.matches) == 5
        top = p.matches[0]
        assert (top.region.line, top.region.frame) == (i, p.query.frame)
        assert top.similarity == pytest.approx(1.0, abs=1e-12)
        sims = [m.similarity for m in p.matches]
        assert sims == sorted(sims, reverse=True)


def test_collapsed_model_scores_all_ones():
    constant = lambda x: torch.ones(x.shape[0], x.shape[2] // 8, 3)
    panels = nearest_neighbor_patches(constant, _lines(2), _lines(3, seed=1), n=8)
    assert all(m.similarity == pytest.approx(1.0) for p in panels for m in p.matches)


def test_too_many_neighbours():
    with pytest.raises(ValueError):
        nearest_neighbor_patches(_slices, _lines(1), _lines(2, frames=3), n=7)


def test_retrieval_with_model_and_panels(tmp_path, printed):
    from conftest import tiny_model
    lines = [e.image for e in printed.entries[:3]]
    panels = nearest_neighbor_patches(tiny_model(), lines, lines, n=3)
    paths = save_retrieval_panels(panels, lines, lines, tmp_path)
    assert len(paths) == 3 and all(np.asarray(Image.open(p)).shape[0] == 40 for p in paths)


@given(frame=st.integers(0, 200), span=st.integers(1, 3), width=st.integers(1, 2000))
def test_region_maps_frames_to_pixels(frame, span, width):
    r = Region.around(0, "x", frame, span, width)
    assert (r.x0, r.x1) == (8 * frame, 8 * frame + 8 * span)
    c0, c1 = r.context
    assert 0 <= c0 and c1 <= width
    assert c0 == max(0, r.x0 - CONTEXT_MARGIN) and c1 == min(width, r.x1 + CONTEXT_MARGIN)


def _label_corpus(label_rows):
    lines = [LineImage(f"l{i}", np.ones((40, 8 * len(r)), np.float32)) for i, r in enumerate(label_rows)]
    corpus = corpus_from_lines(lines)
    return LabelManifest({f"l{i}": r for i, r in enumerate(label_rows)}, 4, "toy"), corpus


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10**6))
def test_trigram_index_matches_scan(seed):
    rng = np.random.default_rng(seed)
    rows = [rng.integers(0, 3, size=int(rng.integers(1, 12))) for _ in range(64)]
    manifest, corpus = _label_corpus(rows)
    index = TrigramIndex(manifest, corpus)
    for tri in np.ndindex(3, 3, 3):
        assert index.lookup(tri) == trigram_scan(manifest, corpus, tri)


def test_trigram_examples(tmp_path):
    manifest, corpus = _label_corpus([np.array([0, 1, 2, 3, 0]), np.array([0, 0, 1, 1])])
    hits = trigram_matches(manifest, corpus, "l0", 1)
    assert [(h.line_id, h.position) for h in hits] == [("l0", 1)]
    assert (hits[0].region.x0, hits[0].region.x1) == (8, 32)
    manifest, corpus = _label_corpus([np.array([3, 1, 2, 0])] * 5)
    hits = trigram_matches(manifest, corpus, "l2", 1)
    assert [(h.line_id, h.position) for h in hits] == [(f"l{i}", 1) for i in range(5)]
    assert len(trigram_matches(manifest, corpus, "l2", 1, max_hits=2)) == 2
    assert save_trigram_panel(hits, corpus, tmp_path / "t.png").exists()
    for pos in (-1, 2):
        with pytest.raises(IndexError):
            trigram_matches(manifest, corpus, "l0", pos)
