"""Diagnostic panels: autoencoder reconstructions, nearest-neighbour output
retrieval and label-trigram matching."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .dataset import LINE_HEIGHT, SUBSAMPLE, Corpus, LineImage, pad_batch

CONTEXT_MARGIN = 16
DEFAULT_NEIGHBORS = 8
SEPARATOR = 4
SEPARATOR_VALUE = 0.5


def _to_png(px: np.ndarray, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    img = Image.fromarray(np.round(np.clip(px, 0.0, 1.0) * 255).astype(np.uint8), mode="L")
    # no timestamps or other metadata, so equal pixels give equal bytes
    img.save(path, format="PNG", optimize=False)
    return path


def _safe_name(line_id: str) -> str:
    return "".join(c if c.isalnum() or c in "-_." else "_" for c in line_id)


@torch.no_grad()
def reconstruction_panel(model, line: LineImage) -> np.ndarray:
    """Original on top, reconstruction below, separated by a grey band."""
    model.eval()
    px, _ = pad_batch([line])
    rec, _, _ = model(torch.from_numpy(px))
    rec = rec[0, :, : line.width].numpy()
    band = np.full((SEPARATOR, line.width), SEPARATOR_VALUE, dtype=np.float32)
    return np.concatenate([line.pixels, band, rec], axis=0)


def dump_reconstructions(model, lines: Sequence[LineImage], out_dir) -> list[Path]:
    """One PNG per line, named ``recon_<index>_<id>.png``."""
    out = Path(out_dir)
    paths = []
    for i, line in enumerate(lines):
        panel = reconstruction_panel(model, line)
        paths.append(_to_png(panel, out / f"recon_{i:04d}_{_safe_name(line.id)}.png"))
    return paths


@dataclass(frozen=True)
class Region:
    """A run of frames in one source line plus its context window."""

    line: int
    line_id: str
    frame: int
    span: int
    x0: int
    x1: int
    context: tuple[int, int]

    @classmethod
    def around(cls, line: int, line_id: str, frame: int, span: int, width: int,
               margin: int = CONTEXT_MARGIN) -> "Region":
        x0, x1 = frame * SUBSAMPLE, (frame + span) * SUBSAMPLE
        return cls(line, line_id, frame, span, x0, x1, (max(0, x0 - margin), min(width, x1 + margin)))

    def crop(self, pixels: np.ndarray) -> np.ndarray:
        c0, c1 = self.context
        return pixels[:, c0:c1]


@dataclass
class Match:
    region: Region
    similarity: float


@dataclass
class RetrievalPanel:
    query: Region
    matches: list[Match] = field(default_factory=list)

    def save(self, path, source_a: np.ndarray, source_b: np.ndarray) -> Path:
        """Query crop, then matches left to right. Sources are padded batches."""
        crops = [self.query.crop(source_a[self.query.line])]
        crops += [m.region.crop(source_b[m.region.line]) for m in self.matches]
        return _to_png(_hstack(crops), Path(path))


def _hstack(crops: Sequence[np.ndarray]) -> np.ndarray:
    band = np.full((LINE_HEIGHT, SEPARATOR), SEPARATOR_VALUE, dtype=np.float32)
    parts = []
    for i, c in enumerate(crops):
        if i:
            parts.append(band)
        parts.append(c)
    return np.concatenate(parts, axis=1)


Encoder = Callable[[torch.Tensor], torch.Tensor]


@torch.no_grad()
def _outputs(model: Union[torch.nn.Module, Encoder], lines: Sequence[LineImage]):
    px, frames = pad_batch(lines)
    if isinstance(model, torch.nn.Module):
        was = model.training
        model.eval()
        try:
            out = model(torch.from_numpy(px), torch.from_numpy(frames))
        finally:
            model.train(was)
    else:
        out = model(torch.from_numpy(px))
    return px, frames, out


def nearest_neighbor_patches(model, batch_a: Sequence[LineImage], batch_b: Sequence[LineImage],
                             n: int = DEFAULT_NEIGHBORS, seed: int = 0,
                             query_frames: Optional[Sequence[int]] = None,
                             margin: int = CONTEXT_MARGIN) -> list[RetrievalPanel]:
    """For one output of every line in ``batch_a``, the ``n`` most cosine-similar
    outputs anywhere in ``batch_b``.

    ``model`` is a :class:`SequenceModel` (head outputs are compared) or any
    callable mapping a (B, 40, W) tensor to (B, L, D) outputs. Query frames
    are drawn at random unless given.
    """
    px_b, frames_b, out_b = _outputs(model, batch_b)
    total = int(frames_b.sum())
    if n > total:
        raise ValueError(f"asked for {n} neighbours but batch_b has only {total} frames")
    px_a, frames_a, out_a = _outputs(model, batch_a)

    keys, where = [], []
    for j, f in enumerate(frames_b):
        keys.append(out_b[j, : int(f)])
        where += [(j, t) for t in range(int(f))]
    keys = F.normalize(torch.cat(keys).double(), dim=-1)

    rng = np.random.default_rng(seed)
    panels = []
    for i, line in enumerate(batch_a):
        f = int(frames_a[i])
        t = int(query_frames[i]) if query_frames is not None else int(rng.integers(0, f))
        if not 0 <= t < f:
            raise ValueError(f"query frame {t} outside line {line.id!r} ({f} frames)")
        q = F.normalize(out_a[i, t].double(), dim=-1)
        sims = (keys @ q).numpy()
        # stable sort keeps earlier frames first among ties
        order = np.argsort(-sims, kind="stable")[:n]
        query = Region.around(i, line.id, t, 1, px_a.shape[2], margin)
        matches = [Match(Region.around(where[k][0], batch_b[where[k][0]].id, where[k][1], 1,
                                       px_b.shape[2], margin), float(sims[k])) for k in order]
        panels.append(RetrievalPanel(query, matches))
    return panels


def save_retrieval_panels(panels: Sequence[RetrievalPanel], batch_a, batch_b, out_dir) -> list[Path]:
    px_a, _ = pad_batch(batch_a)
    px_b, _ = pad_batch(batch_b)
    out = Path(out_dir)
    return [p.save(out / f"neighbors_{k:04d}_{_safe_name(p.query.line_id)}.png", px_a, px_b)
            for k, p in enumerate(panels)]


@dataclass(frozen=True)
class TrigramHit:
    line_id: str
    position: int
    region: Region


def _labels_for(manifest, line_id):
    try:
        return np.asarray(manifest[line_id])
    except KeyError:
        raise KeyError(f"no labels for line {line_id!r}") from None


def trigram_scan(label_manifest, corpus: Corpus, trigram: Sequence[int]) -> list[tuple[str, int]]:
    """Brute force: every (line id, position) whose three labels equal ``trigram``."""
    trigram = tuple(int(t) for t in trigram)
    hits = []
    for e in corpus:
        lab = _labels_for(label_manifest, e.id)
        for p in range(len(lab) - 2):
            if (int(lab[p]), int(lab[p + 1]), int(lab[p + 2])) == trigram:
                hits.append((e.id, p))
    return hits


class TrigramIndex:
    """Inverted index from label trigrams to positions, in corpus order."""

    def __init__(self, label_manifest, corpus: Corpus):
        self.manifest = label_manifest
        self.corpus = corpus
        self.table = defaultdict(list)
        self.rows = {e.id: i for i, e in enumerate(corpus)}
        for e in corpus:
            lab = _labels_for(label_manifest, e.id)
            if len(lab) < 3:
                continue
            grams = np.lib.stride_tricks.sliding_window_view(lab, 3)
            for p, g in enumerate(map(tuple, grams.tolist())):
                self.table[g].append((e.id, p))

    def trigram_at(self, line_id: str, position: int) -> tuple[int, int, int]:
        lab = _labels_for(self.manifest, line_id)
        if not 0 <= position <= len(lab) - 3:
            raise IndexError(f"no full trigram at position {position} of {line_id!r} ({len(lab)} labels)")
        return tuple(int(x) for x in lab[position:position + 3])

    def lookup(self, trigram: Sequence[int]) -> list[tuple[str, int]]:
        return list(self.table.get(tuple(int(t) for t in trigram), ()))

    def matches(self, query_line: str, query_position: int, max_hits: Optional[int] = None,
                margin: int = CONTEXT_MARGIN) -> list[TrigramHit]:
        hits = self.lookup(self.trigram_at(query_line, query_position))
        if max_hits is not None:
            hits = hits[:max_hits]
        out = []
        for line_id, p in hits:
            width = self.corpus[line_id].image.width
            out.append(TrigramHit(line_id, p, Region.around(self.rows[line_id], line_id, p, 3, width, margin)))
        return out


def trigram_matches(label_manifest, corpus: Corpus, query_line: str, query_position: int,
                    max_hits: Optional[int] = None, margin: int = CONTEXT_MARGIN) -> list[TrigramHit]:
    """Image regions (3 frames plus context) sharing the query's label trigram."""
    return TrigramIndex(label_manifest, corpus).matches(query_line, query_position, max_hits, margin)


def save_trigram_panel(hits: Sequence[TrigramHit], corpus: Corpus, path) -> Path:
    if not hits:
        raise ValueError("no hits to draw")
    crops = []
    for h in hits:
        px = corpus[h.line_id].image.pixels
        crops.append(_pad_height(h.region.crop(px)))
    return _to_png(_hstack(crops), Path(path))


def _pad_height(px):
    return px if px.shape[0] == LINE_HEIGHT else np.pad(px, ((0, LINE_HEIGHT - px.shape[0]), (0, 0)),
                                                        constant_values=1.0)
