"""Text-line corpora: synthetic rendering, manifest I/O, normalization, subsets.

Lines are single-channel float32 rasters in [0, 1] with white (1.0) background,
normalized to a height of 40 pixels.

Manifest format (UTF-8, LF line endings), one record per line::

    id<TAB>relative/image/path.png[<TAB>transcription]

Image paths are resolved relative to the manifest's directory.
"""

from __future__ import annotations

import logging
import os
import string
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from PIL import Image, ImageDraw, ImageFilter, ImageFont

logger = logging.getLogger(__name__)

LINE_HEIGHT = 40
SUBSAMPLE = 8
BACKGROUND = 1.0

SUPPORTED_CHARS = frozenset(string.ascii_letters + string.digits + string.punctuation + " ")

_FONT_DIR = Path("/usr/share/fonts/truetype/dejavu")


class ManifestError(ValueError):
    """Malformed or inconsistent manifest file."""


@dataclass(frozen=True)
class Charset:
    """Ordered character inventory with a reserved CTC blank.

    The blank is the last class. ``size`` pads the class count (e.g. to a
    fixed 512-way head); unused indices between the symbols and the blank
    never decode.
    """

    symbols: tuple[str, ...]
    size: Optional[int] = None

    def __post_init__(self):
        if len(set(self.symbols)) != len(self.symbols):
            raise ValueError("charset symbols must be unique")
        if any(len(s) != 1 for s in self.symbols):
            raise ValueError("charset symbols must be single characters")
        if self.size is not None and self.size < len(self.symbols) + 1:
            raise ValueError(f"charset size {self.size} cannot hold {len(self.symbols)} symbols + blank")
        object.__setattr__(self, "_index", {c: i for i, c in enumerate(self.symbols)})

    @classmethod
    def from_texts(cls, texts: Iterable[str], size: Optional[int] = None) -> "Charset":
        chars = set()
        for t in texts:
            chars.update(t)
        return cls(tuple(sorted(chars)), size=size)

    @property
    def num_classes(self) -> int:
        return self.size if self.size is not None else len(self.symbols) + 1

    @property
    def blank_index(self) -> int:
        return self.num_classes - 1

    def __len__(self):
        return len(self.symbols)

    def __contains__(self, char):
        return char in self._index

    def encode(self, text: str) -> list[int]:
        try:
            return [self._index[c] for c in text]
        except KeyError as exc:
            raise ValueError(f"character {exc.args[0]!r} not in charset") from None

    def decode(self, indices: Sequence[int]) -> str:
        out = []
        for i in indices:
            i = int(i)
            if i == self.blank_index:
                raise ValueError("blank index has no character")
            if not 0 <= i < len(self.symbols):
                raise ValueError(f"index {i} outside charset")
            out.append(self.symbols[i])
        return "".join(out)


@dataclass(frozen=True)
class Transcription:
    text: str
    indices: tuple[int, ...]

    @classmethod
    def from_text(cls, text: str, charset: Charset) -> "Transcription":
        return cls(text, tuple(charset.encode(text)))


@dataclass(frozen=True, eq=False)
class LineImage:
    id: str
    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float32)
        if px.ndim != 2:
            raise ValueError(f"line image {self.id!r} must be 2-D, got shape {px.shape}")
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def frames(self) -> int:
        return -(-self.width // SUBSAMPLE)


@dataclass(frozen=True)
class CorpusEntry:
    image: LineImage
    transcription: Optional[Transcription] = None

    @property
    def id(self) -> str:
        return self.image.id

    @property
    def text(self) -> Optional[str]:
        return None if self.transcription is None else self.transcription.text


@dataclass(frozen=True)
class Corpus:
    entries: tuple[CorpusEntry, ...]
    charset: Charset
    name: str = "corpus"
    _by_id: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(self.entries))
        by_id = {}
        for e in self.entries:
            if e.id in by_id:
                raise ValueError(f"duplicate id {e.id!r} in corpus {self.name!r}")
            by_id[e.id] = e
            if e.transcription is not None:
                missing = set(e.transcription.text) - set(self.charset.symbols)
                if missing:
                    raise ValueError(f"line {e.id!r} uses characters outside charset: {sorted(missing)}")
        object.__setattr__(self, "_by_id", by_id)

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def __getitem__(self, key):
        if isinstance(key, str):
            return self._by_id[key]
        return self.entries[key]

    @property
    def ids(self) -> list[str]:
        return [e.id for e in self.entries]

    @property
    def annotated(self) -> bool:
        return all(e.transcription is not None for e in self.entries)

    def with_charset(self, charset: Charset) -> "Corpus":
        entries = [
            CorpusEntry(e.image, None if e.text is None else Transcription.from_text(e.text, charset))
            for e in self.entries
        ]
        return Corpus(tuple(entries), charset, self.name)


def corpus_from_lines(lines, texts=None, name="corpus", charset=None) -> Corpus:
    """Build a corpus from line images and optional parallel transcriptions."""
    lines = list(lines)
    if texts is None:
        texts = [None] * len(lines)
    if charset is None:
        charset = Charset.from_texts(t for t in texts if t is not None)
    entries = [
        CorpusEntry(img, None if t is None else Transcription.from_text(t, charset))
        for img, t in zip(lines, texts)
    ]
    return Corpus(tuple(entries), charset, name)


# --------------------------------------------------------------------------
# normalization

def normalize_height(image, line_id: Optional[str] = None) -> LineImage:
    """Scale a line to height 40, preserving aspect ratio (width >= 8)."""
    if isinstance(image, LineImage):
        line_id = image.id if line_id is None else line_id
        px = image.pixels
    else:
        px = np.asarray(image)
        if px.dtype == np.uint8:
            px = px.astype(np.float32) / 255.0
    if px.ndim != 2 or px.size == 0:
        raise ValueError(f"zero-area or non 2-D image (shape {px.shape})")
    h, w = px.shape
    new_w = max(SUBSAMPLE, int(round(w * LINE_HEIGHT / h)))
    if h == LINE_HEIGHT and new_w == w:
        out = np.array(px, dtype=np.float32)
    else:
        pil = Image.fromarray(np.asarray(px, dtype=np.float32), mode="F")
        out = np.asarray(pil.resize((new_w, LINE_HEIGHT), Image.BILINEAR), dtype=np.float32)
    return LineImage(line_id or "line", np.clip(out, 0.0, 1.0))


# --------------------------------------------------------------------------
# synthetic rendering

@dataclass(frozen=True)
class RenderStyle:
    name: str
    font: str
    font_size: int
    noise: float
    blur: float = 0.0
    slant: float = 0.0
    jitter: float = 0.0
    rotate: float = 0.0
    spacing: tuple[float, float] = (0.0, 0.0)


STYLES = {
    "printed": RenderStyle("printed", "DejaVuSerif.ttf", 24, noise=0.02, blur=0.3),
    "cursive": RenderStyle(
        "cursive", "DejaVuSans.ttf", 24, noise=0.04, blur=0.5,
        slant=0.35, jitter=2.0, rotate=6.0, spacing=(-0.08, 0.12),
    ),
}

_MARGIN = 6


def _font(style: RenderStyle) -> ImageFont.FreeTypeFont:
    path = _FONT_DIR / style.font
    if not path.exists():
        raise FileNotFoundError(f"bundled font {style.font} not found under {_FONT_DIR}")
    return ImageFont.truetype(str(path), style.font_size)


def render_synthetic_line(text: str, style: str = "printed", seed: int = 0, line_id: Optional[str] = None) -> LineImage:
    """Render ``text`` as a 40-px-high line in one of the bundled styles.

    Glyphs are drawn one at a time so the cursive style can jitter, rotate and
    respace them; the advance of every glyph is positive, so width grows with
    text length. Output is a pure function of (text, style, seed).
    """
    if not text:
        raise ValueError("empty text")
    if style not in STYLES:
        raise ValueError(f"unknown style {style!r}; expected one of {sorted(STYLES)}")
    bad = sorted(set(text) - SUPPORTED_CHARS)
    if bad:
        raise ValueError(f"characters unsupported by style {style!r}: {bad}")
    st = STYLES[style]
    rng = np.random.default_rng(seed)
    font = _font(st)

    advances = []
    for ch in text:
        adv = font.getlength(ch)
        if st.spacing != (0.0, 0.0):
            adv *= 1.0 + rng.uniform(*st.spacing)
        advances.append(max(adv, 2.0))
    slant_pad = int(np.ceil(st.slant * LINE_HEIGHT))
    width = int(np.ceil(sum(advances))) + 2 * _MARGIN + slant_pad
    canvas = Image.new("L", (width, LINE_HEIGHT), 255)

    baseline_y = 8
    x = float(_MARGIN)
    for ch, adv in zip(text, advances):
        if ch != " ":
            dy = rng.uniform(-st.jitter, st.jitter) if st.jitter else 0.0
            angle = rng.uniform(-st.rotate, st.rotate) if st.rotate else 0.0
            glyph = Image.new("L", (st.font_size * 2, LINE_HEIGHT), 0)
            ImageDraw.Draw(glyph).text((st.font_size // 2, baseline_y), ch, fill=255, font=font)
            if angle:
                glyph = glyph.rotate(angle, resample=Image.BILINEAR)
            ink = Image.new("L", glyph.size, 0)
            canvas.paste(ink, (int(round(x)) - st.font_size // 2, int(round(dy))), glyph)
        x += adv

    if st.slant:
        # shear so the top leans right; pad on the right keeps ink in frame
        canvas = canvas.transform(
            canvas.size, Image.AFFINE,
            (1, st.slant, -st.slant * LINE_HEIGHT, 0, 1, 0),
            resample=Image.BILINEAR, fillcolor=255,
        )
    if st.blur:
        canvas = canvas.filter(ImageFilter.GaussianBlur(st.blur))
    px = np.asarray(canvas, dtype=np.float32) / 255.0
    if st.noise:
        px = px + rng.normal(0.0, st.noise, size=px.shape).astype(np.float32)
    return LineImage(line_id or "line", np.clip(px, 0.0, 1.0))


WORDS = (
    "the of and to in is was that for it with as he on be at by his had not are but from or have an they "
    "which one you were her all she there would their we him been has when who will more no if out so said "
    "what up its about into than them can only other new some could time these two may then do first any my "
    "now such like our over man me even most made after also did many before must through back years where "
    "much your way well down should because each just those people how too little state good very make world "
    "still own see men work long get here between both life being under never day same another know while "
    "last might us great old year off come since against go came right used take three states himself few "
    "house use during without again place around however home small found mrs thought went say part once "
    "general high upon school every does got united left number course war until always away something fact "
    "though water less public put think almost hand enough far took head yet government system better set "
    "told nothing night end why called didnt eyes find going look asked later knew point next city give group"
).split()


def random_text(rng: np.random.Generator, min_words: int = 2, max_words: int = 6, capitalize: float = 0.3) -> str:
    n = int(rng.integers(min_words, max_words + 1))
    words = [WORDS[int(i)] for i in rng.integers(0, len(WORDS), size=n)]
    if rng.random() < capitalize:
        words[0] = words[0].capitalize()
    text = " ".join(words)
    if rng.random() < 0.3:
        text += str(rng.choice(list(".,;:")))
    return text


def synth_corpus(n: int, style: str = "printed", seed: int = 0, name: Optional[str] = None,
                 min_words: int = 2, max_words: int = 6, annotated: bool = True,
                 charset: Optional[Charset] = None) -> Corpus:
    """Render ``n`` random lines of English-like text in a bundled style."""
    rng = np.random.default_rng(seed)
    name = name or f"synth-{style}-{seed}"
    lines, texts = [], []
    for i in range(n):
        text = random_text(rng, min_words, max_words)
        lines.append(render_synthetic_line(text, style, seed=int(rng.integers(2**31)), line_id=f"{name}-{i:06d}"))
        texts.append(text)
    if charset is None:
        charset = Charset.from_texts(texts)
    if not annotated:
        return corpus_from_lines(lines, None, name, charset)
    return corpus_from_lines(lines, texts, name, charset)


# --------------------------------------------------------------------------
# manifest I/O

def _read_png(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.float32) / 255.0


def load_manifest(path, name: Optional[str] = None, charset: Optional[Charset] = None) -> Corpus:
    """Load a tab-separated line manifest into a :class:`Corpus`."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"manifest {path} does not exist")
    root = path.parent
    records = []
    seen = set()
    with open(path, encoding="utf-8", newline="\n") as f:
        for lineno, raw in enumerate(f, start=1):
            raw = raw.rstrip("\n")
            if not raw:
                continue
            fields = raw.split("\t")
            if len(fields) not in (2, 3) or not fields[0] or not fields[1]:
                raise ManifestError(f"{path}:{lineno}: malformed record (expected id<TAB>path[<TAB>text])")
            line_id, rel = fields[0], fields[1]
            if line_id in seen:
                raise ManifestError(f"{path}:{lineno}: duplicate id {line_id!r}")
            seen.add(line_id)
            img_path = root / rel
            if not img_path.is_file():
                raise ManifestError(f"{path}:{lineno}: record {line_id!r} references missing image {rel}")
            text = fields[2] if len(fields) == 3 else None
            records.append((line_id, img_path, text))

    lines = [normalize_height(_read_png(p), line_id=i) for i, p, _ in records]
    texts = [t for _, _, t in records]
    if charset is None:
        charset = Charset.from_texts(t for t in texts if t is not None)
    return corpus_from_lines(lines, texts, name or (path.parent.name if path.stem == "manifest" else path.stem), charset)


def write_manifest(corpus: Corpus, directory, manifest_name: str = "manifest.tsv", image_dir: str = "images") -> Path:
    """Write PNG images plus a manifest; returns the manifest path."""
    directory = Path(directory)
    (directory / image_dir).mkdir(parents=True, exist_ok=True)
    rows = []
    for e in corpus:
        if any(c in e.id for c in "\t\n/") or e.id in (".", ".."):
            raise ManifestError(f"id {e.id!r} cannot be written to a manifest")
        rel = f"{image_dir}/{e.id}.png"
        px = np.round(np.clip(e.image.pixels, 0, 1) * 255).astype(np.uint8)
        Image.fromarray(px, mode="L").save(directory / rel)
        if e.text is None:
            rows.append(f"{e.id}\t{rel}")
        else:
            if "\t" in e.text or "\n" in e.text:
                raise ManifestError(f"transcription of {e.id!r} contains a tab or newline")
            rows.append(f"{e.id}\t{rel}\t{e.text}")
    out = directory / manifest_name
    with open(out, "w", encoding="utf-8", newline="\n") as f:
        f.write("".join(r + "\n" for r in rows))
    return out


def subset(corpus: Corpus, n: int, seed: int = 0, name: Optional[str] = None) -> Corpus:
    """Seeded sample of ``n`` entries without replacement.

    One permutation per seed, then a prefix, so smaller budgets nest inside
    larger ones for the same seed.
    """
    if n < 0 or n > len(corpus):
        raise ValueError(f"cannot take {n} lines from a corpus of {len(corpus)}")
    order = np.random.default_rng(seed).permutation(len(corpus))[:n]
    entries = tuple(corpus.entries[i] for i in order)
    return Corpus(entries, corpus.charset, name or f"{corpus.name}[{n}]")


def split(corpus: Corpus, sizes: Sequence[int], seed: int = 0) -> list[Corpus]:
    """Disjoint seeded partitions (e.g. train/val/test)."""
    if sum(sizes) > len(corpus):
        raise ValueError(f"split sizes {list(sizes)} exceed corpus size {len(corpus)}")
    order = np.random.default_rng(seed).permutation(len(corpus))
    out, start = [], 0
    for k, size in enumerate(sizes):
        idx = order[start:start + size]
        out.append(Corpus(tuple(corpus.entries[i] for i in idx), corpus.charset, f"{corpus.name}/{k}"))
        start += size
    return out


def pad_batch(lines: Sequence[LineImage], min_width: int = 0, multiple: int = SUBSAMPLE) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad lines with background to a common width (a multiple of 8).

    Returns the (B, 40, W) array and each line's frame count.
    """
    width = max([l.width for l in lines] + [min_width])
    width = -(-width // multiple) * multiple
    out = np.full((len(lines), LINE_HEIGHT, width), BACKGROUND, dtype=np.float32)
    for i, l in enumerate(lines):
        out[i, :, : l.width] = l.pixels
    frames = np.array([l.frames for l in lines], dtype=np.int64)
    return out, frames


def ensure_dir(path) -> Path:
    path = Path(path)
    os.makedirs(path, exist_ok=True)
    return path
