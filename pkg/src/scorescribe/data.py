"""Corpus ingestion, vocabularies, batching and the synthetic glyph corpus.

The on-disk dataset layout is one directory per incipit::

    root/<id>/<id>.png          clean staff image
    root/<id>/*distorted*.png   optional distorted rendering (.png or .jpg)
    root/<id>/<id>.semantic     one line of whitespace-separated tokens
    root/<id>/<id>.agnostic     same, graphic-symbol encoding

Images are grayscale, rescaled to a fixed height preserving aspect ratio,
and normalized so ink is near 1 and background near 0.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .autodiff import Tensor
from .ctc import min_frames
from .model import count_frames

TARGET_HEIGHT = 128
ENCODINGS = ("semantic", "agnostic")
CONDITIONS = ("clean", "distorted")


class DataError(Exception):
    """Dataset content or layout problem."""


_SPLIT_TOKENS = re.compile(r"[ \t]+")


def parse_encoding(line: str, source: str = "<unknown>") -> list[str]:
    """Split one encoding line into tokens on runs of tabs/spaces."""
    tokens = [t for t in _SPLIT_TOKENS.split(line.strip("\r\n")) if t]
    if not tokens:
        raise DataError(f"empty encoding line in {source}")
    return tokens


class Vocabulary:
    """Bijection between token strings and contiguous class ids.

    Ids are assigned in lexicographic token order; the CTC blank takes the
    extra index ``len(tokens)`` and is never part of the token list.
    """

    def __init__(self, tokens):
        tokens = list(tokens)
        if not tokens:
            raise DataError("vocabulary must contain at least one token")
        if len(set(tokens)) != len(tokens):
            raise DataError("vocabulary tokens must be unique")
        if tokens != sorted(tokens):
            raise DataError("vocabulary tokens must be in lexicographic order")
        for t in tokens:
            if not t or _SPLIT_TOKENS.search(t):
                raise DataError(f"invalid vocabulary token {t!r}")
        self.tokens = tuple(tokens)
        self._index = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self):
        return len(self.tokens)

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    @property
    def blank_id(self) -> int:
        return len(self.tokens)

    @property
    def num_classes(self) -> int:
        return len(self.tokens) + 1

    def encode(self, tokens, source: str = "<unknown>") -> list[int]:
        ids = []
        for t in tokens:
            if t not in self._index:
                raise DataError(f"token {t!r} not in vocabulary (sample {source})")
            ids.append(self._index[t])
        return ids

    def decode(self, ids) -> list[str]:
        out = []
        for i in ids:
            if not 0 <= i < len(self.tokens):
                raise DataError(f"class id {i} outside vocabulary of size {len(self.tokens)}")
            out.append(self.tokens[i])
        return out

    def save(self, path):
        Path(path).write_text("".join(t + "\n" for t in self.tokens), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        text = Path(path).read_text(encoding="utf-8")
        if not text.endswith("\n"):
            raise DataError(f"vocabulary file {path} missing trailing newline")
        return cls(text.splitlines())

    @classmethod
    def from_text(cls, text: str) -> "Vocabulary":
        return cls([line for line in text.splitlines() if line])


def build_vocab(corpus) -> Vocabulary:
    """Sorted unique tokens over an iterable of token lists."""
    seen = set()
    for tokens in corpus:
        seen.update(tokens)
    if not seen:
        raise DataError("cannot build a vocabulary from an empty corpus")
    return Vocabulary(sorted(seen))


# ---------------------------------------------------------------------------
# corpus discovery


@dataclass
class Incipit:
    id: str
    clean_path: Path
    distorted_path: Path | None
    semantic: list[str]
    agnostic: list[str]

    def tokens(self, encoding: str) -> list[str]:
        if encoding not in ENCODINGS:
            raise DataError(f"unknown encoding {encoding!r}, expected one of {ENCODINGS}")
        return self.semantic if encoding == "semantic" else self.agnostic

    def image_path(self, condition: str) -> Path:
        if condition not in CONDITIONS:
            raise DataError(f"unknown condition {condition!r}, expected one of {CONDITIONS}")
        if condition == "clean":
            return self.clean_path
        if self.distorted_path is None:
            raise DataError(f"incipit {self.id}: no distorted image available")
        return self.distorted_path


def discover_corpus(root) -> tuple[list[Incipit], list[str]]:
    """Scan a dataset root; returns (incipits, warnings for skipped dirs)."""
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset root {root} is not a readable directory")
    incipits: list[Incipit] = []
    warnings: list[str] = []
    for entry in sorted(p for p in root.iterdir() if p.is_dir()):
        inc_id = entry.name
        clean = entry / f"{inc_id}.png"
        semantic = entry / f"{inc_id}.semantic"
        agnostic = entry / f"{inc_id}.agnostic"
        missing = [p.name for p in (clean, semantic, agnostic) if not p.is_file()]
        if missing:
            warnings.append(f"skipped {inc_id}: missing {', '.join(missing)}")
            continue
        distorted = None
        for cand in sorted(entry.glob("*distorted*")):
            if cand.suffix.lower() in (".png", ".jpg", ".jpeg"):
                distorted = cand
                break
        try:
            sem_tokens = parse_encoding(semantic.read_text(encoding="utf-8"), str(semantic))
            agn_tokens = parse_encoding(agnostic.read_text(encoding="utf-8"), str(agnostic))
        except DataError as exc:
            warnings.append(f"skipped {inc_id}: {exc}")
            continue
        incipits.append(
            Incipit(
                id=inc_id,
                clean_path=clean,
                distorted_path=distorted,
                semantic=sem_tokens,
                agnostic=agn_tokens,
            )
        )
    return incipits, warnings


# ---------------------------------------------------------------------------
# images


def _bilinear_resize(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resample at pixel centers. Written as a + w*(b - a) so that
    constant images are reproduced exactly."""
    in_h, in_w = arr.shape
    ys = (np.arange(out_h) + 0.5) * (in_h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (in_w / out_w) - 0.5
    y0 = np.clip(np.floor(ys), 0, in_h - 1).astype(np.int64)
    x0 = np.clip(np.floor(xs), 0, in_w - 1).astype(np.int64)
    y1 = np.minimum(y0 + 1, in_h - 1)
    x1 = np.minimum(x0 + 1, in_w - 1)
    wy = np.clip(ys - y0, 0.0, 1.0)[:, None]
    wx = np.clip(xs - x0, 0.0, 1.0)[None, :]
    top = arr[np.ix_(y0, x0)]
    top = top + wx * (arr[np.ix_(y0, x1)] - top)
    bottom = arr[np.ix_(y1, x0)]
    bottom = bottom + wx * (arr[np.ix_(y1, x1)] - bottom)
    return top + wy * (bottom - top)


def load_image(path, target_height: int = TARGET_HEIGHT) -> np.ndarray:
    """Image file to a normalized [1, target_height, W] float32 array.

    Color inputs collapse to luma (0.299/0.587/0.114); values map through
    (255 - gray) / 255 so ink is ~1 on a ~0 background.
    """
    try:
        with Image.open(path) as img:
            gray = img.convert("L")
            arr = np.asarray(gray, dtype=np.float64)
    except (OSError, UnidentifiedImageError, ValueError) as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc
    if arr.ndim != 2 or arr.size == 0:
        raise DataError(f"cannot read image {path}: empty or non-2d")
    h, w = arr.shape
    out_w = max(1, round(w * target_height / h))
    resized = _bilinear_resize(arr, target_height, out_w)
    norm = np.clip((255.0 - resized) / 255.0, 0.0, 1.0)
    return norm[None, :, :].astype(np.float32)


# ---------------------------------------------------------------------------
# samples and batches


@dataclass
class Sample:
    id: str
    image: np.ndarray  # [1, H, W] float32 in [0, 1]
    tokens: list[str]

    @property
    def width(self) -> int:
        return self.image.shape[2]


@dataclass
class Batch:
    images: Tensor  # [B, 1, H, W_max], zero-padded on the right
    widths: list[int]
    frame_counts: list[int]
    labels: list[list[int]]
    ids: list[str]

    def __len__(self):
        return len(self.ids)


def make_batch(samples, vocab: Vocabulary, max_batch: int = 16, frame_stride: int = 16) -> list[Batch]:
    """Group samples into padded batches of at most ``max_batch``.

    Widths are zero-padded (background) to the batch maximum. Any sample
    whose label cannot fit the CTC trellis of its frame count is rejected.
    """
    samples = list(samples)
    if not samples:
        raise DataError("make_batch: no samples")
    heights = {s.image.shape[1] for s in samples}
    if len(heights) != 1:
        raise DataError(f"make_batch: mixed image heights {sorted(heights)}")
    batches = []
    for lo in range(0, len(samples), max_batch):
        chunk = samples[lo : lo + max_batch]
        widths = [s.width for s in chunk]
        frame_counts = [count_frames(w, frame_stride) for w in widths]
        labels = []
        for s, frames in zip(chunk, frame_counts):
            ids = vocab.encode(s.tokens, s.id)
            need = min_frames(ids)
            if frames < need:
                raise DataError(
                    f"sample {s.id}: CTC infeasible, needs {need} frames but image provides {frames}"
                )
            labels.append(ids)
        w_max = max(widths)
        h = chunk[0].image.shape[1]
        stacked = np.zeros((len(chunk), 1, h, w_max), dtype=np.float32)
        for i, s in enumerate(chunk):
            stacked[i, :, :, : s.width] = s.image
        batches.append(
            Batch(
                images=Tensor(stacked),
                widths=widths,
                frame_counts=frame_counts,
                labels=labels,
                ids=[s.id for s in chunk],
            )
        )
    return batches


# ---------------------------------------------------------------------------
# synthetic corpus

GLYPH_WIDTH = 32
MAX_SYNTH_CLASSES = 32


def synth_token(cls: int) -> str:
    return f"sym{cls:02d}"


def synth_vocab(num_classes: int) -> Vocabulary:
    if not 1 <= num_classes <= MAX_SYNTH_CLASSES:
        raise DataError(f"synthetic classes must be in [1, {MAX_SYNTH_CLASSES}]")
    return Vocabulary([synth_token(c) for c in range(num_classes)])


def glyph_bitmap(cls: int, height: int = TARGET_HEIGHT) -> np.ndarray:
    """Deterministic [height, 32] ink pattern for one synthetic class.

    Classes combine one of 8 horizontal blob rows (aligned to the pooled
    row cells of a four-block extractor) with one of 4 vertical bar
    positions, giving 32 distinct shapes. Ink sits in the left half of the
    bitmap; the right half stays background, so background-only frames
    occur in every sample and map to the blank class.
    """
    if not 0 <= cls < MAX_SYNTH_CLASSES:
        raise DataError(f"glyph class {cls} outside [0, {MAX_SYNTH_CLASSES})")
    canvas = np.zeros((height, GLYPH_WIDTH), dtype=np.float32)
    cell = height // 8
    band = (cls % 8) * cell
    canvas[band + 2 : band + cell - 2, 2:14] = 1.0
    bar = 2 + 3 * (cls // 8)
    canvas[cell : height - cell, bar : bar + 2] = 1.0
    return canvas


def synth_generate(seed: int, count: int, num_classes: int, max_label_len: int) -> list[Sample]:
    """Seed-deterministic toy corpus: each sample concatenates 1..max glyphs."""
    if not 1 <= num_classes <= MAX_SYNTH_CLASSES:
        raise DataError(f"synthetic classes must be in [1, {MAX_SYNTH_CLASSES}]")
    if max_label_len < 1:
        raise DataError("max_label_len must be >= 1")
    rng = np.random.default_rng(seed)
    samples = []
    for i in range(count):
        length = int(rng.integers(1, max_label_len + 1))
        classes = [int(c) for c in rng.integers(0, num_classes, size=length)]
        image = np.concatenate([glyph_bitmap(c) for c in classes], axis=1)[None, :, :]
        samples.append(
            Sample(
                id=f"synth{i:04d}",
                image=image.astype(np.float32),
                tokens=[synth_token(c) for c in classes],
            )
        )
    return samples


# ---------------------------------------------------------------------------
# deterministic splits


@dataclass
class SplitSpec:
    train: list[str]
    validation: list[str]
    test: list[str]
    seed: int

    def sections(self):
        return (("train", self.train), ("validation", self.validation), ("test", self.test))


def split_ids(ids, seed: int, fractions=(0.8, 0.1, 0.1)) -> SplitSpec:
    """Partition ids by seeded hash order: deterministic, disjoint, covering."""
    ids = list(ids)
    if len(set(ids)) != len(ids):
        raise DataError("split: duplicate ids")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise DataError(f"split fractions must sum to 1, got {fractions}")
    ranked = sorted(ids, key=lambda i: hashlib.sha256(f"{seed}:{i}".encode()).hexdigest())
    n = len(ranked)
    n_train = int(fractions[0] * n)
    n_val = int(fractions[1] * n)
    return SplitSpec(
        train=ranked[:n_train],
        validation=ranked[n_train : n_train + n_val],
        test=ranked[n_train + n_val :],
        seed=seed,
    )


def save_split(spec: SplitSpec, path):
    lines = [f"seed\t{spec.seed}"]
    for name, ids in spec.sections():
        lines.append(f"[{name}]")
        lines.extend(ids)
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_split(path) -> SplitSpec:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or not lines[0].startswith("seed\t"):
        raise DataError(f"split file {path}: missing seed header")
    seed = int(lines[0].split("\t", 1)[1])
    sections: dict[str, list[str]] = {"train": [], "validation": [], "test": []}
    current = None
    for line in lines[1:]:
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1]
            if current not in sections:
                raise DataError(f"split file {path}: unknown section {current!r}")
        elif line:
            if current is None:
                raise DataError(f"split file {path}: id before any section")
            sections[current].append(line)
    return SplitSpec(seed=seed, **sections)
