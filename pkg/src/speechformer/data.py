"""Utterances, vocabularies, feature files, manifests and the synthetic task.

Feature files (FBK1): an ASCII header ``FBK1 <T> <d>\\n`` followed by ``T*d``
little-endian float64 values, row-major.

Manifests are UTF-8 TSV with one utterance per line::

    id <TAB> feature_path <TAB> transcript <TAB> target

Transcript and target are whitespace-tokenized against fixed vocabularies.
Feature paths are resolved relative to the manifest's directory.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

logger = logging.getLogger(__name__)

MAX_FRAMES = 3000  # 30 s at a 10 ms hop

SRC_RESERVED = ("<blank>", "<unk>")
TGT_RESERVED = ("<pad>", "<s>", "</s>", "<unk>")
PAD, BOS, EOS, TGT_UNK = 0, 1, 2, 3
SRC_UNK = 1


class FormatError(ValueError):
    pass


@dataclass
class Utterance:
    id: str
    features: np.ndarray  # [T, d_feat] float64
    transcript_ids: list[int]
    target_ids: list[int]
    feature_path: str | None = None

    @property
    def duration_frames(self) -> int:
        return int(self.features.shape[0])


@dataclass
class Vocab:
    tokens: list[str]
    reserved: tuple[str, ...]
    unk_id: int
    _index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        if tuple(self.tokens[: len(self.reserved)]) != self.reserved:
            raise FormatError(f"vocab must start with reserved tokens {self.reserved}")
        self._index = {}
        for i, tok in enumerate(self.tokens):
            if tok in self._index:
                raise FormatError(f"duplicate token {tok!r} at line {i + 1}")
            self._index[tok] = i

    @classmethod
    def source(cls, words: Iterable[str]) -> "Vocab":
        return cls(list(SRC_RESERVED) + list(words), SRC_RESERVED, SRC_UNK)

    @classmethod
    def target(cls, words: Iterable[str]) -> "Vocab":
        return cls(list(TGT_RESERVED) + list(words), TGT_RESERVED, TGT_UNK)

    @classmethod
    def load(cls, path: str | os.PathLike, kind: str) -> "Vocab":
        tokens = Path(path).read_text(encoding="utf-8").splitlines()
        reserved, unk = (SRC_RESERVED, SRC_UNK) if kind == "source" else (TGT_RESERVED, TGT_UNK)
        return cls(tokens, reserved, unk)

    def save(self, path: str | os.PathLike) -> None:
        Path(path).write_text("".join(t + "\n" for t in self.tokens), encoding="utf-8")

    def __len__(self) -> int:
        return len(self.tokens)

    def encode(self, text: str) -> list[int]:
        return [self._index.get(tok, self.unk_id) for tok in text.split()]

    def decode(self, ids: Sequence[int]) -> str:
        return " ".join(self.tokens[i] for i in ids)


# ---------------------------------------------------------------------------
# feature files


def save_features(path: str | os.PathLike, features: np.ndarray) -> None:
    arr = np.ascontiguousarray(features, dtype="<f8")
    if arr.ndim != 2:
        raise FormatError(f"features must be 2-D, got shape {arr.shape}")
    with open(path, "wb") as fh:
        fh.write(f"FBK1 {arr.shape[0]} {arr.shape[1]}\n".encode("ascii"))
        fh.write(arr.tobytes())


def load_features(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        header = fh.readline()
        payload = fh.read()
    parts = header.decode("ascii", errors="replace").split()
    if len(parts) != 3 or parts[0] != "FBK1":
        raise FormatError(f"{path}: bad FBK1 header {header[:40]!r}")
    try:
        T, d = int(parts[1]), int(parts[2])
    except ValueError:
        raise FormatError(f"{path}: non-integer extents in header {header!r}") from None
    if T < 1 or d < 1:
        raise FormatError(f"{path}: extents must be positive, got T={T} d={d}")
    if len(payload) != T * d * 8:
        raise FormatError(f"{path}: expected {T * d * 8} payload bytes, found {len(payload)}")
    return np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(T, d)


# ---------------------------------------------------------------------------
# manifests


@dataclass
class Manifest:
    utterances: list[Utterance]
    filtered: int = 0

    def __iter__(self) -> Iterator[Utterance]:
        return iter(self.utterances)

    def __len__(self) -> int:
        return len(self.utterances)

    def __getitem__(self, i):
        return self.utterances[i]


def load_manifest(
    path: str | os.PathLike,
    src_vocab: Vocab,
    tgt_vocab: Vocab,
    max_frames: int = MAX_FRAMES,
) -> Manifest:
    """Read a TSV manifest, load features and drop utterances over ``max_frames``."""
    path = Path(path)
    root = path.parent
    utts: list[Utterance] = []
    filtered = 0
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            cols = line.split("\t")
            if len(cols) != 4:
                raise FormatError(f"{path}:{lineno}: expected 4 tab-separated columns, got {len(cols)}")
            uid, feat_path, transcript, target = cols
            full = Path(feat_path) if os.path.isabs(feat_path) else root / feat_path
            if not full.exists():
                raise FileNotFoundError(f"utterance {uid!r}: feature file {full} not found")
            feats = load_features(full)
            if feats.shape[0] > max_frames:
                filtered += 1
                continue
            utts.append(Utterance(uid, feats, src_vocab.encode(transcript), tgt_vocab.encode(target), feat_path))
    if filtered:
        logger.info("filtered %d utterances longer than %d frames from %s", filtered, max_frames, path)
    return Manifest(utts, filtered)


def write_manifest(
    utterances: Iterable[Utterance],
    path: str | os.PathLike,
    src_vocab: Vocab,
    tgt_vocab: Vocab,
    feature_dir: str = "feats",
) -> None:
    """Write features and the TSV; utterances without a feature path get one under ``feature_dir``."""
    path = Path(path)
    root = path.parent
    lines = []
    for utt in utterances:
        rel = utt.feature_path or os.path.join(feature_dir, f"{utt.id}.fbk")
        full = Path(rel) if os.path.isabs(rel) else root / rel
        full.parent.mkdir(parents=True, exist_ok=True)
        save_features(full, utt.features)
        lines.append("\t".join([utt.id, rel, src_vocab.decode(utt.transcript_ids), tgt_vocab.decode(utt.target_ids)]))
    path.write_text("".join(ln + "\n" for ln in lines), encoding="utf-8")


# ---------------------------------------------------------------------------
# synthetic pseudo-speech


def synth_vocabs(vocab_size: int) -> tuple[Vocab, Vocab]:
    words = [f"w{i}" for i in range(vocab_size)]
    return Vocab.source(words), Vocab.target(words)


def token_table(vocab_size: int, d_feat: int, table_seed: int = 0) -> np.ndarray:
    return np.random.default_rng(table_seed).standard_normal((vocab_size, d_feat))


def synth_task(
    n: int,
    vocab_size: int = 20,
    len_range: tuple[int, int] = (3, 10),
    redundancy: int = 8,
    jitter: float = 0.25,
    seed: int = 0,
    d_feat: int = 16,
    noise: float = 0.1,
    table_seed: int = 0,
    adjacent_repeats: bool = False,
) -> list[Utterance]:
    """Copy task with speech-like inputs.

    Each token's feature row (drawn once from ``table_seed``) is repeated
    about ``redundancy`` times; ``jitter`` is the relative spread of the
    repeat count. Transcript and target are the same token sequence, in
    source ids (offset 2) and target ids (offset 4) respectively.

    By default no token directly follows itself: identical neighbours would
    fuse into one homogeneous run whose token count is only recoverable by
    counting frames, which the jitter makes ambiguous.
    """
    if redundancy < 1:
        raise ValueError(f"redundancy must be >= 1, got {redundancy}")
    lo, hi = len_range
    table = token_table(vocab_size, d_feat, table_seed)
    rng = np.random.default_rng(seed)
    # at least 3 frames per token keeps every utterance CTC-alignable
    min_rep = min(3, redundancy)
    out = []
    for i in range(n):
        L = int(rng.integers(lo, hi + 1))
        if adjacent_repeats or vocab_size == 1:
            tokens = rng.integers(0, vocab_size, size=L)
        else:
            # each step shifts by 1..V-1 so the next token always differs
            steps = rng.integers(1, vocab_size, size=L)
            steps[0] = rng.integers(0, vocab_size)
            tokens = np.cumsum(steps) % vocab_size
        spread = rng.uniform(-jitter, jitter, size=L) * redundancy if jitter > 0 else np.zeros(L)
        reps = np.maximum(min_rep, np.rint(redundancy + spread).astype(int))
        frames = np.repeat(table[tokens], reps, axis=0)
        if noise > 0:
            frames = frames + noise * rng.standard_normal(frames.shape)
        out.append(
            Utterance(
                id=f"synth{seed}-{i:05d}",
                features=frames,
                transcript_ids=[int(t) + len(SRC_RESERVED) for t in tokens],
                target_ids=[int(t) + len(TGT_RESERVED) for t in tokens],
            )
        )
    return out
