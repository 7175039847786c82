"""Corpus BLEU, the two significance tests, and the attention/inference benchmark."""

from __future__ import annotations

import math
import statistics
import time
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Hashable, Sequence

import numpy as np
from scipy import stats

from . import numerics as nx
from .attention import count_attention_elements
from .data import synth_task
from .model import ModelConfig, TrainState, build, decode, encode, frontend_lengths

MAX_ORDER = 4


@dataclass
class BleuScore:
    score: float
    precisions: list[float]
    brevity_penalty: float
    hyp_len: int
    ref_len: int
    matches: list[int] = field(default_factory=list)
    totals: list[int] = field(default_factory=list)


def _ngrams(tokens: Sequence[Hashable], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def sentence_stats(hyp: Sequence[Hashable], ref: Sequence[Hashable]) -> np.ndarray:
    """``[hyp_len, ref_len, match_1..4, total_1..4]`` clipped n-gram counts."""
    row = np.zeros(2 + 2 * MAX_ORDER, dtype=np.int64)
    row[0], row[1] = len(hyp), len(ref)
    for n in range(1, MAX_ORDER + 1):
        h, r = _ngrams(hyp, n), _ngrams(ref, n)
        row[1 + n] = sum(min(c, r[g]) for g, c in h.items())
        row[1 + MAX_ORDER + n] = max(len(hyp) - n + 1, 0)
    return row


def bleu_from_stats(totals: np.ndarray) -> BleuScore:
    hyp_len, ref_len = int(totals[0]), int(totals[1])
    matches = [int(x) for x in totals[2 : 2 + MAX_ORDER]]
    counts = [int(x) for x in totals[2 + MAX_ORDER :]]
    precisions = [m / c if c else 0.0 for m, c in zip(matches, counts)]
    if hyp_len == 0:
        bp = 0.0
    elif hyp_len < ref_len:
        bp = math.exp(1.0 - ref_len / hyp_len)
    else:
        bp = 1.0
    if min(precisions) <= 0.0:
        score = 0.0
    else:
        score = 100.0 * bp * math.exp(sum(math.log(p) for p in precisions) / MAX_ORDER)
    return BleuScore(score, precisions, bp, hyp_len, ref_len, matches, counts)


def bleu(hyps: Sequence[Sequence[Hashable]], refs: Sequence[Sequence[Hashable]]) -> BleuScore:
    """Unsmoothed corpus BLEU-4 over pre-tokenized sentences."""
    if len(hyps) != len(refs):
        raise ValueError(f"{len(hyps)} hypotheses for {len(refs)} references")
    if not hyps:
        raise ValueError("BLEU of an empty corpus is undefined")
    return bleu_from_stats(sum(sentence_stats(h, r) for h, r in zip(hyps, refs)))


@dataclass
class BootstrapResult:
    p_better: float
    significant: bool
    wins: int
    samples: int


def bootstrap_significance(
    hyp_a: Sequence[Sequence[Hashable]],
    hyp_b: Sequence[Sequence[Hashable]],
    refs: Sequence[Sequence[Hashable]],
    samples: int = 10000,
    sample_size: int = 1000,
    level: float = 0.95,
    seed: int = 0,
) -> BootstrapResult:
    """Paired bootstrap: fraction of resamples in which A's BLEU strictly beats B's.

    Sentences are drawn with replacement, ``sample_size`` per resample. A is
    significantly better when that fraction is at least ``level``.
    """
    if not (len(hyp_a) == len(hyp_b) == len(refs)):
        raise ValueError("hypothesis and reference corpora must be aligned")
    sa = np.stack([sentence_stats(h, r) for h, r in zip(hyp_a, refs)])
    sb = np.stack([sentence_stats(h, r) for h, r in zip(hyp_b, refs)])
    rng = np.random.default_rng(seed)
    wins = 0
    for _ in range(samples):
        idx = rng.integers(0, len(refs), size=sample_size)
        if bleu_from_stats(sa[idx].sum(axis=0)).score > bleu_from_stats(sb[idx].sum(axis=0)).score:
            wins += 1
    p = wins / samples
    return BootstrapResult(p, p >= level, wins, samples)


@dataclass
class TTestResult:
    t: float
    p_value: float
    df: float
    significant: bool


def t_test_runs(scores_a: Sequence[float], scores_b: Sequence[float], level: float = 0.95,
                variance_floor: float = 1e-12) -> TTestResult:
    """One-sided Welch test of mean(a) > mean(b) across training runs."""
    a = np.asarray(scores_a, dtype=np.float64)
    b = np.asarray(scores_b, dtype=np.float64)
    if len(a) < 2 or len(b) < 2:
        raise ValueError("need at least two scores per system")
    va = max(a.var(ddof=1), variance_floor)
    vb = max(b.var(ddof=1), variance_floor)
    diff = a.mean() - b.mean()
    se2 = va / len(a) + vb / len(b)
    t = diff / math.sqrt(se2)
    df = se2**2 / ((va / len(a)) ** 2 / (len(a) - 1) + (vb / len(b)) ** 2 / (len(b) - 1))
    p = float(stats.t.sf(t, df))
    return TTestResult(float(t), p, float(df), bool(p < 1.0 - level and diff > 0))


# ---------------------------------------------------------------------------
# benchmark


@dataclass
class BenchRow:
    arch: str
    T: int
    chi: int
    attention_elements: int
    score_elements: int
    encoder_length: int
    peak_floats: int
    wall_ms: float


@dataclass
class BenchReport:
    rows: list[BenchRow]

    def to_tsv(self) -> str:
        cols = list(BenchRow.__dataclass_fields__)
        lines = ["\t".join(cols)]
        for r in self.rows:
            lines.append("\t".join(f"{v:.3f}" if isinstance(v, float) else str(v) for v in asdict(r).values()))
        return "\n".join(lines) + "\n"

    def table(self) -> str:
        cols = list(BenchRow.__dataclass_fields__)
        cells = [cols] + [[f"{v:.1f}" if isinstance(v, float) else str(v) for v in asdict(r).values()] for r in self.rows]
        widths = [max(len(row[i]) for row in cells) for i in range(len(cols))]
        return "\n".join("  ".join(c.rjust(w) for c, w in zip(row, widths)) for row in cells) + "\n"

    def to_dicts(self) -> list[dict]:
        return [asdict(r) for r in self.rows]


def encoder_attention_elements(config: ModelConfig, T: int) -> int:
    """Closed-form per-head score elements of the encoder's full-rate self-attention.

    ConvAttention stacks are charged ``(T/chi)^2``; a baseline's vanilla
    layers see ``ceil(T/4)`` frames after its strided front-end.
    """
    if config.arch.startswith("baseline"):
        return count_attention_elements(frontend_lengths([T], config)[0], 1)
    return count_attention_elements(T, config.chi)


def _bench_input(T: int, config: ModelConfig, seed: int) -> np.ndarray:
    redundancy = 8
    n_tokens = max(1, T // redundancy)
    vocab = max(config.src_vocab - 2, 1)
    utt = synth_task(1, vocab_size=vocab, len_range=(n_tokens, n_tokens), redundancy=redundancy,
                     jitter=0.0, seed=seed, d_feat=config.d_feat)[0]
    x = utt.features
    if x.shape[0] < T:
        x = np.concatenate([x, x[: T - x.shape[0]]], axis=0)
    return x[:T]


def timed_translate(state: TrainState, features: np.ndarray, decode_len: int) -> tuple[int, int]:
    """Encode once and run ``decode_len`` greedy decoder steps (no early stop).

    Returns (encoder output length, largest encoder score matrix per head).
    """
    with nx.no_grad():
        enc = encode([features], state)
        prefix = np.array([[1]], dtype=np.int64)
        for _ in range(decode_len):
            logits = decode(enc, prefix, state).data[:, -1]
            prefix = np.concatenate([prefix, np.argmax(logits, axis=-1)[:, None]], axis=1)
    cfg = state.config
    T = features.shape[0]
    t_front = frontend_lengths([T], cfg)[0]
    if cfg.arch in ("speechformer", "plain_convattention"):
        largest = t_front * -(-t_front // cfg.chi)
    else:
        largest = t_front * t_front
    if cfg.arch == "speechformer" and cfg.e_t > 0:
        largest = max(largest, enc.states.shape[1] ** 2)
    return enc.states.shape[1], largest


def bench(
    configs: Sequence[ModelConfig],
    lengths: Sequence[int],
    states: dict[str, TrainState] | None = None,
    repeats: int = 5,
    decode_len: int = 10,
    seed: int = 0,
    time_it: bool = True,
) -> BenchReport:
    """Element counts, peak live floats and median wall time of ``translate`` per (arch, T)."""
    rows = []
    for cfg in configs:
        state = (states or {}).get(cfg.arch) or build(cfg, seed=seed)
        for T in lengths:
            x = _bench_input(T, cfg, seed)
            with nx.track_memory() as mem:
                enc_len, largest = timed_translate(state, x, decode_len)
            times = []
            if time_it:
                for _ in range(repeats):
                    t0 = time.perf_counter()
                    timed_translate(state, x, decode_len)
                    times.append((time.perf_counter() - t0) * 1e3)
            rows.append(BenchRow(
                arch=cfg.arch, T=T, chi=cfg.chi if cfg.arch in ("speechformer", "plain_convattention") else 1,
                attention_elements=encoder_attention_elements(cfg, T),
                score_elements=largest,
                encoder_length=enc_len,
                peak_floats=mem.peak,
                wall_ms=statistics.median(times) if times else float("nan"),
            ))
    return BenchReport(rows)
