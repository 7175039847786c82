"""CTC loss, greedy frame labelling and CTC compression.

The blank symbol is id 0. ``ctc_loss`` is a single differentiable operation
whose backward pass is the forward-backward (alpha-beta) recursion in log
space. ``ctc_compress`` averages runs of consecutive frames that received the
same greedy label; blank runs are kept as single averaged vectors.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import numerics as nx
from .numerics import Tensor

BLANK = 0


@dataclass
class CTCResult:
    log_probs: Tensor
    frame_labels: list[int]
    loss: Tensor


@dataclass
class CompressedSequence:
    vectors: Tensor
    labels: list[int]
    run_lengths: list[int]


def _extend(target: Sequence[int]) -> np.ndarray:
    ext = np.zeros(2 * len(target) + 1, dtype=np.int64)
    ext[1::2] = target
    return ext


def _skip_allowed(ext: np.ndarray) -> np.ndarray:
    """``s`` may be entered from ``s-2``: non-blank and differs from the label two back."""
    allow = np.zeros(len(ext), dtype=bool)
    allow[2:] = (ext[2:] != BLANK) & (ext[2:] != ext[:-2])
    return allow


def min_frames(target: Sequence[int]) -> int:
    """Fewest frames that can emit ``target``: one per label plus a blank per repeat."""
    repeats = sum(1 for a, b in zip(target, target[1:]) if a == b)
    return len(target) + repeats


def _alpha_beta(lp: np.ndarray, target: Sequence[int]):
    T = lp.shape[0]
    ext = _extend(target)
    S = len(ext)
    skip = _skip_allowed(ext)
    emit = lp[:, ext]  # [T, S]
    neg = -np.inf
    alpha = np.full((T, S), neg)
    alpha[0, 0] = emit[0, 0]
    if S > 1:
        alpha[0, 1] = emit[0, 1]
    for t in range(1, T):
        prev = alpha[t - 1]
        a1 = np.concatenate(([neg], prev))[:S]
        a2 = np.where(skip, np.concatenate(([neg, neg], prev))[:S], neg)
        alpha[t] = np.logaddexp(np.logaddexp(prev, a1), a2) + emit[t]
    beta = np.full((T, S), neg)
    beta[T - 1, S - 1] = emit[T - 1, S - 1]
    if S > 1:
        beta[T - 1, S - 2] = emit[T - 1, S - 2]
    skip_next = np.concatenate((skip, [False, False]))[2:]
    for t in range(T - 2, -1, -1):
        nxt = beta[t + 1]
        b1 = np.concatenate((nxt, [neg]))[1:]
        b2 = np.where(skip_next, np.concatenate((nxt, [neg, neg]))[2:], neg)
        beta[t] = np.logaddexp(np.logaddexp(nxt, b1), b2) + emit[t]
    log_p = np.logaddexp(alpha[T - 1, S - 1], alpha[T - 1, S - 2]) if S > 1 else alpha[T - 1, 0]
    return ext, alpha, beta, emit, log_p


def ctc_neg_log_likelihood(log_probs: np.ndarray, target: Sequence[int]) -> tuple[float, np.ndarray]:
    """Loss and its gradient w.r.t. ``log_probs`` (treated as free inputs)."""
    lp = np.asarray(log_probs, dtype=np.float64)
    T, V = lp.shape
    target = [int(t) for t in target]
    if any(t < 1 or t >= V for t in target):
        raise ValueError(f"target ids must lie in [1, {V}), got {target}")
    if T < min_frames(target):
        return float("inf"), np.zeros_like(lp)
    ext, alpha, beta, emit, log_p = _alpha_beta(lp, target)
    # alpha + beta counts the emission at t twice
    occ = alpha + beta - emit - log_p
    grad = np.zeros_like(lp)
    for s, label in enumerate(ext):
        grad[:, label] -= np.exp(occ[:, s])
    return float(-log_p), grad


def ctc_neg_log_likelihood_batch(
    log_probs: np.ndarray, lengths: Sequence[int], targets: Sequence[Sequence[int]]
) -> tuple[np.ndarray, np.ndarray]:
    """Batched :func:`ctc_neg_log_likelihood` over padded ``[B, T, V]`` log-probs.

    Runs one alpha and one beta sweep for the whole batch. Returns the
    ``[B]`` losses (``inf`` where unalignable) and the ``[B, T, V]`` gradient.
    """
    lp = np.asarray(log_probs, dtype=np.float64)
    B, T, V = lp.shape
    lengths = np.asarray(lengths, dtype=np.int64)
    L_max = max((len(t) for t in targets), default=0)
    S = 2 * L_max + 1
    ext = np.zeros((B, S), dtype=np.int64)
    n_states = np.zeros(B, dtype=np.int64)
    alignable = np.zeros(B, dtype=bool)
    for b, tgt in enumerate(targets):
        if any(t < 1 or t >= V for t in tgt):
            raise ValueError(f"target ids must lie in [1, {V}), got {list(tgt)}")
        ext[b, 1 : 2 * len(tgt) : 2] = tgt
        n_states[b] = 2 * len(tgt) + 1
        alignable[b] = lengths[b] >= min_frames(tgt)
    state_ok = np.arange(S)[None, :] < n_states[:, None]
    skip = np.zeros((B, S), dtype=bool)
    skip[:, 2:] = (ext[:, 2:] != BLANK) & (ext[:, 2:] != ext[:, :-2]) & state_ok[:, 2:]
    neg = -np.inf
    emit = np.take_along_axis(lp, np.broadcast_to(ext[:, None, :], (B, T, S)), axis=2)
    emit = np.where(state_ok[:, None, :], emit, neg)
    pad1 = np.full((B, 1), neg)
    pad2 = np.full((B, 2), neg)

    alpha = np.full((B, T, S), neg)
    alpha[:, 0, :2] = emit[:, 0, :2]
    for t in range(1, T):
        prev = alpha[:, t - 1]
        a1 = np.concatenate((pad1, prev[:, :-1]), axis=1)
        a2 = np.where(skip, np.concatenate((pad2, prev[:, :-2]), axis=1), neg)
        alpha[:, t] = np.logaddexp(np.logaddexp(prev, a1), a2) + emit[:, t]

    rows = np.arange(B)
    last_t = np.maximum(lengths - 1, 0)
    end = alpha[rows, last_t]
    log_p = np.logaddexp(end[rows, n_states - 1], np.where(n_states > 1, end[rows, np.maximum(n_states - 2, 0)], neg))

    skip_next = np.concatenate((skip[:, 2:], np.zeros((B, 2), dtype=bool)), axis=1)
    final = np.zeros((B, S), dtype=bool)
    final[rows, n_states - 1] = True
    final[rows[n_states > 1], n_states[n_states > 1] - 2] = True
    beta = np.full((B, T, S), neg)
    for t in range(T - 1, -1, -1):
        init = np.where(final, emit[:, t], neg)
        if t + 1 < T:
            nxt = beta[:, t + 1]
            b1 = np.concatenate((nxt[:, 1:], pad1), axis=1)
            b2 = np.where(skip_next, np.concatenate((nxt[:, 2:], pad2), axis=1), neg)
            rec = np.logaddexp(np.logaddexp(nxt, b1), b2) + emit[:, t]
        else:
            rec = np.full((B, S), neg)
        here = (t == lengths - 1)[:, None]
        before = (t < lengths - 1)[:, None]
        beta[:, t] = np.where(here, init, np.where(before, rec, neg))

    safe_emit = np.where(np.isfinite(emit), emit, 0.0)
    safe_logp = np.where(alignable, log_p, 0.0)
    with np.errstate(invalid="ignore"):
        occ = np.exp(alpha + beta - safe_emit - safe_logp[:, None, None])
    occ = np.where(np.isfinite(occ) & alignable[:, None, None], occ, 0.0)
    grad = np.zeros_like(lp)
    t_idx = np.arange(T)[None, :]
    for s_i in range(S):
        grad[rows[:, None], t_idx, ext[:, s_i][:, None]] -= occ[:, :, s_i]
    losses = np.where(alignable, -log_p, np.inf)
    return losses, grad


def ctc_loss_batch(log_probs: Tensor, lengths: Sequence[int], targets: Sequence[Sequence[int]]) -> tuple[Tensor, np.ndarray]:
    """``[B]`` CTC losses for a padded batch plus a mask of alignable utterances."""
    losses, grad = ctc_neg_log_likelihood_batch(log_probs.data, lengths, targets)

    def bw(g):
        return (grad * np.where(np.isfinite(losses), g, 0.0)[:, None, None],)

    return nx._make(losses, (log_probs,), bw, "ctc_loss_batch"), np.isfinite(losses)


def ctc_loss(log_probs: Tensor, target: Sequence[int]) -> Tensor:
    """Negative log probability of ``target`` summed over all CTC alignments.

    Returns ``+inf`` (with zero gradient) when there are too few frames.
    """
    loss, grad = ctc_neg_log_likelihood(log_probs.data, target)
    return nx._make(np.array(loss), (log_probs,), lambda g: (g * grad,), "ctc_loss")


def collapse(labels: Sequence[int]) -> list[int]:
    """CTC collapse rule: merge repeats, then drop blanks."""
    out = []
    prev = None
    for lab in labels:
        if lab != prev and lab != BLANK:
            out.append(int(lab))
        prev = lab
    return out


def ctc_brute_force(probs: np.ndarray | Tensor, target: Sequence[int], max_paths: int = 6**8) -> float:
    """Probability of ``target`` by enumerating every frame labelling.

    Independent of the recursion in :func:`ctc_loss`: all ``V**T`` label
    sequences are generated, collapsed, and compared with ``target``.
    """
    p = probs.data if isinstance(probs, Tensor) else np.asarray(probs, dtype=np.float64)
    T, V = p.shape
    if V**T > max_paths:
        raise ValueError(f"V**T = {V}**{T} is too many paths to enumerate")
    L = len(target)
    if L > T:
        return 0.0
    paths = np.indices((V,) * T, dtype=np.int8).reshape(T, -1).T  # [V**T, T]
    path_prob = np.prod(p[np.arange(T)[None, :], paths], axis=1)
    prev = np.concatenate((np.full((paths.shape[0], 1), -1, dtype=np.int8), paths[:, :-1]), axis=1)
    keep = (paths != BLANK) & (paths != prev)
    n_kept = keep.sum(axis=1)
    rank = np.cumsum(keep, axis=1) - 1
    # sentinel -1 at index L never matches a label
    tgt = np.asarray(list(target) + [-1], dtype=np.int64)
    expected = tgt[np.clip(rank, 0, L)]
    ok = (n_kept == L) & np.all(~keep | (paths == expected), axis=1)
    return float(path_prob[ok].sum())


def greedy_frame_labels(log_probs: Tensor | np.ndarray) -> list[int]:
    """Per-frame argmax; ties go to the lower id."""
    lp = log_probs.data if isinstance(log_probs, Tensor) else np.asarray(log_probs)
    return [int(i) for i in np.argmax(lp, axis=-1)]


def runs(labels: Sequence[int]) -> tuple[list[int], list[int]]:
    """Run-length segmentation: (label of each run, length of each run)."""
    labs: list[int] = []
    lens: list[int] = []
    for lab in labels:
        if labs and labs[-1] == lab:
            lens[-1] += 1
        else:
            labs.append(int(lab))
            lens.append(1)
    return labs, lens


def averaging_matrix(run_lengths: Sequence[int], n_frames: int, n_rows: int | None = None) -> np.ndarray:
    """``[n_rows, n_frames]`` matrix whose row ``i`` averages run ``i``."""
    n_rows = len(run_lengths) if n_rows is None else n_rows
    m = np.zeros((n_rows, n_frames))
    start = 0
    for i, n in enumerate(run_lengths):
        m[i, start : start + n] = 1.0 / n
        start += n
    return m


def ctc_compress(hidden: Tensor, frame_labels: Sequence[int]) -> CompressedSequence:
    """Average consecutive ``[T, d]`` rows that share a frame label."""
    T = hidden.shape[0]
    if len(frame_labels) != T:
        raise ValueError(f"{len(frame_labels)} labels for {T} frames")
    if T == 0:
        return CompressedSequence(nx.Tensor(np.zeros((0,) + hidden.shape[1:])), [], [])
    labels, lengths = runs(frame_labels)
    vectors = nx.matmul(nx.Tensor(averaging_matrix(lengths, T)), hidden)
    return CompressedSequence(vectors, labels, lengths)


def batch_compression(frame_labels: Sequence[Sequence[int]], padded_length: int) -> tuple[np.ndarray, list[int]]:
    """Stacked averaging matrices ``[B, Tc_max, T]`` and compressed lengths for a batch."""
    segs = [runs(lab)[1] for lab in frame_labels]
    lengths = [len(s) for s in segs]
    t_max = max(lengths)
    mats = np.stack([averaging_matrix(s, padded_length, t_max) for s in segs])
    return mats, lengths
