"""Training recipe: label-smoothed CE + auxiliary CTC, Adam, inverse-sqrt LR.

Batches are built by a frame budget; gradients from ``accum_steps``
micro-batches are summed before one Adam update. Both loss terms are
normalized by the token count of the whole update (not of each micro-batch),
so accumulating k micro-batches reproduces one batch k times larger.
"""

from __future__ import annotations

import logging
import math
import os
import time
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import numerics as nx
from .data import BOS, EOS, PAD, Utterance, synth_task
from .model import ModelConfig, TrainState, build, ctc_input_lengths, ctc_losses, decode, encode, save_checkpoint
from .ctc import min_frames
from .numerics import Tensor

logger = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr_peak: float = 1e-3
    warmup_updates: int = 10000
    tokens_per_batch: int = 5000
    accum_steps: int = 16
    label_smoothing: float = 0.1
    ctc_weight: float = 0.5
    adam_beta1: float = 0.9
    adam_beta2: float = 0.98
    adam_eps: float = 1e-8
    max_updates: int = 100000
    max_epochs: int = 1000
    max_sentences: int = 0  # 0 = no cap beyond the frame budget
    cmvn: int = 1
    spec_augment: int = 1
    specaug_freq_width: int = 4
    specaug_time_width: int = 10
    specaug_freq_masks: int = 1
    specaug_time_masks: int = 1
    seed: int = 1

    def __post_init__(self):
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ValueError(f"label_smoothing must be in [0, 1), got {self.label_smoothing}")
        if self.lr_peak <= 0 or self.warmup_updates < 1:
            raise ValueError("lr_peak must be > 0 and warmup_updates >= 1")
        if self.ctc_weight < 0:
            raise ValueError(f"ctc_weight must be >= 0, got {self.ctc_weight}")
        if self.accum_steps < 1 or self.tokens_per_batch < 1:
            raise ValueError("accum_steps and tokens_per_batch must be >= 1")

    def to_kv(self) -> dict[str, str]:
        return {f.name: repr(getattr(self, f.name)) if isinstance(getattr(self, f.name), float)
                else str(getattr(self, f.name)) for f in fields(self)}

    @classmethod
    def from_kv(cls, kv: dict[str, str]) -> "TrainConfig":
        casts = {"int": int, "float": float}
        return cls(**{f.name: casts[f.type](kv[f.name]) for f in fields(cls) if f.name in kv})


def read_kv_file(path: str | os.PathLike) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key=value, got {line!r}")
        k, v = (part.strip() for part in line.split("=", 1))
        out[k] = v
    return out


# ---------------------------------------------------------------------------
# losses


def label_smoothed_ce(logits: Tensor, targets, eps: float, ignore_index: int = PAD,
                      reduction: str = "mean") -> Tensor:
    """(1-eps) * NLL(target) + eps * mean NLL over the vocabulary, per non-pad position."""
    if not 0.0 <= eps < 1.0:
        raise ValueError(f"label smoothing must be in [0, 1), got {eps}")
    tgt = np.asarray(targets, dtype=np.int64)
    lp = nx.log_softmax(logits, axis=-1)
    nll = nx.mul(nx.gather_last(lp, tgt), -1.0)
    per_pos = nll
    if eps > 0:
        smooth = nx.mul(nx.mean(lp, axis=-1), -1.0)
        per_pos = nx.add(nx.mul(nll, 1.0 - eps), nx.mul(smooth, eps))
    keep = (tgt != ignore_index).astype(np.float64)
    total = nx.sum_(nx.mul(per_pos, keep))
    if reduction == "sum":
        return total
    return nx.mul(total, 1.0 / max(keep.sum(), 1.0))


@dataclass
class LossStats:
    ctc_dropped: int = 0


def combined_loss(ce: Tensor, ctc: Tensor, weight: float, stats: LossStats | None = None) -> Tensor:
    """``ce + weight * ctc``; an infinite CTC term (unalignable target) is dropped and counted."""
    if not np.isfinite(ctc.data).all():
        if stats is not None:
            stats.ctc_dropped += 1
        return ce
    if weight == 0:
        return ce
    return nx.add(ce, nx.mul(ctc, weight))


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warm-up to ``lr_peak`` then inverse square-root decay."""
    if step < 1:
        raise ValueError(f"step must be >= 1, got {step}")
    w = cfg.warmup_updates
    return cfg.lr_peak * min(step / w, math.sqrt(w / step))


def adam_step(state: TrainState, lr: float, cfg: TrainConfig) -> TrainState:
    """One bias-corrected Adam update of every parameter, in place."""
    b1, b2, eps = cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps
    t = state.step + 1
    for name in state.params:
        if state.params[name].grad is None:
            raise ValueError(f"parameter {name} has no gradient")
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, p in state.params.items():
        g = p.grad
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
        v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)
    state.step = t
    return state


# ---------------------------------------------------------------------------
# features


def cmvn(features: np.ndarray, floor: float = 1e-8) -> np.ndarray:
    """Per-utterance, per-coefficient mean and variance normalization."""
    x = np.asarray(features, dtype=np.float64)
    mu = x.mean(axis=0, keepdims=True)
    var = x.var(axis=0, keepdims=True)
    return (x - mu) / np.sqrt(np.maximum(var, floor))


def spec_augment(features: np.ndarray, rng: np.random.Generator, F: int = 4, T_m: int = 10,
                 n_f: int = 1, n_t: int = 1) -> np.ndarray:
    """Zero ``n_f`` frequency bands of width U[0, F] and ``n_t`` time bands of width U[0, T_m]."""
    x = np.array(features, dtype=np.float64, copy=True)
    T, d = x.shape
    for _ in range(n_f):
        w = int(rng.integers(0, F + 1)) if F > 0 else 0
        if w and w < d:
            f0 = int(rng.integers(0, d - w + 1))
            x[:, f0 : f0 + w] = 0.0
    for _ in range(n_t):
        w = int(rng.integers(0, T_m + 1)) if T_m > 0 else 0
        if w and w < T:
            t0 = int(rng.integers(0, T - w + 1))
            x[t0 : t0 + w, :] = 0.0
    return x


# ---------------------------------------------------------------------------
# batching


def make_batches(utts: Sequence[Utterance], tokens_per_batch: int, rng: np.random.Generator,
                 max_sentences: int = 0) -> list[list[int]]:
    """Group utterance indices so that ``batch_size * max_frames <= tokens_per_batch``.

    Utterances are shuffled, sorted by length (stable), packed, and the batch
    order shuffled again.
    """
    order = rng.permutation(len(utts))
    order = sorted(order, key=lambda i: utts[i].duration_frames)
    batches: list[list[int]] = []
    cur: list[int] = []
    longest = 0
    for i in order:
        n = utts[i].duration_frames
        full = max_sentences and len(cur) >= max_sentences
        if cur and (max(longest, n) * (len(cur) + 1) > tokens_per_batch or full):
            batches.append(cur)
            cur, longest = [], 0
        cur.append(int(i))
        longest = max(longest, n)
    if cur:
        batches.append(cur)
    return [batches[j] for j in rng.permutation(len(batches))]


def _prepare(utts: Sequence[Utterance], tcfg: TrainConfig, rng: np.random.Generator | None) -> list[np.ndarray]:
    feats = []
    for u in utts:
        x = cmvn(u.features) if tcfg.cmvn else u.features
        if rng is not None and tcfg.spec_augment:
            x = spec_augment(x, rng, tcfg.specaug_freq_width, tcfg.specaug_time_width,
                             tcfg.specaug_freq_masks, tcfg.specaug_time_masks)
        feats.append(x)
    return feats


def decoder_io(utts: Sequence[Utterance]) -> tuple[np.ndarray, np.ndarray]:
    """Teacher-forcing inputs ``[BOS, y...]`` and outputs ``[y..., EOS]``, PAD-filled."""
    L = max(len(u.target_ids) for u in utts) + 1
    inp = np.full((len(utts), L), PAD, dtype=np.int64)
    out = np.full((len(utts), L), PAD, dtype=np.int64)
    for i, u in enumerate(utts):
        n = len(u.target_ids)
        inp[i, 0] = BOS
        inp[i, 1 : n + 1] = u.target_ids
        out[i, :n] = u.target_ids
        out[i, n] = EOS
    return inp, out


@dataclass
class BatchLoss:
    loss: Tensor
    ce_sum: float
    ctc_sum: float
    ce_tokens: int
    ctc_tokens: int
    ctc_dropped: int


def batch_loss(state: TrainState, utts: Sequence[Utterance], tcfg: TrainConfig, ce_norm: float,
               ctc_norm: float, feats: Sequence[np.ndarray] | None = None, rng=None,
               force_labels=None) -> BatchLoss:
    """Summed CE and CTC of a micro-batch, each divided by the given normalizer."""
    feats = _prepare(utts, tcfg, None) if feats is None else feats
    enc = encode(feats, state, rng=rng, force_labels=force_labels)
    inp, out = decoder_io(utts)
    logits = decode(enc, inp, state, rng=rng)
    ce = label_smoothed_ce(logits, out, tcfg.label_smoothing, reduction="sum")
    loss = nx.mul(ce, 1.0 / ce_norm)
    ctc_vals, ok = ctc_losses(enc, [u.transcript_ids for u in utts])
    ctc_sum = 0.0
    if tcfg.ctc_weight > 0 and ok.any():
        ctc_total = nx.sum_(nx.masked_fill(ctc_vals, ~ok, 0.0))
        ctc_sum = float(ctc_total.data)
        loss = combined_loss(loss, nx.mul(ctc_total, 1.0 / ctc_norm), tcfg.ctc_weight)
    return BatchLoss(
        loss=loss,
        ce_sum=float(ce.data),
        ctc_sum=ctc_sum,
        ce_tokens=int((out != PAD).sum()),
        ctc_tokens=sum(len(u.transcript_ids) for u, k in zip(utts, ok) if k),
        ctc_dropped=int((~ok).sum()),
    )


def ctc_token_count(utts: Sequence[Utterance], cfg: ModelConfig) -> int:
    """Transcript tokens of utterances whose CTC target fits the CTC-head length."""
    lens = ctc_input_lengths([u.duration_frames for u in utts], cfg)
    return sum(len(u.transcript_ids) for u, n in zip(utts, lens) if n >= min_frames(u.transcript_ids))


@dataclass
class TrainResult:
    state: TrainState
    history: list[dict] = field(default_factory=list)
    valid_losses: list[float] = field(default_factory=list)
    checkpoints: list[str] = field(default_factory=list)


def validation_loss(state: TrainState, utts: Sequence[Utterance], tcfg: TrainConfig, batch: int = 64) -> float:
    """Per-token label-smoothed CE on ``utts`` (no augmentation)."""
    total, tokens = 0.0, 0
    with nx.no_grad():
        for i in range(0, len(utts), batch):
            chunk = utts[i : i + batch]
            enc = encode(_prepare(chunk, tcfg, None), state)
            inp, out = decoder_io(chunk)
            total += float(label_smoothed_ce(decode(enc, inp, state), out, tcfg.label_smoothing, reduction="sum").data)
            tokens += int((out != PAD).sum())
    return total / max(tokens, 1)


def train(
    model_cfg: ModelConfig,
    tcfg: TrainConfig,
    dataset: Sequence[Utterance],
    valid: Sequence[Utterance] | None = None,
    out_dir: str | os.PathLike | None = None,
    state: TrainState | None = None,
    callback: Callable[[TrainState, dict], bool] | None = None,
    log_file=None,
) -> TrainResult:
    """Run the recipe until ``max_updates``/``max_epochs`` or ``callback`` returns true.

    One line per update goes to ``log_file`` (tab-separated
    ``step lr ce ctc combined wall_ms``); a checkpoint is written to
    ``out_dir`` after every epoch.
    """
    if not dataset:
        raise ValueError("training dataset is empty")
    rng = np.random.default_rng(tcfg.seed)
    state = state or build(model_cfg, seed=tcfg.seed)
    state.meta.update({"ctc_weight": repr(tcfg.ctc_weight), "label_smoothing": repr(tcfg.label_smoothing),
                       "cmvn": str(tcfg.cmvn)})
    result = TrainResult(state)
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
    stop = False
    for epoch in range(1, tcfg.max_epochs + 1):
        batches = make_batches(dataset, tcfg.tokens_per_batch, rng, tcfg.max_sentences)
        for g0 in range(0, len(batches), tcfg.accum_steps):
            group = [[dataset[i] for i in b] for b in batches[g0 : g0 + tcfg.accum_steps]]
            t0 = time.perf_counter()
            record = _update(state, group, tcfg, rng)
            record["wall_ms"] = (time.perf_counter() - t0) * 1e3
            record["epoch"] = epoch
            result.history.append(record)
            if log_file is not None:
                log_file.write("{step}\t{lr:.6e}\t{ce:.6f}\t{ctc:.6f}\t{combined:.6f}\t{wall_ms:.1f}\n".format(**record))
            if callback is not None and callback(state, record):
                stop = True
            if stop or state.step >= tcfg.max_updates:
                stop = True
                break
        if valid:
            vl = validation_loss(state, valid, tcfg)
            result.valid_losses.append(vl)
            logger.info("epoch %d step %d valid_loss %.4f", epoch, state.step, vl)
        if out_dir is not None:
            path = os.path.join(out_dir, f"checkpoint{epoch}.spk")
            save_checkpoint(state, path)
            result.checkpoints.append(path)
        if stop:
            break
    return result


def _update(state: TrainState, group: Sequence[Sequence[Utterance]], tcfg: TrainConfig,
            rng: np.random.Generator) -> dict:
    cfg = state.config
    flat = [u for mb in group for u in mb]
    ce_norm = float(sum(len(u.target_ids) + 1 for u in flat))
    ctc_norm = float(max(ctc_token_count(flat, cfg), 1))
    drop_rng = rng if cfg.dropout_p > 0 else None
    aug_rng = rng if tcfg.spec_augment else None
    state.zero_grad()
    ce_sum = ctc_sum = 0.0
    dropped = 0
    for mb in group:
        feats = _prepare(mb, tcfg, aug_rng)
        bl = batch_loss(state, mb, tcfg, ce_norm, ctc_norm, feats, drop_rng)
        if not np.isfinite(bl.loss.data):
            raise TrainingDiverged(f"non-finite loss at update {state.step + 1}: ce_sum={bl.ce_sum} ctc_sum={bl.ctc_sum}")
        nx.backward(bl.loss)
        ce_sum += bl.ce_sum
        ctc_sum += bl.ctc_sum
        dropped += bl.ctc_dropped
    for p in state.params.values():
        if p.grad is None:
            p.grad = np.zeros_like(p.data)
    lr = lr_at(state.step + 1, tcfg)
    adam_step(state, lr, tcfg)
    ce = ce_sum / ce_norm
    ctc = ctc_sum / ctc_norm
    return {"step": state.step, "lr": lr, "ce": ce, "ctc": ctc, "combined": ce + tcfg.ctc_weight * ctc,
            "ctc_dropped": dropped}


def model_grad_check(config: ModelConfig, seed: int = 0, entries: int = 4, h: float = 1e-6,
                     tol: float = 1e-4, min_margin: float = 1e-4, attempts: int = 50) -> nx.GradCheckReport:
    """Finite-difference check of the full training loss (CE + CTC) of ``config``.

    Dropout is switched off and the CTC compression labels are pinned to
    one greedy pass, so the loss is smooth apart from ReLU kinks. Inputs are
    redrawn until every ReLU pre-activation is at least ``min_margin`` from
    zero, which keeps kinks out of the difference stencil.
    """
    cfg = replace(config, dropout_p=0.0)
    state = build(cfg, seed=seed)
    vocab = min(cfg.src_vocab - 2, cfg.tgt_vocab - 4)
    tcfg = TrainConfig(spec_augment=0)
    for attempt in range(attempts):
        # equal lengths: no padded frames, whose ReLU inputs sit exactly at zero
        utts = synth_task(2, vocab_size=vocab, len_range=(3, 3), redundancy=8, jitter=0.0,
                          seed=seed * attempts + attempt, d_feat=cfg.d_feat)
        feats = _prepare(utts, tcfg, None)
        ce_norm = float(sum(len(u.target_ids) + 1 for u in utts))
        ctc_norm = float(max(ctc_token_count(utts, cfg), 1))
        with nx.no_grad(), nx.track_kinks() as kinks:
            labels = encode(feats, state).ctc.frame_labels
            batch_loss(state, utts, tcfg, ce_norm, ctc_norm, feats, force_labels=labels)
        if kinks.margin >= min_margin:
            break
    else:
        raise RuntimeError(f"no input with ReLU margin >= {min_margin} in {attempts} draws")

    def loss() -> Tensor:
        return batch_loss(state, utts, tcfg, ce_norm, ctc_norm, feats, force_labels=labels).loss

    return nx.sampled_grad_check(loss, state.params, entries=entries, h=h, tol=tol, seed=seed)
