"""Speechformer, Plain ConvAttention and the strided baseline, end to end.

Layouts (``n = e_l + e_t`` encoder layers, CTC head after layer ``e_l``):

* ``speechformer``: two stride-1 convs, ``e_l`` ConvAttention layers, CTC
  head, CTC compression, ``e_t`` vanilla layers.
* ``plain_convattention``: two stride-1 convs, ``n`` ConvAttention layers,
  CTC head for the auxiliary loss only.
* ``baseline``: two stride-2 convs (x4 subsampling), ``n`` vanilla layers.
* ``baseline_compressed``: baseline plus CTC compression after layer ``e_l``.

Every layer is post-norm. Utterances are batched as ``[B, T, d]`` with a
:class:`PaddingMask`; padded frames never influence valid ones.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field, fields, replace
from typing import Sequence

import numpy as np

from . import numerics as nx
from .attention import AttentionConfig, PaddingMask, conv_attention, init_conv_attention, init_mha, multi_head_attention
from .ctc import CTCResult, batch_compression, ctc_loss_batch, greedy_frame_labels
from .data import BOS, EOS, PAD
from .numerics import Tensor

ARCHS = ("speechformer", "plain_convattention", "baseline", "baseline_compressed")
ARCH_ALIASES = {"plain": "plain_convattention", "baseline-compressed": "baseline_compressed"}
FRONTEND_KERNEL = 5
LN_EPS = 1e-5


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    arch: str = "speechformer"
    e_l: int = 2
    e_t: int = 1
    dec_layers: int = 2
    heads: int = 2
    d_model: int = 32
    d_ffn: int = 64
    chi: int = 4
    kernel: int = 8
    d_feat: int = 16
    src_vocab: int = 22
    tgt_vocab: int = 24
    dropout_p: float = 0.0

    def __post_init__(self):
        arch = ARCH_ALIASES.get(self.arch, self.arch)
        if arch not in ARCHS:
            raise ConfigError(f"unknown arch {self.arch!r}; expected one of {ARCHS}")
        object.__setattr__(self, "arch", arch)
        if self.d_model % self.heads:
            raise ConfigError(f"d_model={self.d_model} not divisible by heads={self.heads}")
        if self.e_l < 1 or self.e_t < 0 or self.dec_layers < 1:
            raise ConfigError("need e_l >= 1, e_t >= 0, dec_layers >= 1")
        if self.kernel < self.chi:
            raise ConfigError(f"kernel={self.kernel} must be >= chi={self.chi}")

    @property
    def attention(self) -> AttentionConfig:
        return AttentionConfig(self.d_model, self.heads, self.chi, self.kernel, self.dropout_p)

    @property
    def n_encoder(self) -> int:
        return self.e_l + self.e_t

    @property
    def subsampling(self) -> int:
        return 4 if self.arch.startswith("baseline") else 1

    @property
    def compresses(self) -> bool:
        return self.arch in ("speechformer", "baseline_compressed")

    def layer_kind(self, i: int) -> str:
        if self.arch == "plain_convattention" or (self.arch == "speechformer" and i < self.e_l):
            return "conv"
        return "vanilla"

    def to_kv(self) -> dict[str, str]:
        return {f.name: str(getattr(self, f.name)) for f in fields(self)}

    @classmethod
    def from_kv(cls, kv: dict[str, str]) -> "ModelConfig":
        casts = {"int": int, "float": float, "str": str}
        return cls(**{f.name: casts[f.type](kv[f.name]) for f in fields(cls) if f.name in kv})


PRESETS = {
    "desk": ModelConfig(dropout_p=0.1),
    # widths 512/2048 are inferred from the reported ~77M/~79M parameter counts
    "paper": ModelConfig(
        e_l=8, e_t=4, dec_layers=6, heads=8, d_model=512, d_ffn=2048, chi=4, kernel=8,
        d_feat=80, src_vocab=5000, tgt_vocab=8000, dropout_p=0.1,
    ),
}


def preset(name: str, **overrides) -> ModelConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; expected one of {sorted(PRESETS)}")
    return replace(PRESETS[name], **overrides)


@dataclass
class TrainState:
    config: ModelConfig
    params: dict[str, Tensor]
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    seed: int = 0
    meta: dict[str, str] = field(default_factory=dict)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def group(self, prefix: str) -> dict[str, Tensor]:
        n = len(prefix)
        return {k[n:]: v for k, v in self.params.items() if k.startswith(prefix)}


# ---------------------------------------------------------------------------
# initialization


def _glorot(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, shape)


def _ln(prefix: str, d: int) -> dict[str, np.ndarray]:
    return {f"{prefix}.g": np.ones(d), f"{prefix}.b": np.zeros(d)}


def _ffn(rng, prefix: str, d: int, d_ffn: int) -> dict[str, np.ndarray]:
    return {
        f"{prefix}.w1": _glorot(rng, (d, d_ffn), d, d_ffn),
        f"{prefix}.b1": np.zeros(d_ffn),
        f"{prefix}.w2": _glorot(rng, (d_ffn, d), d_ffn, d),
        f"{prefix}.b2": np.zeros(d),
    }


def _prefixed(prefix: str, group: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {f"{prefix}.{k}": v for k, v in group.items()}


def build(config: ModelConfig, seed: int = 0) -> TrainState:
    """Deterministically initialize all parameters of ``config`` from ``seed``."""
    rng = np.random.default_rng(seed)
    c = config
    d, K = c.d_model, FRONTEND_KERNEL
    raw: dict[str, np.ndarray] = {
        "fe.conv1.w": _glorot(rng, (K, c.d_feat, d), K * c.d_feat, K * d),
        "fe.conv1.b": np.zeros(d),
        "fe.conv2.w": _glorot(rng, (K, d, d), K * d, K * d),
        "fe.conv2.b": np.zeros(d),
    }
    for i in range(c.n_encoder):
        pre = f"enc.{i}"
        if c.layer_kind(i) == "conv":
            raw.update(_prefixed(f"{pre}.attn", init_conv_attention(rng, c.attention)))
        else:
            raw.update(_prefixed(f"{pre}.attn", init_mha(rng, d)))
        raw.update(_ln(f"{pre}.ln1", d))
        raw.update(_ffn(rng, f"{pre}.ffn", d, c.d_ffn))
        raw.update(_ln(f"{pre}.ln2", d))
    raw["ctc.w"] = _glorot(rng, (d, c.src_vocab), d, c.src_vocab)
    raw["ctc.b"] = np.zeros(c.src_vocab)
    raw["dec.embed"] = _glorot(rng, (c.tgt_vocab, d), c.tgt_vocab, d)
    for i in range(c.dec_layers):
        pre = f"dec.{i}"
        raw.update(_prefixed(f"{pre}.self", init_mha(rng, d)))
        raw.update(_ln(f"{pre}.ln1", d))
        raw.update(_prefixed(f"{pre}.cross", init_mha(rng, d)))
        raw.update(_ln(f"{pre}.ln2", d))
        raw.update(_ffn(rng, f"{pre}.ffn", d, c.d_ffn))
        raw.update(_ln(f"{pre}.ln3", d))
    raw["out.w"] = _glorot(rng, (d, c.tgt_vocab), d, c.tgt_vocab)
    raw["out.b"] = np.zeros(c.tgt_vocab)
    return TrainState(config=c, params={k: nx.parameter(v) for k, v in raw.items()}, seed=seed)


def count_parameters(config: ModelConfig) -> int:
    """Parameter count of :func:`build` without allocating anything."""
    c = config
    d, K = c.d_model, FRONTEND_KERNEL
    mha = 4 * (d * d + d)
    ln = 2 * d
    ffn = 2 * d * c.d_ffn + c.d_ffn + d
    conv = c.kernel * (d // c.heads) ** 2 + d // c.heads
    n = K * c.d_feat * d + d + K * d * d + d
    for i in range(c.n_encoder):
        n += mha + 2 * ln + ffn + (conv if c.layer_kind(i) == "conv" else 0)
    n += d * c.src_vocab + c.src_vocab
    n += c.tgt_vocab * d
    n += c.dec_layers * (2 * mha + 3 * ln + ffn)
    n += d * c.tgt_vocab + c.tgt_vocab
    return n


# ---------------------------------------------------------------------------
# forward pieces


def sinusoidal_positions(T: int, d: int) -> np.ndarray:
    pos = np.arange(T)[:, None]
    half = d // 2
    freq = np.exp(-math.log(10000.0) * np.arange(half) / max(half - 1, 1))
    ang = pos * freq[None, :]
    pe = np.zeros((T, d))
    pe[:, :half] = np.sin(ang)
    pe[:, half : 2 * half] = np.cos(ang)
    return pe


def _sub(params: dict[str, Tensor], prefix: str) -> dict[str, Tensor]:
    n = len(prefix) + 1
    return {k[n:]: v for k, v in params.items() if k.startswith(prefix + ".")}


def _layer_norm(x: Tensor, params: dict[str, Tensor], name: str) -> Tensor:
    return nx.layer_norm(x, params[f"{name}.g"], params[f"{name}.b"], LN_EPS)


def _inference_config(config: ModelConfig, rng) -> ModelConfig:
    # dropout only runs when the caller hands over a training rng
    return replace(config, dropout_p=0.0) if rng is None and config.dropout_p > 0 else config


def _ffn_forward(x: Tensor, params: dict[str, Tensor], name: str, p: float, rng) -> Tensor:
    h = nx.relu(nx.linear(x, params[f"{name}.w1"], params[f"{name}.b1"]))
    h = nx.dropout(h, p, rng)
    return nx.linear(h, params[f"{name}.w2"], params[f"{name}.b2"])


def encoder_layer(x: Tensor, params: dict[str, Tensor], prefix: str, kind: str, mask: PaddingMask,
                  config: ModelConfig, rng=None) -> Tensor:
    """Post-norm block: LN(x + attn(x)), then LN(x + FFN(x))."""
    attn = _sub(params, f"{prefix}.attn")
    p = config.dropout_p
    if kind == "conv":
        a = conv_attention(x, x, attn, config.attention, mask, rng)
    else:
        a = multi_head_attention(x, x, x, attn, config.heads, mask, dropout_p=p, rng=rng)
    x = _layer_norm(nx.add(x, nx.dropout(a, p, rng)), params, f"{prefix}.ln1")
    f = _ffn_forward(x, params, f"{prefix}.ffn", p, rng)
    return _layer_norm(nx.add(x, nx.dropout(f, p, rng)), params, f"{prefix}.ln2")


def frontend_lengths(lengths: Sequence[int], config: ModelConfig) -> list[int]:
    if config.subsampling == 1:
        return list(lengths)
    return [-(-(-(-n // 2)) // 2) for n in lengths]


def ctc_input_lengths(lengths: Sequence[int], config: ModelConfig) -> list[int]:
    return frontend_lengths(lengths, config)


def frontend(x: Tensor, params: dict[str, Tensor], mask: PaddingMask, config: ModelConfig) -> tuple[Tensor, PaddingMask]:
    stride = 2 if config.subsampling == 4 else 1
    pad = FRONTEND_KERNEL // 2
    lengths = list(mask.lengths)
    for name in ("fe.conv1", "fe.conv2"):
        x = nx.mul(x, PaddingMask(tuple(lengths), x.shape[1]).time_mask())
        x = nx.relu(nx.conv1d(x, params[f"{name}.w"], params[f"{name}.b"], stride=stride, padding=pad))
        if stride > 1:
            lengths = [-(-n // stride) for n in lengths]
    out_mask = PaddingMask(tuple(lengths), x.shape[1])
    return nx.mul(x, out_mask.time_mask()), out_mask


@dataclass
class EncoderOutput:
    states: Tensor
    mask: PaddingMask
    ctc: CTCResult | None = None
    ctc_lengths: list[int] | None = None
    compressed_lengths: list[int] | None = None


def _as_batch(features, lengths):
    if isinstance(features, Tensor):
        feats = features
    elif isinstance(features, np.ndarray):
        feats = Tensor(features)
    else:
        seqs = [np.asarray(f, dtype=np.float64) for f in features]
        lengths = [len(s) for s in seqs]
        out = np.zeros((len(seqs), max(lengths), seqs[0].shape[1]))
        for i, s in enumerate(seqs):
            out[i, : len(s)] = s
        feats = Tensor(out)
    squeeze = feats.ndim == 2
    if squeeze:
        feats = nx.reshape(feats, (1,) + feats.shape)
    if lengths is None:
        lengths = [feats.shape[1]] * feats.shape[0]
    return feats, PaddingMask(tuple(int(n) for n in lengths), feats.shape[1]), squeeze


def encode(
    features,
    state_or_params,
    config: ModelConfig | None = None,
    lengths: Sequence[int] | None = None,
    rng=None,
    force_labels: Sequence[Sequence[int]] | None = None,
) -> EncoderOutput:
    """Run the encoder of ``config.arch`` on ``[T, d_feat]``, ``[B, T, d_feat]`` or a list of arrays.

    ``force_labels`` overrides the greedy CTC labels used for compression
    (finite-difference checks pin them so the forward stays smooth).
    """
    params, config = _unpack(state_or_params, config)
    config = _inference_config(config, rng)
    x, mask, _ = _as_batch(features, lengths)
    x, mask = frontend(x, params, mask, config)
    x = nx.add(x, sinusoidal_positions(x.shape[1], config.d_model))
    x = nx.dropout(x, config.dropout_p, rng)
    ctc = None
    ctc_lengths = compressed = None
    for i in range(config.n_encoder):
        x = encoder_layer(x, params, f"enc.{i}", config.layer_kind(i), mask, config, rng)
        if i == config.e_l - 1:
            logits = nx.linear(x, params["ctc.w"], params["ctc.b"])
            log_probs = nx.log_softmax(logits, axis=-1)
            ctc_lengths = list(mask.lengths)
            labels = force_labels or [greedy_frame_labels(log_probs.data[b, :n]) for b, n in enumerate(ctc_lengths)]
            ctc = CTCResult(log_probs, [list(lab) for lab in labels], None)
            if config.compresses:
                mats, compressed = batch_compression(ctc.frame_labels, x.shape[1])
                x = nx.matmul(Tensor(mats), x)
                mask = PaddingMask(tuple(compressed), x.shape[1])
                x = nx.add(x, sinusoidal_positions(x.shape[1], config.d_model))
    return EncoderOutput(x, mask, ctc, ctc_lengths, compressed)


def encode_speechformer(features, state_or_params, config=None, **kw) -> EncoderOutput:
    params, config = _unpack(state_or_params, config)
    return encode(features, params, replace(config, arch="speechformer"), **kw)


def encode_plain_convattention(features, state_or_params, config=None, **kw) -> EncoderOutput:
    params, config = _unpack(state_or_params, config)
    return encode(features, params, replace(config, arch="plain_convattention"), **kw)


def encode_baseline(features, state_or_params, config=None, **kw) -> EncoderOutput:
    params, config = _unpack(state_or_params, config)
    if config.arch not in ("baseline", "baseline_compressed"):
        config = replace(config, arch="baseline")
    return encode(features, params, config, **kw)


def _unpack(state_or_params, config):
    if isinstance(state_or_params, TrainState):
        return state_or_params.params, config or state_or_params.config
    if config is None:
        raise ConfigError("a ModelConfig is required when passing a bare parameter dict")
    return state_or_params, config


def decode(
    enc: EncoderOutput,
    prefix,
    state_or_params,
    config: ModelConfig | None = None,
    rng=None,
) -> Tensor:
    """Next-token logits ``[B, L, tgt_vocab]`` for every position of the target prefix.

    ``prefix`` is ``[B, L]`` ids (or a single id list) beginning with BOS;
    pad entries after a sequence's end are ignored by the caller's loss.
    """
    params, config = _unpack(state_or_params, config)
    config = _inference_config(config, rng)
    ids = np.asarray(prefix, dtype=np.int64)
    single = ids.ndim == 1
    if single:
        ids = ids[None, :]
    if ids.shape[1] == 0:
        raise ValueError("decode needs a non-empty prefix starting with BOS")
    if np.any(ids[:, 0] != BOS):
        raise ValueError("every prefix must begin with the BOS id")
    d = config.d_model
    L = ids.shape[1]
    y = nx.mul(nx.take_rows(params["dec.embed"], ids), math.sqrt(d))
    y = nx.add(y, sinusoidal_positions(L, d))
    y = nx.dropout(y, config.dropout_p, rng)
    states = enc.states
    if states.shape[0] != ids.shape[0]:
        if states.shape[0] != 1:
            raise ValueError(f"{states.shape[0]} encoder outputs for {ids.shape[0]} prefixes")
    p = config.dropout_p
    for i in range(config.dec_layers):
        pre = f"dec.{i}"
        a = multi_head_attention(y, y, y, _sub(params, f"{pre}.self"), config.heads, None, causal=True, dropout_p=p, rng=rng)
        y = _layer_norm(nx.add(y, nx.dropout(a, p, rng)), params, f"{pre}.ln1")
        c = multi_head_attention(y, states, states, _sub(params, f"{pre}.cross"), config.heads, enc.mask, dropout_p=p, rng=rng)
        y = _layer_norm(nx.add(y, nx.dropout(c, p, rng)), params, f"{pre}.ln2")
        f = _ffn_forward(y, params, f"{pre}.ffn", p, rng)
        y = _layer_norm(nx.add(y, nx.dropout(f, p, rng)), params, f"{pre}.ln3")
    logits = nx.linear(y, params["out.w"], params["out.b"])
    return nx.reshape(logits, logits.shape[1:]) if single else logits


def ctc_losses(enc: EncoderOutput, transcripts: Sequence[Sequence[int]]) -> tuple[Tensor, np.ndarray]:
    """``[B]`` CTC losses from the CTC head and a mask of alignable utterances."""
    return ctc_loss_batch(enc.ctc.log_probs, enc.ctc_lengths, transcripts)


# ---------------------------------------------------------------------------
# inference


def _encode_inference(features, state: TrainState, lengths=None) -> EncoderOutput:
    with nx.no_grad():
        return encode(features, state, lengths=lengths)


def _select(enc: EncoderOutput, rows: Sequence[int]) -> EncoderOutput:
    rows = list(rows)
    states = Tensor(enc.states.data[rows])
    mask = PaddingMask(tuple(enc.mask.lengths[r] for r in rows), enc.mask.padded_length)
    return EncoderOutput(states, mask)


def greedy_decode_batch(features: Sequence[np.ndarray], state: TrainState, max_len: int) -> list[list[int]]:
    """Batched greedy decoding; returns ids without BOS/EOS."""
    enc = _encode_inference(features, state)
    B = enc.states.shape[0]
    prefix = np.full((B, 1), BOS, dtype=np.int64)
    done = np.zeros(B, dtype=bool)
    with nx.no_grad():
        for _ in range(max_len):
            logits = decode(enc, prefix, state).data[:, -1]
            nxt = np.argmax(logits, axis=-1)
            nxt = np.where(done, PAD, nxt)
            prefix = np.concatenate([prefix, nxt[:, None]], axis=1)
            done |= nxt == EOS
            if done.all():
                break
    out = []
    for row in prefix[:, 1:]:
        seq = []
        for t in row:
            if t in (EOS, PAD):
                break
            seq.append(int(t))
        out.append(seq)
    return out


def translate(features: np.ndarray, state: TrainState, beam: int = 1, max_len: int = 50) -> list[int]:
    """Greedy (``beam=1``) or length-normalized beam search; ids exclude BOS/EOS."""
    if beam < 1:
        raise ValueError(f"beam must be >= 1, got {beam}")
    if beam == 1:
        return greedy_decode_batch([features], state, max_len)[0]
    enc = _encode_inference([features], state)
    live: list[tuple[list[int], float]] = [([BOS], 0.0)]
    finished: list[tuple[list[int], float]] = []
    with nx.no_grad():
        for _ in range(max_len):
            prefixes = np.array([seq for seq, _ in live], dtype=np.int64)
            rep = EncoderOutput(Tensor(np.repeat(enc.states.data, len(live), axis=0)),
                                PaddingMask(enc.mask.lengths * len(live), enc.mask.padded_length))
            logp = nx.log_softmax(decode(rep, prefixes, state)).data[:, -1]
            cands = []
            for (seq, score), row in zip(live, logp):
                for tok in np.argsort(-row, kind="stable")[:beam]:
                    cands.append((seq + [int(tok)], score + float(row[tok])))
            cands.sort(key=lambda c: -c[1])
            live = []
            for seq, score in cands:
                if seq[-1] == EOS:
                    finished.append((seq, score))
                else:
                    live.append((seq, score))
                if len(live) == beam:
                    break
            if len(finished) >= beam or not live:
                break
    pool = finished or live
    best = max(pool, key=lambda c: c[1] / (len(c[0]) - 1))
    return [t for t in best[0][1:] if t != EOS]


# ---------------------------------------------------------------------------
# checkpoints


def average_checkpoints(states: Sequence[TrainState]) -> TrainState:
    """Elementwise mean of parameters; optimizer moments are dropped."""
    if not states:
        raise ValueError("need at least one checkpoint to average")
    first = states[0]
    for s in states[1:]:
        if s.config != first.config or s.params.keys() != first.params.keys():
            raise ConfigError("cannot average checkpoints with different configurations")
    n = len(states)
    params = {}
    for name in first.params:
        acc = np.zeros_like(first.params[name].data)
        for s in states:
            acc = acc + s.params[name].data
        params[name] = nx.parameter(acc / n)
    return TrainState(first.config, params, step=max(s.step for s in states), seed=first.seed, meta=dict(first.meta))


def load_pretrained_convattention(target: TrainState, donor: TrainState) -> None:
    """Copy front-end, the first ``e_l`` encoder layers and the CTC head from a plain ConvAttention model."""
    if donor.config.arch != "plain_convattention" or target.config.arch != "speechformer":
        raise ConfigError("pre-training hook copies plain_convattention weights into a speechformer")
    prefixes = ["fe.", "ctc."] + [f"enc.{i}." for i in range(target.config.e_l)]
    for name, p in target.params.items():
        if any(name.startswith(pre) for pre in prefixes):
            src = donor.params[name]
            if src.shape != p.shape:
                raise ConfigError(f"shape mismatch for {name}: {src.shape} vs {p.shape}")
            p.data = src.data.copy()


MAGIC = "SPFK1"


def save_checkpoint(state: TrainState, path: str | os.PathLike, include_optimizer: bool = True) -> None:
    """Write ``SPFK1 <arch> k=v ...`` then named little-endian float64 arrays."""
    kv = state.config.to_kv()
    kv.pop("arch")
    kv["step"] = str(state.step)
    kv["seed"] = str(state.seed)
    kv.update(state.meta)
    for k, v in kv.items():
        if any(ch.isspace() for ch in k + v) or "=" in k:
            raise ValueError(f"header entry {k}={v!r} must not contain whitespace")
    arrays = [(name, state.params[name].data) for name in sorted(state.params)]
    if include_optimizer:
        arrays += [(f"adam.m/{n}", state.m[n]) for n in sorted(state.m)]
        arrays += [(f"adam.v/{n}", state.v[n]) for n in sorted(state.v)]
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write((" ".join([MAGIC, state.config.arch] + [f"{k}={v}" for k, v in kv.items()]) + "\n").encode("ascii"))
        for name, arr in arrays:
            arr = np.ascontiguousarray(arr, dtype="<f8")
            fh.write((" ".join([name, str(arr.ndim)] + [str(n) for n in arr.shape]) + "\n").encode("ascii"))
            fh.write(arr.tobytes())
    os.replace(tmp, path)


def load_checkpoint(path: str | os.PathLike) -> TrainState:
    with open(path, "rb") as fh:
        header = fh.readline().decode("ascii").split()
        if len(header) < 2 or header[0] != MAGIC:
            raise ValueError(f"{path}: not an {MAGIC} checkpoint")
        kv = dict(item.split("=", 1) for item in header[2:])
        kv["arch"] = header[1]
        config = ModelConfig.from_kv(kv)
        params, m, v = {}, {}, {}
        while True:
            line = fh.readline()
            if not line:
                break
            parts = line.decode("ascii").split()
            name, rank = parts[0], int(parts[1])
            shape = tuple(int(n) for n in parts[2 : 2 + rank])
            count = int(np.prod(shape)) if shape else 1
            raw = fh.read(count * 8)
            if len(raw) != count * 8:
                raise ValueError(f"{path}: truncated payload for {name}")
            arr = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)
            if name.startswith("adam.m/"):
                m[name[7:]] = arr
            elif name.startswith("adam.v/"):
                v[name[7:]] = arr
            else:
                params[name] = nx.parameter(arr)
    known = {f.name for f in fields(ModelConfig)} | {"step", "seed"}
    meta = {k: val for k, val in kv.items() if k not in known}
    return TrainState(config, params, m, v, step=int(kv.get("step", 0)), seed=int(kv.get("seed", 0)), meta=meta)
