"""Command-line entry point.

Exit codes: 0 success, 1 user error (bad flags, missing or malformed input),
2 internal failure (including a failed gradient check). Every run echoes its
resolved configuration to stderr; primary output goes to stdout or ``--out``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import traceback
from dataclasses import fields, replace
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np

from .attention import count_attention_elements
from .data import FormatError, Vocab, load_manifest, synth_task, synth_vocabs, write_manifest
from .evaluation import bench, bleu, bootstrap_significance, t_test_runs
from .model import (
    ConfigError,
    ModelConfig,
    average_checkpoints,
    greedy_decode_batch,
    load_checkpoint,
    preset,
    save_checkpoint,
    translate,
)
from .training import TrainConfig, TrainingDiverged, cmvn, model_grad_check, read_kv_file, train

logger = logging.getLogger("speechformer")

MODEL_KEYS = [f.name for f in fields(ModelConfig)]
TRAIN_KEYS = [f.name for f in fields(TrainConfig)]
GRAD_TOL = 1e-4


class UserError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UserError(f"{self.prog}: {message}")


def _echo(title: str, kv: dict[str, object]) -> None:
    print(f"# {title}", file=sys.stderr)
    for k, v in kv.items():
        print(f"#   {k} = {v}", file=sys.stderr)


def packaged_config(name: str) -> Path:
    path = resources.files("speechformer") / "configs" / f"{name}.cfg"
    if not path.is_file():
        raise UserError(f"no packaged preset {name!r}")
    return Path(str(path))


def resolve_config(preset_name: str, config_path: str | None, overrides: dict[str, str]) -> tuple[ModelConfig, TrainConfig]:
    """Preset file, then ``--config`` on top, then explicit flags."""
    kv = read_kv_file(packaged_config(preset_name))
    if config_path:
        if not Path(config_path).is_file():
            raise UserError(f"config file {config_path} not found")
        kv.update(read_kv_file(config_path))
    kv.update({k: v for k, v in overrides.items() if v is not None})
    unknown = sorted(set(kv) - set(MODEL_KEYS) - set(TRAIN_KEYS))
    if unknown:
        raise UserError(f"unknown config keys: {', '.join(unknown)}")
    try:
        model = ModelConfig.from_kv({k: kv[k] for k in MODEL_KEYS if k in kv})
        tcfg = TrainConfig.from_kv({k: kv[k] for k in TRAIN_KEYS if k in kv})
    except ValueError as exc:
        raise UserError(f"invalid configuration: {exc}") from None
    return model, tcfg


def _vocabs_for(manifest: str) -> tuple[Vocab, Vocab]:
    root = Path(manifest).parent
    try:
        return Vocab.load(root / "src_vocab.txt", "source"), Vocab.load(root / "tgt_vocab.txt", "target")
    except FileNotFoundError as exc:
        raise UserError(f"vocabulary files must sit next to the manifest: {exc}") from None


def _load_data(manifest: str):
    if not Path(manifest).is_file():
        raise UserError(f"manifest {manifest} not found")
    src, tgt = _vocabs_for(manifest)
    data = load_manifest(manifest, src, tgt)
    if not len(data):
        raise UserError(f"manifest {manifest} has no usable utterances")
    return data, src, tgt


# ---------------------------------------------------------------------------
# subcommands


def cmd_train(args) -> int:
    model, tcfg = resolve_config(args.preset, args.config, {"arch": args.arch, "seed": args.seed})
    data, src, tgt = _load_data(args.data)
    model = replace(model, src_vocab=len(src), tgt_vocab=len(tgt), d_feat=data[0].features.shape[1])
    valid = _load_data(args.valid)[0] if args.valid else None
    _echo("model", model.to_kv())
    _echo("training", tcfg.to_kv())
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.cfg").write_text(
        "".join(f"{k} = {v}\n" for k, v in {**model.to_kv(), **tcfg.to_kv()}.items()), encoding="utf-8")
    with open(out / "train.log", "w", encoding="utf-8") as log:
        log.write("step\tlr\tce\tctc\tcombined\twall_ms\n")
        result = train(model, tcfg, data.utterances, valid=valid, out_dir=out, log_file=log)
    for i, vl in enumerate(result.valid_losses, start=1):
        print(f"epoch\t{i}\tvalid_loss\t{vl:.6f}")
    print(f"updates\t{result.state.step}")
    print(f"checkpoint\t{result.checkpoints[-1]}")
    return 0


def cmd_translate(args) -> int:
    if not Path(args.checkpoint).is_file():
        raise UserError(f"checkpoint {args.checkpoint} not found")
    state = load_checkpoint(args.checkpoint)
    data, src, tgt = _load_data(args.data)
    use_cmvn = state.meta.get("cmvn", "1") != "0"
    _echo("model", state.config.to_kv())
    _echo("decoding", {"beam": args.beam, "max_len": args.max_len, "cmvn": int(use_cmvn), "seed": args.seed})
    feats = [cmvn(u.features) if use_cmvn else u.features for u in data]
    if args.beam == 1:
        hyps = greedy_decode_batch(feats, state, args.max_len)
    else:
        hyps = [translate(x, state, beam=args.beam, max_len=args.max_len) for x in feats]
    text = "".join(tgt.decode(h) + "\n" for h in hyps)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    score = bleu(hyps, [u.target_ids for u in data])
    exact = np.mean([h == u.target_ids for h, u in zip(hyps, data)])
    print(f"# BLEU {score.score:.2f}  exact-match {exact:.4f}", file=sys.stderr)
    return 0


def cmd_grad_check(args) -> int:
    model, _ = resolve_config(args.preset, args.config, {"arch": args.arch})
    model = replace(model, dropout_p=0.0)
    _echo("model", model.to_kv())
    _echo("check", {"seed": args.seed, "entries": args.entries, "tol": GRAD_TOL})
    report = model_grad_check(model, seed=args.seed, entries=args.entries, tol=GRAD_TOL)
    for name, err in report.max_rel_error.items():
        print(f"{name}\t{err:.3e}")
    print(f"max_rel_error\t{report.worst:.3e}")
    if report.worst >= GRAD_TOL:
        print(f"gradient check failed: {report.worst:.3e} >= {GRAD_TOL}", file=sys.stderr)
        return 2
    return 0


def _int_list(text: str) -> list[int]:
    try:
        vals = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise UserError(f"expected comma-separated integers, got {text!r}") from None
    if not vals or min(vals) < 1:
        raise UserError(f"lengths must be positive integers, got {text!r}")
    return vals


def cmd_bench_attn(args) -> int:
    lengths = _int_list(args.lengths)
    if args.chi < 1 or args.kernel < args.chi:
        raise UserError("need chi >= 1 and kernel >= chi")
    _echo("bench", {"lengths": lengths, "chi": args.chi, "kernel": args.kernel, "measure": int(args.measure),
                    "repeats": args.repeats, "seed": args.seed})
    rows = []
    for T in lengths:
        vanilla = count_attention_elements(T, 1)
        conv = count_attention_elements(T, args.chi)
        sub = count_attention_elements(-(-T // 4), 1)
        rows.append({"T": T, "chi": args.chi, "vanilla_elements": vanilla, "convattention_elements": conv,
                     "ratio": vanilla / conv, "subsampled_x4_elements": sub})
    report = None
    if args.measure:
        states = {}
        for path in args.checkpoints or []:
            st = load_checkpoint(path)
            states[st.config.arch] = st
        configs = [states[a].config if a in states else preset("desk", arch=a, chi=args.chi, kernel=args.kernel)
                   for a in ("baseline", "speechformer", "plain_convattention")]
        report = bench(configs, lengths, states=states, repeats=args.repeats, seed=args.seed)
    if args.json:
        json.dump({"elements": rows, "measured": report.to_dicts() if report else []}, sys.stdout, indent=2)
        sys.stdout.write("\n")
        return 0
    cols = list(rows[0])
    print("\t".join(cols))
    for r in rows:
        print("\t".join(f"{r[c]:.4f}" if isinstance(r[c], float) else str(r[c]) for c in cols))
    if report:
        print()
        sys.stdout.write(report.to_tsv())
        print(file=sys.stderr)
        sys.stderr.write(report.table())
    return 0


def _read_tokens(path: str) -> list[list[str]]:
    if not Path(path).is_file():
        raise UserError(f"{path} not found")
    return [line.split() for line in Path(path).read_text(encoding="utf-8").splitlines()]


def _float_list(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise UserError(f"expected comma-separated numbers, got {text!r}") from None


def cmd_significance(args) -> int:
    _echo("significance", {"samples": args.samples, "sample_size": args.sample_size, "level": args.level,
                           "seed": args.seed})
    if not 0.0 < args.level < 1.0:
        raise UserError(f"--level must be in (0, 1), got {args.level}")
    did = False
    if args.hyp_a or args.hyp_b or args.refs:
        if not (args.hyp_a and args.hyp_b and args.refs):
            raise UserError("bootstrap needs --hyp-a, --hyp-b and --refs")
        a, b, refs = _read_tokens(args.hyp_a), _read_tokens(args.hyp_b), _read_tokens(args.refs)
        if not (len(a) == len(b) == len(refs)):
            raise UserError(f"line counts differ: {len(a)}, {len(b)}, {len(refs)}")
        res = bootstrap_significance(a, b, refs, args.samples, args.sample_size, args.level, args.seed)
        print(f"bleu_a\t{bleu(a, refs).score:.4f}")
        print(f"bleu_b\t{bleu(b, refs).score:.4f}")
        print(f"p_better\t{res.p_better:.4f}")
        print(f"bootstrap_significant\t{int(res.significant)}")
        did = True
    if args.scores_a or args.scores_b:
        if not (args.scores_a and args.scores_b):
            raise UserError("t-test needs --scores-a and --scores-b")
        try:
            res = t_test_runs(_float_list(args.scores_a), _float_list(args.scores_b), args.level)
        except ValueError as exc:
            raise UserError(str(exc)) from None
        print(f"t\t{res.t:.6f}")
        print(f"df\t{res.df:.4f}")
        print(f"p_value\t{res.p_value:.6f}")
        print(f"ttest_significant\t{int(res.significant)}")
        did = True
    if not did:
        raise UserError("give --hyp-a/--hyp-b/--refs (bootstrap) and/or --scores-a/--scores-b (t-test)")
    return 0


def cmd_synth_data(args) -> int:
    opts = {"n": args.n, "vocab_size": args.vocab_size, "len_range": (args.min_len, args.max_len),
            "redundancy": args.redundancy, "jitter": args.jitter, "seed": args.seed, "d_feat": args.d_feat}
    _echo("synth-data", opts)
    if args.n < 1 or args.min_len < 1 or args.max_len < args.min_len or args.redundancy < 1:
        raise UserError("need n >= 1, 1 <= min-len <= max-len and redundancy >= 1")
    utts = synth_task(**opts)
    src, tgt = synth_vocabs(args.vocab_size)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    src.save(out / "src_vocab.txt")
    tgt.save(out / "tgt_vocab.txt")
    write_manifest(utts, out / "manifest.tsv", src, tgt)
    print(f"manifest\t{out / 'manifest.tsv'}")
    print(f"utterances\t{len(utts)}")
    return 0


def cmd_avg_ckpt(args) -> int:
    _echo("avg-ckpt", {"inputs": " ".join(args.checkpoints), "out": args.out})
    for p in args.checkpoints:
        if not Path(p).is_file():
            raise UserError(f"checkpoint {p} not found")
    avg = average_checkpoints([load_checkpoint(p) for p in args.checkpoints])
    save_checkpoint(avg, args.out, include_optimizer=False)
    print(f"checkpoint\t{args.out}")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="speechformer", description="Train, decode, verify and benchmark Speechformer speech translation models.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        p = sub.add_parser(name, help=help_, description=help_)
        p.set_defaults(fn=fn)
        p.add_argument("--seed", type=int, default=None if name == "train" else 0)
        return p

    archs = ["speechformer", "plain", "baseline", "baseline-compressed"]
    p = add("train", cmd_train, "train a model on a TSV manifest")
    p.add_argument("--config")
    p.add_argument("--preset", choices=["desk", "paper"], default="desk")
    p.add_argument("--arch", choices=archs)
    p.add_argument("--data", required=True)
    p.add_argument("--valid")
    p.add_argument("--out", required=True)

    p = add("translate", cmd_translate, "decode a manifest with a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--beam", type=int, default=1, choices=range(1, 65), metavar="N")
    p.add_argument("--max-len", type=int, default=50)
    p.add_argument("--out")

    p = add("grad-check", cmd_grad_check, "finite-difference check of a whole architecture")
    p.add_argument("--arch", choices=archs, default="speechformer")
    p.add_argument("--preset", choices=["desk", "paper"], default="desk")
    p.add_argument("--config")
    p.add_argument("--entries", type=int, default=4)

    p = add("bench-attn", cmd_bench_attn, "attention element counts and optional timing")
    p.add_argument("--lengths", required=True)
    p.add_argument("--chi", type=int, default=4)
    p.add_argument("--kernel", type=int, default=8)
    p.add_argument("--measure", action="store_true", help="also time translate on desk models")
    p.add_argument("--checkpoints", nargs="+", help="trained models to time instead of fresh ones")
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--json", action="store_true")

    p = add("significance", cmd_significance, "paired bootstrap on BLEU and/or Welch t-test on run scores")
    p.add_argument("--hyp-a")
    p.add_argument("--hyp-b")
    p.add_argument("--refs")
    p.add_argument("--scores-a")
    p.add_argument("--scores-b")
    p.add_argument("--samples", type=int, default=10000)
    p.add_argument("--sample-size", type=int, default=1000)
    p.add_argument("--level", type=float, default=0.95)

    p = add("synth-data", cmd_synth_data, "write a synthetic copy-task corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=2000)
    p.add_argument("--vocab-size", type=int, default=20)
    p.add_argument("--min-len", type=int, default=3)
    p.add_argument("--max-len", type=int, default=10)
    p.add_argument("--redundancy", type=int, default=8)
    p.add_argument("--jitter", type=float, default=0.25)
    p.add_argument("--d-feat", type=int, default=16)

    p = add("avg-ckpt", cmd_avg_ckpt, "average checkpoint parameters")
    p.add_argument("checkpoints", nargs="+")
    p.add_argument("--out", required=True)
    return parser


def run(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.fn(args)
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except (UserError, FormatError, ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return 2
    except Exception:
        print("internal error:", file=sys.stderr)
        traceback.print_exc()
        return 2


def main() -> None:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    sys.exit(run())


if __name__ == "__main__":
    main()
