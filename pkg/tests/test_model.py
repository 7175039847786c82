from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from speechformer import numerics as nx
from speechformer.attention import init_mha, multi_head_attention
from speechformer.data import BOS, EOS
from speechformer.model import (
    ConfigError,
    ModelConfig,
    TrainState,
    average_checkpoints,
    build,
    count_parameters,
    decode,
    encode,
    encode_baseline,
    encode_plain_convattention,
    encode_speechformer,
    greedy_decode_batch,
    load_checkpoint,
    load_pretrained_convattention,
    preset,
    save_checkpoint,
    translate,
)
from speechformer.numerics import Tensor
from speechformer.training import model_grad_check

ARCHS = ["speechformer", "plain_convattention", "baseline", "baseline_compressed"]


@pytest.fixture(scope="module")
def states():
    return {a: build(preset("desk", arch=a, dropout_p=0.0), seed=3) for a in ARCHS}


def feats(rng, T, d=16):
    return rng.standard_normal((T, d))


def alternating(T):
    return [1 + (t % 2) for t in range(T)]


class TestBuild:
    def test_deterministic(self):
        a, b = build(preset("desk"), seed=5), build(preset("desk"), seed=5)
        for k in a.params:
            np.testing.assert_array_equal(a.params[k].data, b.params[k].data)
        c = build(preset("desk"), seed=6)
        assert any(not np.array_equal(a.params[k].data, c.params[k].data) for k in a.params)

    @pytest.mark.parametrize("arch", ARCHS)
    def test_count_matches_built_state(self, arch):
        cfg = preset("desk", arch=arch)
        assert build(cfg).num_parameters() == count_parameters(cfg) < 200_000

    @pytest.mark.parametrize("arch,target", [("baseline", 77e6), ("speechformer", 79e6)])
    def test_paper_preset_size(self, arch, target):
        n = count_parameters(preset("paper", arch=arch))
        assert abs(n - target) / target < 0.10

    def test_speechformer_slightly_larger(self):
        assert count_parameters(preset("paper", arch="speechformer")) > count_parameters(preset("paper", arch="baseline"))

    def test_init_conventions(self):
        s = build(preset("desk"), seed=0)
        assert not s.params["enc.0.attn.bq"].data.any()
        np.testing.assert_array_equal(s.params["enc.0.ln1.g"].data, 1.0)

    @pytest.mark.parametrize("bad", [dict(arch="rnn"), dict(d_model=30, heads=4), dict(chi=8, kernel=4), dict(e_l=0)])
    def test_invalid_config(self, bad):
        with pytest.raises(ConfigError):
            ModelConfig(**bad)

    def test_aliases(self):
        assert ModelConfig(arch="plain").arch == "plain_convattention"
        assert ModelConfig(arch="baseline-compressed").arch == "baseline_compressed"

    def test_unknown_preset(self):
        with pytest.raises(ConfigError):
            preset("huge")


class TestEncoderLengths:
    @settings(max_examples=15)
    @given(T=st.integers(1, 200), seed=st.integers(0, 1000))
    def test_length_laws(self, states, T, seed):
        x = feats(np.random.default_rng(seed), T)
        with nx.no_grad():
            sf = encode_speechformer(x, states["speechformer"])
            assert sf.states.shape[1] == sf.compressed_lengths[0] <= T
            assert encode_plain_convattention(x, states["plain_convattention"]).states.shape[1] == T
            if T >= 4:
                assert encode_baseline(x, states["baseline"]).states.shape[1] == -(-T // 4)

    def test_distinct_labels_keep_length(self, states, rng):
        x = feats(rng, 13)
        with nx.no_grad():
            assert encode(x, states["speechformer"], force_labels=[alternating(13)]).states.shape[1] == 13
            assert encode(x, states["speechformer"], force_labels=[[4] * 13]).states.shape[1] == 1
            base = encode(x, states["baseline"]).states.shape[1]
            comp = encode(x, states["baseline_compressed"], force_labels=[alternating(4)]).states.shape[1]
        assert base == comp == 4

    def test_ctc_result_shape(self, states, rng):
        with nx.no_grad():
            out = encode(feats(rng, 10), states["speechformer"])
        assert out.ctc.log_probs.shape == (1, 10, 22)
        np.testing.assert_allclose(np.exp(out.ctc.log_probs.data).sum(-1), 1.0, atol=1e-12)


class TestBatching:
    @pytest.mark.parametrize("arch", ARCHS)
    def test_batch_equals_single(self, states, rng, arch):
        xs = [feats(rng, T) for T in (17, 9, 24)]
        prefix = np.array([[BOS, 5, 6], [BOS, 7, 8], [BOS, 9, 5]])
        with nx.no_grad():
            batch = decode(encode(xs, states[arch]), prefix, states[arch]).data
            for b, x in enumerate(xs):
                single = decode(encode(x, states[arch]), prefix[b], states[arch]).data
                np.testing.assert_allclose(batch[b], single, atol=1e-12)

    def test_permutation_invariance(self, states, rng):
        xs = [feats(rng, T) for T in (12, 20, 7, 15)]
        prefix = np.array([[BOS, 5]] * 4)
        perm = [2, 0, 3, 1]
        s = states["speechformer"]
        with nx.no_grad():
            a = decode(encode(xs, s), prefix, s).data
            b = decode(encode([xs[i] for i in perm], s), prefix, s).data
        np.testing.assert_allclose(a[perm], b, atol=1e-12)


class TestDecoder:
    def test_causal(self, states, rng):
        s = states["baseline"]
        with nx.no_grad():
            enc = encode(feats(rng, 16), s)
            a = decode(enc, [BOS, 5, 6, 7, 8], s).data
            b = decode(enc, [BOS, 5, 6, 12, 13], s).data
        np.testing.assert_array_equal(a[:3], b[:3])
        assert not np.allclose(a[3:], b[3:])

    def test_prefix_contract(self, states, rng):
        s = states["baseline"]
        with nx.no_grad():
            enc = encode(feats(rng, 16), s)
            with pytest.raises(ValueError, match="non-empty"):
                decode(enc, [], s)
            with pytest.raises(ValueError, match="BOS"):
                decode(enc, [5, 6], s)

    def test_single_state_cross_attention(self, rng):
        p = {k: nx.parameter(v) for k, v in init_mha(rng, 8).items()}
        p["bv"] = nx.parameter(rng.standard_normal(8))
        state = rng.standard_normal((1, 8))
        out = multi_head_attention(Tensor(rng.standard_normal((5, 8))), Tensor(state), Tensor(state), p, 2).data
        value = (state @ p["wv"].data + p["bv"].data) @ p["wo"].data + p["bo"].data
        np.testing.assert_allclose(out, np.repeat(value, 5, axis=0), atol=1e-12)


class TestTranslate:
    def _one_hot_model(self, token):
        s = build(preset("desk", arch="baseline", dropout_p=0.0), seed=0)
        s.params["out.w"].data[:] = 0.0
        s.params["out.b"].data[:] = 0.0
        s.params["out.b"].data[token] = 60.0
        return s

    def test_beam_equals_greedy_when_one_hot(self, rng):
        s = self._one_hot_model(7)
        x = feats(rng, 12)
        assert translate(x, s, beam=1, max_len=4) == translate(x, s, beam=2, max_len=4) == [7] * 4

    def test_max_len_one(self, states, rng):
        assert len(translate(feats(rng, 12), states["speechformer"], max_len=1)) <= 1

    def test_eos_stops(self, rng):
        assert translate(feats(rng, 12), self._one_hot_model(EOS), beam=3) == []

    def test_greedy_batch_matches_single(self, states, rng):
        xs = [feats(rng, T) for T in (8, 14)]
        s = states["plain_convattention"]
        assert greedy_decode_batch(xs, s, 6) == [translate(x, s, max_len=6) for x in xs]

    def test_invalid_beam(self, states, rng):
        with pytest.raises(ValueError):
            translate(feats(rng, 8), states["baseline"], beam=0)

    def test_inference_ignores_dropout(self, rng):
        s = build(preset("desk", dropout_p=0.3), seed=1)
        x = feats(rng, 10)
        with nx.no_grad():
            a = encode(x, s).states.data
            b = encode(x, s).states.data
        np.testing.assert_array_equal(a, b)


@pytest.mark.parametrize("arch", ARCHS)
def test_end_to_end_gradients(arch):
    report = model_grad_check(preset("desk", arch=arch), seed=11)
    assert report.worst < 1e-4, sorted(report.max_rel_error.items(), key=lambda kv: -kv[1])[:3]


class TestCheckpoints:
    def test_round_trip_bit_exact(self, tmp_path, states, rng):
        s = states["speechformer"]
        s.m = {k: rng.standard_normal(p.shape) for k, p in s.params.items()}
        s.v = {k: rng.random(p.shape) for k, p in s.params.items()}
        s.step, s.meta = 42, {"ctc_weight": "0.5"}
        path = tmp_path / "a.spk"
        save_checkpoint(s, path)
        r = load_checkpoint(path)
        assert r.config == s.config and r.step == 42 and r.meta == {"ctc_weight": "0.5"}
        for k in s.params:
            np.testing.assert_array_equal(r.params[k].data, s.params[k].data)
            np.testing.assert_array_equal(r.m[k], s.m[k])
        x = feats(rng, 21)
        with nx.no_grad():
            a = decode(encode(x, s), [BOS, 5, 6], s).data
            b = decode(encode(x, r), [BOS, 5, 6], r).data
        assert a.tobytes() == b.tobytes()

    def test_header_format(self, tmp_path, states):
        path = tmp_path / "b.spk"
        save_checkpoint(states["baseline"], path, include_optimizer=False)
        with open(path, "rb") as fh:
            header = fh.readline().decode("ascii").split()
            first = fh.readline().decode("ascii").split()
        assert header[:2] == ["SPFK1", "baseline"] and "d_model=32" in header
        assert first[0] == sorted(states["baseline"].params)[0] and int(first[1]) == len(first) - 2

    def test_rejects_garbage(self, tmp_path, states):
        bad = tmp_path / "bad.spk"
        bad.write_bytes(b"NOPE\n")
        with pytest.raises(ValueError, match="SPFK1"):
            load_checkpoint(bad)
        good = tmp_path / "good.spk"
        save_checkpoint(states["baseline"], good)
        bad.write_bytes(good.read_bytes()[:-100])
        with pytest.raises(ValueError, match="truncated"):
            load_checkpoint(bad)


class TestAveraging:
    def _state(self, seed):
        return build(preset("desk", arch="baseline"), seed=seed)

    def test_single_is_identity(self):
        s = self._state(1)
        a = average_checkpoints([s])
        for k in s.params:
            np.testing.assert_array_equal(a.params[k].data, s.params[k].data)

    def test_opposites_cancel(self):
        s = self._state(1)
        neg = TrainState(s.config, {k: nx.parameter(-p.data) for k, p in s.params.items()})
        a = average_checkpoints([s, neg])
        assert all(not p.data.any() for p in a.params.values())

    def test_mean_of_seven(self):
        group = [self._state(i) for i in range(7)]
        a = average_checkpoints(group)
        for k in a.params:
            ref = np.mean([g.params[k].data for g in group], axis=0)
            np.testing.assert_allclose(a.params[k].data, ref, atol=1e-12, rtol=0)
        assert a.m == {}

    def test_config_mismatch(self):
        with pytest.raises(ConfigError):
            average_checkpoints([self._state(0), build(preset("desk"), seed=0)])


def test_pretrained_convattention_hook(rng):
    donor = build(preset("desk", arch="plain", dropout_p=0.0), seed=8)
    target = build(preset("desk", arch="speechformer", dropout_p=0.0), seed=9)
    load_pretrained_convattention(target, donor)
    x = feats(rng, 18)
    with nx.no_grad():
        a = encode(x, target).ctc.log_probs.data
        b = encode(x, donor).ctc.log_probs.data
    assert a.tobytes() == b.tobytes()
    with pytest.raises(ConfigError):
        load_pretrained_convattention(donor, target)
