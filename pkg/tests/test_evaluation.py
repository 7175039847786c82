import math

import numpy as np
import pytest
from scipy import stats

from speechformer.attention import count_attention_elements
from speechformer.evaluation import (
    BenchReport,
    bench,
    bleu,
    bootstrap_significance,
    encoder_attention_elements,
    t_test_runs,
)
from speechformer.model import preset


def toks(s):
    return s.split()


class TestBleu:
    def test_identity(self):
        refs = [toks("a b c d e"), toks("x y z w")]
        assert bleu(refs, refs).score == pytest.approx(100.0)

    def test_disjoint(self):
        assert bleu([toks("p q r s")], [toks("a b c d")]).score == 0.0

    def test_hand_counted_micro_corpus(self):
        hyps = [toks("the cat sat on mat"), toks("a dog runs fast")]
        refs = [toks("the cat sat on the mat"), toks("a dog runs")]
        s = bleu(hyps, refs)
        # order 1: 5/5 + 3/4, order 2: 3/4 + 2/3, order 3: 2/3 + 1/2, order 4: 1/2 + 0/1
        assert s.matches == [8, 5, 3, 1] and s.totals == [9, 7, 5, 3]
        assert s.brevity_penalty == 1.0
        assert s.score == pytest.approx(100 * (8 / 9 * 5 / 7 * 3 / 5 * 1 / 3) ** 0.25, abs=1e-12)

    def test_brevity_penalty(self):
        s = bleu([toks("a b c d")], [toks("a b c d e f")])
        assert s.brevity_penalty == pytest.approx(math.exp(1 - 6 / 4))

    def test_permutation_invariant(self, rng):
        refs = [list(rng.integers(0, 5, size=8)) for _ in range(20)]
        hyps = [list(rng.integers(0, 5, size=7)) for _ in range(20)]
        perm = rng.permutation(20)
        a = bleu(hyps, refs).score
        b = bleu([hyps[i] for i in perm], [refs[i] for i in perm]).score
        assert a == pytest.approx(b, abs=1e-12)

    def test_contract(self):
        with pytest.raises(ValueError):
            bleu([], [])
        with pytest.raises(ValueError):
            bleu([["a"]], [])


def corpus(rng, n=80, good=0.9):
    """References plus a system that gets ``good`` of tokens right and a noisier one."""
    refs = [list(rng.integers(0, 50, size=10)) for _ in range(n)]

    def system(p):
        return [[t if rng.random() < p else 99 for t in r] for r in refs]

    return refs, system(good), system(good - 0.15)


def resample_oracle(a, b, refs, samples, size, seed):
    r = np.random.default_rng(seed)
    wins = 0
    for _ in range(samples):
        idx = r.integers(0, len(refs), size=size)
        if bleu([a[i] for i in idx], [refs[i] for i in idx]).score > bleu([b[i] for i in idx], [refs[i] for i in idx]).score:
            wins += 1
    return wins / samples


class TestBootstrap:
    def test_identical_systems(self, rng):
        refs, a, _ = corpus(rng)
        res = bootstrap_significance(a, a, refs, samples=300, sample_size=100)
        assert res.p_better == 0.0 and not res.significant

    def test_perfect_vs_disjoint(self, rng):
        refs, _, _ = corpus(rng)
        other = [[t + 1000 for t in r] for r in refs]
        res = bootstrap_significance(refs, other, refs, samples=200, sample_size=50, level=0.999)
        assert res.p_better == 1.0 and res.significant

    def test_seed_deterministic(self, rng):
        refs, a, b = corpus(rng)
        r1 = bootstrap_significance(b, a, refs, samples=300, sample_size=20, seed=4)
        r2 = bootstrap_significance(b, a, refs, samples=300, sample_size=20, seed=4)
        assert r1 == r2

    def test_matches_independent_resampling(self, rng):
        refs = [list(rng.integers(0, 50, size=10)) for _ in range(60)]
        a = [[t if rng.random() < 0.72 else 99 for t in r] for r in refs]
        b = [[t if rng.random() < 0.68 else 99 for t in r] for r in refs]
        got = bootstrap_significance(a, b, refs, samples=3000, sample_size=60, seed=1).p_better
        oracle = resample_oracle(a, b, refs, 3000, 60, seed=777)
        assert 0.05 < got < 0.99
        assert abs(got - oracle) < 0.02

    def test_monotone_in_improvement(self, rng):
        refs, a, b = corpus(rng, n=40, good=0.75)
        base = bootstrap_significance(a, b, refs, samples=400, sample_size=40, seed=3).p_better
        better = [list(h) for h in a]
        for i in range(0, 40, 4):
            better[i] = list(refs[i])
        assert bootstrap_significance(better, b, refs, samples=400, sample_size=40, seed=3).p_better >= base

    def test_misaligned(self):
        with pytest.raises(ValueError):
            bootstrap_significance([["a"]], [["a"], ["b"]], [["a"]])


class TestTTest:
    def test_equal_not_significant(self):
        assert not t_test_runs([20.1, 20.5, 19.9], [20.1, 20.5, 19.9]).significant

    def test_constant_gap_significant(self):
        assert t_test_runs([10, 10, 10], [0, 0, 0]).significant
        assert not t_test_runs([5, 5, 5], [5, 5, 5]).significant

    def test_welch_closed_form(self):
        a = [27.5, 21.0, 19.0, 23.6, 17.0, 17.9, 16.9, 20.1, 21.9, 22.6, 23.1, 19.6, 19.0, 21.7, 21.4]
        b = [27.1, 22.0, 20.8, 23.4, 23.4, 23.5, 25.8, 22.0, 24.8, 20.2, 21.9, 22.1, 22.9, 20.5, 24.4]
        va, vb = np.var(a, ddof=1) / len(a), np.var(b, ddof=1) / len(b)
        t = (np.mean(b) - np.mean(a)) / math.sqrt(va + vb)
        res = t_test_runs(b, a)
        assert round(res.t, 3) == round(t, 3)
        ref = stats.ttest_ind(b, a, equal_var=False, alternative="greater")
        assert res.p_value == pytest.approx(ref.pvalue, abs=1e-9)
        assert res.significant == (ref.pvalue < 0.05)

    def test_one_sided(self):
        assert not t_test_runs([1.0, 1.1, 0.9], [3.0, 3.1, 2.9]).significant

    def test_needs_two_values(self):
        with pytest.raises(ValueError):
            t_test_runs([1.0], [2.0, 3.0])


@pytest.fixture(scope="module")
def report():
    cfgs = [preset("desk", arch=a) for a in ("baseline", "speechformer", "plain_convattention")]
    return bench(cfgs, [64, 203], repeats=1, decode_len=2, time_it=False)


class TestBench:
    def test_counts_are_closed_form(self, report):
        for row in report.rows:
            cfg = preset("desk", arch=row.arch)
            assert row.attention_elements == encoder_attention_elements(cfg, row.T)
            chi = 1 if row.arch == "baseline" else 4
            T_att = -(-row.T // 4) if row.arch == "baseline" else row.T
            assert row.attention_elements == count_attention_elements(T_att, chi)

    def test_convattention_matches_subsampled_baseline(self, report):
        by = {(r.arch, r.T): r for r in report.rows}
        for T in (64, 203):
            assert by[("plain_convattention", T)].attention_elements == by[("baseline", T)].attention_elements
            assert by[("plain_convattention", T)].attention_elements * 16 >= count_attention_elements(T, 1)

    def test_lengths_and_memory(self, report):
        by = {(r.arch, r.T): r for r in report.rows}
        assert by[("plain_convattention", 203)].encoder_length == 203
        assert by[("baseline", 203)].encoder_length == 51
        assert all(r.peak_floats > 0 for r in report.rows)
        assert by[("plain_convattention", 203)].peak_floats > by[("baseline", 203)].peak_floats

    def test_tsv(self, report):
        lines = report.to_tsv().splitlines()
        assert lines[0].split("\t")[:3] == ["arch", "T", "chi"]
        assert len(lines) == 1 + len(report.rows)
        assert isinstance(BenchReport(report.rows).table(), str)
