import csv

import numpy as np
import pytest

from scalefuse.pyramid import TokenSequence
from scalefuse.selection import (
    ScoreMatrix,
    ScorerMLP,
    export_selection_maps,
    gumbel_sample,
    score,
    selected_flags,
    topk_select,
)
from scalefuse.tensor import ConfigurationError, Tensor


def make_seq(L=20, D=8, seed=0):
    rng = np.random.default_rng(seed)
    prov = np.stack([np.ones(L), np.arange(L), np.zeros(L)], axis=1).astype(np.int64)
    return TokenSequence(
        tokens=Tensor(rng.normal(size=(L, D))),
        provenance=prov,
        lengths=[L, 0, 0, 0],
        level_shapes=[(L, 1), (0, 0), (0, 0), (0, 0)],
    )


def make_scores(P):
    P = np.asarray(P, dtype=np.float64)
    seq = make_seq(L=P.shape[0])
    return ScoreMatrix(P=Tensor(P, requires_grad=True), produced_from=seq)


class TestScore:
    def test_equal_logits_give_half(self):
        seq = make_seq()
        mlp = ScorerMLP.create(8, np.random.default_rng(0))
        mlp.w2.data[...] = 0.0
        mlp.b2.data[...] = 0.0
        sm = score(seq, mlp)
        assert np.allclose(sm.P.data, 0.5, atol=1e-15)

    def test_saturated_keep_logit(self):
        seq = make_seq()
        mlp = ScorerMLP.create(8, np.random.default_rng(0))
        mlp.w2.data[...] = 0.0
        mlp.b2.data[...] = 0.0
        mlp.b2.data[0::2] = 1000.0  # keep logits
        sm = score(seq, mlp)
        assert np.all(sm.P.data > 1 - 1e-12)

    def test_matches_scalar_softmax_oracle(self):
        seq = make_seq(L=12, D=8, seed=3)
        mlp = ScorerMLP.create(8, np.random.default_rng(4))
        sm = score(seq, mlp)

        # independent scalar recomputation of each keep/drop pair
        import math

        x = seq.tokens.data
        h = x @ mlp.w1.data + mlp.b1.data
        from scipy.special import erf

        h = h * 0.5 * (1 + erf(h / math.sqrt(2)))
        logits = h @ mlp.w2.data + mlp.b2.data
        for j in range(12):
            for i in range(4):
                k, d = logits[j, 2 * i], logits[j, 2 * i + 1]
                m = max(k, d)
                pk = math.exp(k - m) / (math.exp(k - m) + math.exp(d - m))
                assert abs(sm.P.data[j, i] - pk) < 1e-12
                assert abs((1 - sm.P.data[j, i]) - (1 - pk)) < 1e-12

    def test_entries_in_unit_interval(self):
        seq = make_seq(L=50, seed=9)
        sm = score(seq, ScorerMLP.create(8, np.random.default_rng(10)))
        assert np.all(sm.P.data > 0) and np.all(sm.P.data < 1)

    def test_permutation_equivariance(self):
        seq = make_seq(L=15, seed=6)
        mlp = ScorerMLP.create(8, np.random.default_rng(7))
        base = score(seq, mlp).P.data
        perm = np.random.default_rng(8).permutation(15)
        seq2 = make_seq(L=15, seed=6)
        seq2.tokens.data[...] = seq.tokens.data[perm]
        assert np.allclose(score(seq2, mlp).P.data, base[perm], atol=1e-13)


class TestGumbel:
    def test_saturated_probability_keeps(self):
        sm = make_scores(np.ones((30, 4)))
        d = gumbel_sample(sm, 1.0, rng=np.random.default_rng(0))
        assert np.all(d.Q.data == 1.0)

    def test_temperature_must_be_positive(self):
        with pytest.raises(ConfigurationError):
            gumbel_sample(make_scores(np.full((4, 4), 0.5)), 0.0, rng=np.random.default_rng(0))

    def test_hard_decisions_exactly_binary(self):
        sm = make_scores(np.random.default_rng(1).uniform(0.05, 0.95, size=(40, 4)))
        d = gumbel_sample(sm, 1.0, rng=np.random.default_rng(2))
        assert set(np.unique(d.Q.data)) <= {0.0, 1.0}

    def test_seeded_bit_reproducibility(self):
        sm = make_scores(np.random.default_rng(3).uniform(0.2, 0.8, size=(25, 4)))
        d1 = gumbel_sample(sm, 1.0, rng=np.random.default_rng(42))
        d2 = gumbel_sample(sm, 1.0, rng=np.random.default_rng(42))
        assert np.array_equal(d1.Q.data, d2.Q.data)
        assert np.array_equal(d1.soft.data, d2.soft.data)

    def test_monte_carlo_keep_frequency(self):
        # empirical keep rate of Q must track P at tau=1.0
        n = 10_000
        p = 0.7
        sm = make_scores(np.full((n, 4), p))
        d = gumbel_sample(sm, 1.0, rng=np.random.default_rng(5))
        freq = d.Q.data.mean(axis=0)
        assert np.all(np.abs(freq - p) < 0.02)

    def test_keep_frequency_three_sigma_band(self):
        rng = np.random.default_rng(11)
        P = rng.uniform(0.1, 0.9, size=(6, 4))
        n = 4000
        hits = 0
        total = 0
        for rep in range(n):
            d = gumbel_sample(make_scores(P), 1.0, rng=np.random.default_rng(1000 + rep))
            hits += d.Q.data
            total += 1
        freq = hits / total
        band = 3 * np.sqrt(P * (1 - P) / n)
        assert (np.abs(freq - P) < band).mean() >= 0.99

    def test_straight_through_gradient_alive(self):
        seq = make_seq(L=16, seed=12)
        seq.tokens.requires_grad = True
        mlp = ScorerMLP.create(8, np.random.default_rng(13))
        sm = score(seq, mlp)
        d = gumbel_sample(sm, 1.0, rng=np.random.default_rng(14))
        d.Q.sum().backward()
        assert mlp.w2.grad is not None and np.any(mlp.w2.grad != 0)


class TestTopK:
    def test_rho_one_all_indices_ascending(self):
        sm = make_scores(np.random.default_rng(15).uniform(size=(9, 4)))
        d = topk_select(sm, 1.0)
        for idx in d.topk:
            assert idx.tolist() == list(range(9))

    def test_tie_broken_by_lower_index(self):
        P = np.full((4, 4), 0.1)
        P[:, 0] = [0.9, 0.1, 0.5, 0.5]
        d = topk_select(make_scores(P), 0.5)
        assert set(d.topk[0].tolist()) == {0, 2}

    def test_matches_full_sort_oracle(self):
        rng = np.random.default_rng(16)
        P = rng.uniform(size=(37, 4))
        rho = 0.4
        d = topk_select(make_scores(P), rho)
        k = int(np.ceil(rho * 37))
        for i in range(4):
            ranked = sorted(range(37), key=lambda j: (-P[j, i], j))
            assert set(d.topk[i].tolist()) == set(ranked[:k])
            assert len(d.topk[i]) == k

    def test_rank_invariance_under_monotone_transform(self):
        rng = np.random.default_rng(17)
        P = rng.uniform(0.05, 0.95, size=(23, 4))
        d1 = topk_select(make_scores(P), 0.3)
        d2 = topk_select(make_scores(np.sqrt(P) * 0.9), 0.3)
        for a, b in zip(d1.topk, d2.topk):
            assert np.array_equal(a, b)

    def test_rho_out_of_range(self):
        sm = make_scores(np.full((4, 4), 0.5))
        for rho in (0.0, -0.1, 1.5):
            with pytest.raises(ConfigurationError):
                topk_select(sm, rho)


class TestExports:
    def test_csv_and_pgm_outputs(self, tmp_path):
        rng = np.random.default_rng(18)
        L, D = 8, 8
        seq = make_seq(L=L, D=D, seed=19)
        sm = score(seq, ScorerMLP.create(D, rng))
        d = topk_select(sm, 0.5)
        files = export_selection_maps(tmp_path, seq, sm, d)
        assert len(files) == 4 * (1 + 4)

        with open(tmp_path / "selection_q1.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == L
        assert sum(int(r["selected"]) for r in rows) == int(np.ceil(0.5 * L))

        pgm = (tmp_path / "selection_q1_s1.pgm").read_bytes()
        assert pgm.startswith(b"P5\n1 8\n255\n")
        assert len(pgm) == len(b"P5\n1 8\n255\n") + L
        payload = np.frombuffer(pgm[len(b"P5\n1 8\n255\n"):], dtype=np.uint8)
        assert np.array_equal(payload, np.rint(sm.P.data[:, 0] * 255).astype(np.uint8))

    def test_selected_flags_training_mode(self):
        sm = make_scores(np.random.default_rng(20).uniform(size=(10, 4)))
        d = gumbel_sample(sm, 1.0, rng=np.random.default_rng(21))
        flags = selected_flags(d, 1, 10)
        assert np.array_equal(flags, d.Q.data[:, 0] > 0.5)
