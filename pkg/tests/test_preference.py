"""Long-term (BiLSTM, ASVD) and short-term encoders, fusion and batching."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pegcascade import autodiff as ad
from pegcascade.autodiff import finite_difference_check
from pegcascade.preference import (
    ASVDParams,
    ConfigurationError,
    LSTMCell,
    asvd_attention,
    asvd_long_term,
    batch_asvd_long_term,
    batch_bilstm_long_term,
    batch_lstm_short_term,
    bilstm_long_term,
    fuse,
    lstm_short_term,
    with_fallback,
)


def sig(x):
    return 1.0 / (1.0 + np.exp(-x))


def unroll(cell, xs):
    """Plain numpy LSTM, one step at a time, gate order i, f, g, o."""
    d = cell.hidden
    wx, wh, b = cell.w_x.data, cell.w_h.data, cell.b.data
    h, c = np.zeros(d), np.zeros(d)
    hs = []
    for x in xs:
        z = x @ wx + h @ wh + b
        i, f, g, o = sig(z[:d]), sig(z[d : 2 * d]), np.tanh(z[2 * d : 3 * d]), sig(z[3 * d :])
        c = f * c + i * g
        h = o * np.tanh(c)
        hs.append(h)
    return hs


def make(seed=0, k=3, d=4):
    rng = np.random.default_rng(seed)
    fwd, bwd = LSTMCell(k, d, rng, "f"), LSTMCell(k, d, rng, "b")
    for cell in (fwd, bwd):
        cell.b.data[:] = rng.normal(size=4 * d) * 0.3
    return rng, fwd, bwd


class TestBiLSTM:
    def test_single_item(self):
        rng, fwd, bwd = make()
        x = rng.uniform(size=(1, 3))
        out = bilstm_long_term(ad.constant(x), fwd, bwd).data
        np.testing.assert_allclose(out, np.concatenate([unroll(fwd, x)[0], unroll(bwd, x)[0]]), atol=1e-15)

    def test_zero_history_zero_bias_is_zero(self):
        rng, fwd, bwd = make()
        fwd.b.data[:] = 0.0
        bwd.b.data[:] = 0.0
        out = bilstm_long_term(ad.constant(np.zeros((4, 3))), fwd, bwd).data
        np.testing.assert_array_equal(out, np.zeros(8))

    def test_matches_hand_unroll(self):
        rng, fwd, bwd = make(1)
        x = rng.uniform(size=(3, 3))
        hf = unroll(fwd, x)
        hb = unroll(bwd, x[::-1])[::-1]
        expect = np.mean([np.concatenate([a, b]) for a, b in zip(hf, hb)], axis=0)
        np.testing.assert_allclose(bilstm_long_term(ad.constant(x), fwd, bwd).data, expect, rtol=0, atol=1e-12)

    def test_reversal_covariance(self):
        rng, fwd, bwd = make(2)
        x = rng.uniform(size=(5, 3))
        a = bilstm_long_term(ad.constant(x), fwd, bwd).data
        b = bilstm_long_term(ad.constant(x[::-1].copy()), bwd, fwd).data
        np.testing.assert_allclose(np.concatenate([b[4:], b[:4]]), a, atol=1e-14)

    def test_empty_history_rejected(self):
        _, fwd, bwd = make()
        with pytest.raises(ValueError):
            bilstm_long_term(ad.constant(np.zeros((0, 3))), fwd, bwd)


class TestASVD:
    def params(self, seed=0):
        rng = np.random.default_rng(seed)
        p = ASVDParams.init(3, 4, rng)
        p.b_h.data[:] = rng.normal(size=4)
        p.b_x.data[:] = rng.normal(size=1)
        return rng, p

    def test_single_item(self):
        rng, p = self.params()
        x = rng.uniform(size=(1, 3))
        h, alpha = asvd_attention(ad.constant(x), p)
        np.testing.assert_array_equal(alpha.data, [1.0])
        np.testing.assert_array_equal(asvd_long_term(ad.constant(x), p).data, h.data[0])

    def test_repeated_item_uniform(self):
        rng, p = self.params()
        x = np.repeat(rng.uniform(size=(1, 3)), 4, axis=0)
        h, alpha = asvd_attention(ad.constant(x), p)
        np.testing.assert_allclose(alpha.data, 0.25, atol=1e-15)
        np.testing.assert_allclose(asvd_long_term(ad.constant(x), p).data, h.data[0], atol=1e-15)

    def test_matches_literal_formula(self):
        rng, p = self.params(3)
        x = rng.uniform(size=(3, 3))
        h = [sig(x[i] @ p.w_h.data + p.b_h.data) for i in range(3)]
        s = [sig(hi @ p.w_x.data + p.b_x.data[0]) for hi in h]
        a = np.exp(s) / np.sum(np.exp(s))
        expect = sum(ai * hi for ai, hi in zip(a, h))
        np.testing.assert_allclose(asvd_long_term(ad.constant(x), p).data, expect, rtol=0, atol=1e-12)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(1, 12), st.integers(0, 10_000))
    def test_attention_is_a_distribution(self, n, seed):
        rng, p = self.params(seed)
        _, alpha = asvd_attention(ad.constant(rng.uniform(size=(n, 3))), p)
        assert np.all(alpha.data > 0)
        assert abs(alpha.data.sum() - 1.0) < 1e-9


class TestShortTerm:
    def test_window_larger_than_history(self):
        rng, cell, _ = make(4)
        x = rng.uniform(size=(3, 3))
        np.testing.assert_allclose(lstm_short_term(ad.constant(x), 10, cell).data, unroll(cell, x)[-1], atol=1e-15)

    def test_tau_one(self):
        rng, cell, _ = make(5)
        x = rng.uniform(size=(6, 3))
        np.testing.assert_allclose(lstm_short_term(ad.constant(x), 1, cell).data, unroll(cell, x[-1:])[0],
                                   atol=1e-15)

    def test_window_equals_suffix_unroll(self):
        rng, cell, _ = make(6)
        x = rng.uniform(size=(10, 3))
        np.testing.assert_allclose(lstm_short_term(ad.constant(x), 4, cell).data, unroll(cell, x[6:])[-1],
                                   rtol=0, atol=1e-12)

    def test_nonpositive_tau_rejected(self):
        rng, cell, _ = make()
        with pytest.raises(ValueError):
            lstm_short_term(ad.constant(np.ones((2, 3))), 0, cell)


class TestFuse:
    def test_zero_inputs_zero_bias(self):
        out = fuse(ad.constant(np.zeros(3)), ad.constant(np.zeros(2)), ad.constant(np.ones((5, 4))),
                   ad.constant(np.zeros(4)))
        np.testing.assert_array_equal(out.data, np.zeros(4))

    def test_regression_locked(self):
        rng = np.random.default_rng(11)
        w, b = ad.constant(rng.normal(size=(5, 3))), ad.constant(rng.normal(size=3))
        out = fuse(ad.constant([0.1, -0.2, 0.3]), ad.constant([0.5, -0.5]), w, b)
        np.testing.assert_allclose(out.data, [-0.5243428681721011, 1.8548204064068874, 0.3908179641084063],
                                   rtol=0, atol=1e-14)

    def test_width_mismatch_is_configuration_error(self):
        with pytest.raises(ConfigurationError, match="width 5"):
            fuse(ad.constant(np.zeros(3)), ad.constant(np.zeros(2)), ad.constant(np.ones((6, 4))),
                 ad.constant(np.zeros(4)))

    def test_single_part(self):
        out = fuse(None, ad.constant([1.0, 2.0]), ad.constant(np.eye(2)), ad.constant(np.zeros(2)))
        np.testing.assert_array_equal(out.data, [1.0, 2.0])


class TestBatched:
    def setup_method(self):
        rng, self.fwd, self.bwd = make(7)
        self.docs = rng.uniform(size=(12, 3))
        self.seqs = [[0, 1, 2, 3, 4, 5, 6], [7], [], [8, 9, 10, 11]]
        self.asvd = ASVDParams.init(3, 4, rng)

    def test_bilstm_matches_single(self):
        rows = batch_bilstm_long_term(ad.constant(self.docs), self.seqs, self.fwd, self.bwd).data
        for r, s in enumerate(self.seqs):
            if s:
                expect = bilstm_long_term(ad.constant(self.docs[s]), self.fwd, self.bwd).data
                np.testing.assert_allclose(rows[r], expect, atol=1e-14)
            else:
                np.testing.assert_array_equal(rows[r], np.zeros(8))

    def test_asvd_matches_single(self):
        rows = batch_asvd_long_term(ad.constant(self.docs), self.seqs, self.asvd).data
        for r, s in enumerate(self.seqs):
            if s:
                np.testing.assert_allclose(rows[r], asvd_long_term(ad.constant(self.docs[s]), self.asvd).data,
                                           atol=1e-14)

    def test_short_term_matches_single(self):
        rows = batch_lstm_short_term(ad.constant(self.docs), self.seqs, 3, self.fwd).data
        for r, s in enumerate(self.seqs):
            if s:
                np.testing.assert_allclose(rows[r], lstm_short_term(ad.constant(self.docs[s]), 3, self.fwd).data,
                                           atol=1e-14)

    def test_fallback_rows(self):
        rows = ad.constant(np.ones((3, 2)))
        fb = ad.constant([7.0, 8.0])
        out = with_fallback(rows, np.array([True, False, True]), fb).data
        np.testing.assert_array_equal(out, [[1, 1], [7, 8], [1, 1]])


class TestGradients:
    @pytest.mark.parametrize("n", [1, 2, 7])
    def test_all_encoders(self, n):
        rng, fwd, bwd = make(8)
        hist = ad.parameter(rng.uniform(size=(n, 3)))
        p = ASVDParams.init(3, 4, rng)
        w = rng.normal(size=4)
        encoders = [
            (lambda: ad.tsum(bilstm_long_term(hist, fwd, bwd) * ad.constant(np.r_[w, w])),
             [hist, fwd.w_x, fwd.w_h, fwd.b, bwd.w_x, bwd.w_h, bwd.b]),
            (lambda: ad.tsum(asvd_long_term(hist, p) * ad.constant(w)), [hist, p.w_h, p.b_h, p.w_x, p.b_x]),
            (lambda: ad.tsum(lstm_short_term(hist, 5, fwd) * ad.constant(w)), [hist, fwd.w_x, fwd.w_h, fwd.b]),
        ]
        for f, leaves in encoders:
            report = finite_difference_check(f, leaves)
            assert report.passed, str(report)
