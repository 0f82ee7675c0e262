import math

import numpy as np
import pytest

from sparsemetric.apps import (attention_weights, directional_scores, distill_kl, distill_loss,
                               metric_attention, token_alignment_score)
from sparsemetric.metric import MetricConfig, MetricParams, init_identity, score_pair

from conftest import random_params, unit_rows

STRATEGIES = ["maxave", "maxsum", "maxsoft"]


def sdpa(Q, K, V):
    logits = Q @ K.T / math.sqrt(Q.shape[1])
    logits -= logits.max(axis=1, keepdims=True)
    w = np.exp(logits)
    return (w / w.sum(axis=1, keepdims=True)) @ V


class TestAlignment:
    @pytest.mark.parametrize("strategy", STRATEGIES)
    def test_single_tokens(self, rng, strategy):
        p = random_params(rng, MetricConfig("bdiag", 8, 4))
        a, b = unit_rows(rng, 1, 8), unit_rows(rng, 1, 8)
        assert token_alignment_score(a, b, p, strategy) == pytest.approx(score_pair(a[0], b[0], p), abs=1e-12)

    def test_identity_grid(self):
        p = init_identity(MetricConfig("cosine", 3), np.float64)
        E = np.eye(3)
        assert token_alignment_score(E, E, p, "maxave") == 1.0
        assert token_alignment_score(E, E, p, "maxsum") == 3.0

    def test_maxsum_is_T_times_maxave(self, rng):
        p = random_params(rng, MetricConfig("diag", 8))
        A, B = unit_rows(rng, 5, 8), unit_rows(rng, 7, 8)
        ave = directional_scores(A, B, p, "maxave")
        tot = directional_scores(A, B, p, "maxsum")
        assert tot[0] == pytest.approx(7 * ave[0], rel=1e-15)
        assert tot[1] == pytest.approx(5 * ave[1], rel=1e-15)

    def test_soft_flattens_to_average(self, rng):
        p = random_params(rng, MetricConfig("bdiag", 8, 2))
        A, B = unit_rows(rng, 4, 8), unit_rows(rng, 6, 8)
        soft = token_alignment_score(A, B, p, "maxsoft", tau=100.0)
        assert soft == pytest.approx(token_alignment_score(A, B, p, "maxave"), abs=1e-3)

    def test_soft_sharpens_to_max(self, rng):
        p = init_identity(MetricConfig("cosine", 8), np.float64)
        A, B = unit_rows(rng, 4, 8), unit_rows(rng, 6, 8)
        M = A @ B.T
        s1, s2 = directional_scores(A, B, p, "maxsoft", tau=1e-4)
        assert s1 == pytest.approx(M.max(axis=0).max(), abs=1e-6)

    def test_monotone_in_directional_max(self, rng):
        p = init_identity(MetricConfig("cosine", 8), np.float64)
        A, B = unit_rows(rng, 4, 8), unit_rows(rng, 5, 8)
        base = token_alignment_score(A, B, p, "maxave")
        i, j = np.unravel_index(np.argmax(A @ B.T), (4, 5))
        B2 = B.copy()
        B2[j] = B2[j] + 0.5 * A[i]
        assert token_alignment_score(A, B2, p, "maxave") >= base

    def test_empty_rejected(self, rng):
        p = init_identity(MetricConfig("cosine", 8), np.float64)
        with pytest.raises(ValueError):
            token_alignment_score(np.zeros((0, 8)), unit_rows(rng, 2, 8), p)


class TestAttention:
    def test_identity_is_sdpa(self, rng):
        Q, K = unit_rows(rng, 5, 16), unit_rows(rng, 7, 16)
        V = rng.standard_normal((7, 3))
        for cfg in (MetricConfig("diag", 16), MetricConfig("bdiag", 16, 4), MetricConfig("dense", 16)):
            out = metric_attention(Q, K, V, init_identity(cfg, np.float64))
            np.testing.assert_allclose(out, sdpa(Q, K, V), atol=1e-6)

    def test_single_key(self, rng):
        Q, K = unit_rows(rng, 4, 8), unit_rows(rng, 1, 8)
        V = rng.standard_normal((1, 3))
        out = metric_attention(Q, K, V, random_params(rng, MetricConfig("diag", 8)))
        np.testing.assert_allclose(out, np.repeat(V, 4, axis=0))

    def test_rows_sum_to_one(self, rng):
        p = random_params(rng, MetricConfig("bdiag", 8, 2))
        w = attention_weights(unit_rows(rng, 5, 8), unit_rows(rng, 7, 8), p)
        np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-6)

    def test_dominant_channel_shifts_mass(self):
        D = 4
        w = np.ones(D)
        w[0] = 20.0
        p = MetricParams(MetricConfig("diag", D), w)
        q = np.array([[0.6, 0.8, 0.0, 0.0]])
        K = np.array([[1.0, 0, 0, 0], [0, 1.0, 0, 0]])
        V = np.array([[1.0], [0.0]])
        plain = metric_attention(q, K, V, init_identity(p.config, np.float64), temperature=1.0)
        shifted = metric_attention(q, K, V, p, temperature=1.0)
        # oracle: logits q_m * w_m * k_m
        logits = np.array([0.6 * 20.0, 0.8])
        expected = math.exp(logits[0]) / (math.exp(logits[0]) + math.exp(logits[1]))
        assert shifted[0, 0] == pytest.approx(expected, rel=1e-12)
        assert shifted[0, 0] > plain[0, 0]

    def test_shape_mismatch(self, rng):
        with pytest.raises(ValueError):
            metric_attention(unit_rows(rng, 2, 8), unit_rows(rng, 3, 8), np.ones((2, 1)),
                             init_identity(MetricConfig("cosine", 8)))


class TestDistill:
    def test_same_matrices_add_nothing(self, rng):
        S = rng.standard_normal((6, 6))
        assert distill_kl(S, S.copy(), 0.05) == 0.0
        assert distill_loss(S, S, 0.05, task_loss=1.25) == 1.25

    def test_two_by_two_closed_form(self):
        a = 2.0
        sig = math.exp(a) / (math.exp(a) + 1)
        expected = -math.log(2) - 0.5 * math.log(sig * (1 - sig))
        got = distill_loss(np.zeros((2, 2)), a * np.eye(2), tau=1.0, task_loss=0.3)
        assert got == pytest.approx(0.3 + expected, abs=1e-9)

    def test_scale_invariance(self, rng):
        St, Ss = rng.standard_normal((2, 5, 5))
        assert distill_kl(3 * St, 3 * Ss, 0.3) == pytest.approx(distill_kl(St, Ss, 0.1), rel=1e-12)

    def test_positive_when_different(self, rng):
        St, Ss = rng.standard_normal((2, 4, 4))
        assert distill_kl(St, Ss, 0.5) > 0

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            distill_kl(np.eye(2), np.eye(3))
