import math

import numpy as np
import pytest

from shiftnn.errors import ConfigError
from shiftnn.quant import (
    ExponentRange,
    dequantize,
    effective_k,
    quantize_filter,
    quantize_layer,
    round_pow2,
    ungated_residual_trace,
)

WIDE = ExponentRange.widest(8)  # exponents [2, 8]... wide enough for unit inputs?


def oracle_round(x, rng):
    """Straight log-domain rounding, written independently of round_pow2."""
    if abs(x) < 2.0 ** (rng.e_min - 1):
        return 0.0
    e = math.floor(math.log2(abs(x)) + 0.5)
    e = min(max(e, rng.e_min), rng.e_max)
    return math.copysign(2.0**e, x)


@pytest.fixture
def wide():
    return ExponentRange(e_max=20, e_min=-40, code_bits=8)


class TestExponentRange:
    def test_widest_window_is_full(self):
        r = ExponentRange.widest(0, code_bits=4)
        assert (r.e_min, r.e_max) == (-6, 0)
        assert r.num_exponents + 1 == 2**3

    def test_rejects_overfull_window(self):
        with pytest.raises(ConfigError):
            ExponentRange(e_max=0, e_min=-7, code_bits=4)

    def test_rejects_inverted_window(self):
        with pytest.raises(ConfigError):
            ExponentRange(e_max=0, e_min=0, code_bits=4)

    def test_for_weights_uses_peak_magnitude(self):
        r = ExponentRange.for_weights(np.array([0.1, -0.9]))
        assert r.e_max == 0  # log2(0.9) ~ -0.15 rounds to 0
        r = ExponentRange.for_weights(np.array([3.0]))
        assert r.e_max == 2  # log2(3) ~ 1.58 rounds up


class TestRoundPow2:
    def test_exact_power(self, wide):
        assert round_pow2(np.float64(1.0), wide).item() == (1, 0, False)

    def test_log_domain_rounding(self, wide):
        # log2(0.75) ~ -0.415 -> exponent 0, not -1
        assert round_pow2(np.float64(0.75), wide).item() == (1, 0, False)
        # log2(0.3) ~ -1.737 -> exponent -2
        assert round_pow2(np.float64(-0.3), wide).item() == (-1, -2, False)

    def test_zero_and_underflow(self, wide):
        assert round_pow2(np.float64(0.0), wide).item()[2] is True
        tiny = 2.0 ** (wide.e_min - 1) * 0.999
        assert round_pow2(np.float64(tiny), wide).item()[2] is True
        at_threshold = 2.0 ** (wide.e_min - 1)
        sign, exp, zero = round_pow2(np.float64(at_threshold), wide).item()
        assert not zero and exp == wide.e_min

    def test_clamps_to_range(self):
        r = ExponentRange(e_max=2, e_min=-2, code_bits=4)
        assert round_pow2(np.float64(100.0), r).item() == (1, 2, False)
        # log2(0.13) ~ -2.94 rounds to -3, clamped up to e_min
        assert round_pow2(np.float64(0.13), r).item() == (1, -2, False)
        # below 2^(e_min - 1) = 0.125 the value underflows to the zero code
        assert round_pow2(np.float64(0.11), r).item()[2] is True

    def test_matches_oracle_on_random_scalars(self, wide):
        xs = np.random.default_rng(7).uniform(-4, 4, size=2000)
        got = round_pow2(xs, wide).decode()
        want = np.array([oracle_round(x, wide) for x in xs])
        assert np.array_equal(got, want)

    def test_relative_error_bound(self, wide):
        # |x - R(x)| <= (sqrt(2)-1)|x| when no clamping occurs
        xs = np.random.default_rng(8).uniform(-8, 8, size=5000)
        xs = xs[np.abs(xs) > 2.0 ** (wide.e_min + 1)]
        err = np.abs(xs - round_pow2(xs, wide).decode())
        assert (err <= (np.sqrt(2) - 1) * np.abs(xs) + 1e-15).all()


class TestQuantizeFilter:
    def test_all_zero_filter(self, wide):
        qf, _ = quantize_filter(np.zeros(5), [0.0, 0.0], 2, wide)
        assert qf.k_i == 0
        assert np.array_equal(qf.dequantize(shape=(5,)), np.zeros(5))

    def test_hand_recursion_both_gates_fire(self, wide):
        # 0.75 -> +2^0, residual -0.25 -> -2^-2, exact afterwards
        qf, trace = quantize_filter(np.array([0.75]), [0.0, 0.0], 2, wide)
        assert qf.k_i == 2
        assert qf.terms[0].item() == (1, 0, False)
        assert qf.terms[1].item() == (-1, -2, False)
        assert qf.dequantize()[0] == 0.75
        assert trace.norms[2] == 0.0

    def test_hand_recursion_second_gate_closed(self, wide):
        # residual norm 0.25 <= 0.3 closes the second gate
        qf, _ = quantize_filter(np.array([0.75]), [0.0, 0.3], 2, wide)
        assert qf.k_i == 1
        assert qf.dequantize()[0] == 1.0

    def test_independent_gates(self, wide):
        # first gate closed by a huge t0, second gate still evaluated on r0
        qf, trace = quantize_filter(np.array([0.75]), [10.0, 0.0], 2, wide)
        assert list(trace.fired[:, 0]) == [False, True]
        assert qf.k_i == 1
        assert qf.dequantize()[0] == 1.0  # term is R(w), not R(w - R(w))

    def test_residual_contraction(self, wide):
        w = np.random.default_rng(3).normal(size=(16, 27)).astype(np.float64)
        _, trace = quantize_layer(w, [-np.inf] * 3, 3, ExponentRange(16, -40, 8))
        norms = trace.norms
        assert (norms[1:] <= norms[:-1] + 1e-12).all()


class TestEffectiveK:
    def test_infinite_thresholds_prune(self, wide):
        assert effective_k(np.array([1.0, 2.0]), [np.inf, np.inf], 2, wide) == 0

    def test_zero_thresholds_spend_all_rounds(self, wide):
        w = np.array([0.3, 0.55])  # not exactly representable in <= 2 terms
        assert effective_k(w, [0.0, 0.0], 2, wide) == 2

    def test_exact_power_uses_one_round(self, wide):
        # residual after round 1 is exactly zero; strict inequality holds it closed
        assert effective_k(np.array([0.5]), [0.0, 0.0], 2, wide) == 1

    def test_gate_monotonicity(self, wide):
        w = np.random.default_rng(5).normal(size=12)
        rng = np.random.default_rng(6)
        for _ in range(50):
            t = rng.uniform(0, 3, size=2)
            bumped = t.copy()
            bumped[rng.integers(2)] += rng.uniform(0, 2)
            assert effective_k(w, bumped, 2, wide) <= effective_k(w, t, 2, wide)


class TestDequantize:
    def test_empty_terms(self, wide):
        qf, _ = quantize_filter(np.zeros(3), [np.inf, np.inf], 2, wide)
        assert np.array_equal(qf.dequantize(shape=(3,)), np.zeros(3))

    def test_direct_sum(self, wide):
        qf, _ = quantize_filter(np.array([0.75]), [0.0, 0.0], 2, wide)
        assert dequantize(qf)[0] == 2.0**0 - 2.0**-2

    def test_roundtrip_on_greedy_representable(self, wide):
        # values built by the greedy rounding order itself quantize back exactly
        gen = np.random.default_rng(11)
        raw = gen.normal(size=(40, 8))
        ql, _ = quantize_layer(raw, [0.0, 0.0], 2, wide)
        w = ql.dequantize()
        ql2, _ = quantize_layer(w, [0.0, 0.0], 2, wide)
        assert np.array_equal(ql2.dequantize(), w)

    def test_exact_representation_of_two_term_sums(self):
        rng = ExponentRange(e_max=4, e_min=-8, code_bits=8)
        gen = np.random.default_rng(13)
        # greedy order: second exponent at least 2 below the first
        e1 = gen.integers(-4, 4, size=200)
        e2 = e1 - gen.integers(2, 5, size=200)
        s1 = gen.choice([-1.0, 1.0], size=200)
        s2 = gen.choice([-1.0, 1.0], size=200)
        w = (s1 * np.exp2(e1) + s2 * np.exp2(e2)).reshape(-1, 1)
        ql, _ = quantize_layer(w, [0.0, 0.0], 2, rng)
        assert np.array_equal(ql.dequantize().ravel(), w.ravel())


class TestSpecialCases:
    def test_all_inf_thresholds_is_pruning(self, wide):
        w = np.random.default_rng(17).normal(size=(6, 9))
        ql, _ = quantize_layer(w, [np.inf, np.inf], 2, wide)
        assert np.array_equal(ql.k_i, np.zeros(6, dtype=np.int8))
        assert np.array_equal(ql.dequantize(), np.zeros_like(w))

    def test_neg_inf_thresholds_match_unconditional_recursion(self, wide):
        # Q_k(w) = Q_{k-1}(w) + Q_1(w - Q_{k-1}(w)), all gates forced open
        w = np.random.default_rng(19).normal(size=(5, 7))
        ql, _ = quantize_layer(w, [-np.inf, -np.inf], 2, wide)

        def q1(x):
            return np.vectorize(lambda v: oracle_round(v, wide))(x)

        qk = q1(w)
        qk = qk + q1(w - qk)
        assert np.array_equal(ql.dequantize(), qk)
        assert (ql.k_i == 2).all()

    def test_ungated_trace_matches_neg_inf(self, wide):
        w = np.random.default_rng(23).normal(size=(4, 6))
        tr = ungated_residual_trace(w, 2, wide)
        _, tr2 = quantize_layer(w, [-np.inf, -np.inf], 2, wide)
        assert np.array_equal(tr.residuals, tr2.residuals)
        assert tr.fired.all()
