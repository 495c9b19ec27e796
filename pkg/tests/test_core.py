import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wbmark.core import (BitString, LatentSpaceSpec, VerificationResult, ber,
                         bce_distance, compose_global_loss, decide_ownership,
                         derive_rng, derive_seed, hard_threshold, mse_distance,
                         verify_payload)
from wbmark.errors import InputError

bits_strategy = st.lists(st.integers(0, 1), min_size=1, max_size=64)


class TestBitString:
    def test_round_trip_text(self):
        b = BitString.from01("100101")
        assert b.to01() == "100101"
        assert len(b) == 6

    def test_rejects_non_binary(self):
        with pytest.raises(InputError):
            BitString([0, 2, 1])
        with pytest.raises(InputError):
            BitString([])
        with pytest.raises(InputError):
            BitString.from01("01x0")

    def test_immutable(self):
        b = BitString([1, 0])
        with pytest.raises(ValueError):
            b.bits[0] = 0

    def test_random_deterministic(self):
        a = BitString.random(32, np.random.default_rng(5))
        b = BitString.random(32, np.random.default_rng(5))
        assert a == b


class TestBer:
    def test_identity(self):
        assert ber(BitString.from01("1010"), BitString.from01("1010")) == 0.0

    def test_full_complement(self):
        assert ber(BitString.from01("0000"), BitString.from01("1111")) == 1.0

    def test_one_of_four(self):
        assert ber(BitString.from01("1010"), BitString.from01("1000")) == 0.25

    def test_length_mismatch(self):
        with pytest.raises(InputError):
            ber(BitString.from01("10"), BitString.from01("100"))

    @given(bits_strategy, st.randoms())
    @settings(max_examples=50, deadline=None)
    def test_symmetric_and_bounded(self, bits, rnd):
        a = BitString(bits)
        other = BitString([rnd.randint(0, 1) for _ in bits])
        assert ber(a, other) == ber(other, a)
        k = round(ber(a, other) * len(a))
        assert math.isclose(ber(a, other), k / len(a))

    @given(bits_strategy)
    @settings(max_examples=50, deadline=None)
    def test_self_zero_complement_one(self, bits):
        a = BitString(bits)
        assert ber(a, a) == 0.0
        assert ber(a, a.complement()) == 1.0

    def test_random_reads_as_noise(self):
        # uniformly random 256-bit strings against a fixed payload
        rng = np.random.default_rng(123)
        fixed = BitString.random(256, rng)
        for _ in range(20):
            r = BitString.random(256, rng)
            assert 0.35 <= ber(r, fixed) <= 0.65


class TestHardThreshold:
    def test_basic(self):
        assert hard_threshold([0.73, 0.12]).to01() == "10"

    def test_tie_goes_to_one(self):
        assert hard_threshold([0.5]).to01() == "1"

    def test_just_below(self):
        assert hard_threshold([0.49999]).to01() == "0"

    def test_rejects_out_of_range(self):
        with pytest.raises(InputError):
            hard_threshold([1.2])
        with pytest.raises(InputError):
            hard_threshold([-0.1, 0.5])

    @given(bits_strategy)
    @settings(max_examples=50, deadline=None)
    def test_idempotent_on_binary(self, bits):
        once = hard_threshold(bits)
        again = hard_threshold(once.bits)
        assert once == again == BitString(bits)


class TestBceDistance:
    def test_maximal_uncertainty(self):
        got = bce_distance([0.5, 0.5], BitString.from01("10"))
        assert got == pytest.approx(2 * math.log(2), rel=1e-12)

    def test_exact_prediction_near_zero(self):
        assert bce_distance([1.0, 0.0], BitString.from01("10")) < 1e-5

    def test_high_precision_oracle(self):
        # -ln(0.9) computed independently at 50 digits
        expected = 0.10536051565782630122750098083931279830612037298327
        assert bce_distance([0.9], BitString.from01("1")) == pytest.approx(
            expected, rel=1e-9)

    def test_length_mismatch(self):
        with pytest.raises(InputError):
            bce_distance([0.5], BitString.from01("10"))

    @given(st.lists(st.floats(0.0, 1.0), min_size=1, max_size=16), st.randoms())
    @settings(max_examples=50, deadline=None)
    def test_nonnegative(self, preds, rnd):
        target = BitString([rnd.randint(0, 1) for _ in preds])
        assert bce_distance(preds, target) >= 0.0

    def test_strictly_decreasing_toward_target(self):
        target = BitString.from01("1")
        values = [bce_distance([p], target) for p in (0.1, 0.3, 0.5, 0.7, 0.9)]
        assert all(a > b for a, b in zip(values, values[1:]))


class TestMseDistance:
    def test_zero(self):
        assert mse_distance([1.0, 1.0], [1.0, 1.0]) == 0.0

    def test_constant_offset(self):
        assert mse_distance([0.0, 0.0], [2.0, 2.0]) == 4.0

    def test_hand_oracle(self):
        assert mse_distance([0.1, 0.3], [0.2, 0.1]) == pytest.approx(0.025, rel=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(InputError):
            mse_distance([1.0], [1.0, 2.0])


class TestGlobalLoss:
    @pytest.mark.parametrize("task,wat,lam,expected", [
        (1.0, 2.0, 0.0, 1.0),
        (1.0, 2.0, 1.0, 3.0),
        (0.5, 0.25, 2.0, 1.0),
    ])
    def test_examples(self, task, wat, lam, expected):
        assert compose_global_loss(task, wat, lam) == expected

    @given(st.floats(-10, 10), st.floats(0, 10))
    @settings(max_examples=50, deadline=None)
    def test_lambda_zero_is_task_loss(self, task, wat):
        assert compose_global_loss(task, wat, 0.0) == task


class TestOwnership:
    @pytest.mark.parametrize("rate,thr,expected", [
        (0.0, 0.0, True), (0.25, 0.0, False), (0.05, 0.1, True)])
    def test_examples(self, rate, thr, expected):
        assert decide_ownership(rate, thr) is expected

    def test_verify_payload(self):
        res = verify_payload(BitString.from01("1010"), BitString.from01("1010"))
        assert isinstance(res, VerificationResult)
        assert res.matched and res.ber == 0.0

    def test_verification_result_invariants(self):
        with pytest.raises(InputError):
            VerificationResult(ber=1.5, extracted=BitString.from01("1"),
                               matched=False, threshold=0.0)


class TestLatentSpec:
    def test_rejects_bad_std(self):
        with pytest.raises(InputError):
            LatentSpaceSpec(0.0, 0.0, (1, 28, 28))

    def test_rejects_bad_shape(self):
        with pytest.raises(InputError):
            LatentSpaceSpec(0.0, 1.0, ())


class TestSeedDerivation:
    def test_stable(self):
        assert derive_seed(42, "rep", 3) == derive_seed(42, "rep", 3)

    def test_tag_sensitivity(self):
        seen = {derive_seed(42), derive_seed(42, "a"), derive_seed(42, "b"),
                derive_seed(43), derive_seed(42, "a", 0), derive_seed(42, "a", 1)}
        assert len(seen) == 6

    def test_rng_reproducible(self):
        a = derive_rng(7, "x").standard_normal(4)
        b = derive_rng(7, "x").standard_normal(4)
        assert np.array_equal(a, b)
