"""Preprocessing, unit conversion and augmentation contracts."""

import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tokencast.grid import (
    NonFiniteValuesError,
    PreprocessError,
    PreprocessSpec,
    RadarSequence,
    RainRateField,
    ReflectivityField,
    apply_transform,
    augment,
    check_field_invariants,
    clip_and_quantize,
    dbz_to_rainrate,
    derive_seed,
    rainrate_to_dbz,
)

SPEC = PreprocessSpec()


def field(values):
    return ReflectivityField(np.asarray(values, dtype=np.float64))


class TestClipAndQuantize:
    def test_clip_above(self):
        out = clip_and_quantize(field([[61.37]]))
        assert out.values[0, 0] == np.float32(60.0)

    def test_clip_below(self):
        out = clip_and_quantize(field([[-3.2]]))
        assert out.values[0, 0] == np.float32(0.0)

    def test_round_half_away_from_zero_oracle(self):
        # oracle: exact rational arithmetic on the float64 input value
        vals = [23.456, 0.04, 0.06, 12.34999, 59.999, 0.123, 41.05]
        out = clip_and_quantize(field([vals])).values[0]
        for v, got in zip(vals, out):
            exact = Fraction(v)
            expected = math.floor(exact * 10 + Fraction(1, 2)) / 10
            assert got == np.float32(expected), v

    def test_example_value(self):
        assert clip_and_quantize(field([[23.456]])).values[0, 0] == np.float32(23.5)

    def test_rejects_non_finite_with_count(self):
        bad = field([[np.nan, 1.0], [np.inf, 2.0]])
        with pytest.raises(NonFiniteValuesError) as ei:
            clip_and_quantize(bad)
        assert ei.value.count == 2

    @given(
        st.lists(
            st.floats(min_value=-30, max_value=90, allow_nan=False, allow_infinity=False),
            min_size=1,
            max_size=50,
        )
    )
    @settings(max_examples=200, deadline=None)
    def test_idempotent_and_invariants(self, vals):
        once = clip_and_quantize(field([vals]))
        twice = clip_and_quantize(once)
        assert np.array_equal(once.values, twice.values)
        check_field_invariants(once.values)

    @given(
        st.floats(min_value=-10, max_value=70, allow_nan=False),
        st.floats(min_value=-10, max_value=70, allow_nan=False),
    )
    @settings(max_examples=200, deadline=None)
    def test_monotone(self, a, b):
        lo, hi = sorted((a, b))
        out = clip_and_quantize(field([[lo, hi]])).values[0]
        assert out[0] <= out[1]


class TestZRConversion:
    def test_one_mmh_reference(self):
        # Z = 200 * 1.0^1.6 = 200 -> dBZ = 10*log10(200) = 23.0103
        out = dbz_to_rainrate(field([[23.0103]]))
        assert out.values[0, 0] == pytest.approx(1.0, abs=1e-3)

    def test_zero_dbz(self):
        # (1/200)^(1/1.6) by scalar evaluation
        expected = (1.0 / 200.0) ** (1.0 / 1.6)
        out = dbz_to_rainrate(field([[0.0]]))
        assert out.values[0, 0] == pytest.approx(expected, abs=1e-6)
        assert out.values[0, 0] == pytest.approx(0.0365, abs=1e-3)

    def test_inverse_of_rainrate(self):
        assert rainrate_to_dbz(RainRateField(np.array([[1.0]]))).values[0, 0] == pytest.approx(
            10 * math.log10(200.0), abs=1e-3
        )

    def test_zero_rain_floor(self):
        assert rainrate_to_dbz(RainRateField(np.array([[0.0]]))).values[0, 0] == 0.0

    def test_negative_rain_rejected(self):
        with pytest.raises(PreprocessError):
            rainrate_to_dbz(RainRateField(np.array([[-0.1]])))

    def test_60dbz_round_trip(self):
        rain = dbz_to_rainrate(field([[60.0]]))
        back = rainrate_to_dbz(rain)
        assert back.values[0, 0] == pytest.approx(60.0, abs=0.05)

    @given(st.floats(min_value=1e-4, max_value=65.0))
    @settings(max_examples=300, deadline=None)
    def test_mutual_inverse_on_dbz(self, dbz):
        rain = dbz_to_rainrate(field([[dbz]]))
        back = rainrate_to_dbz(rain)
        assert back.values[0, 0] == pytest.approx(dbz, rel=1e-6)

    @given(st.floats(min_value=1e-6, max_value=500.0))
    @settings(max_examples=300, deadline=None)
    def test_mutual_inverse_on_rain(self, r):
        dbz = rainrate_to_dbz(RainRateField(np.array([[r]])))
        back = dbz_to_rainrate(ReflectivityField(dbz.values))
        assert back.values[0, 0] == pytest.approx(r, rel=1e-6)


def _marker_sequence():
    base = np.zeros((3, 4, 4), dtype=np.float32)
    base[:, 0, 0] = 10.0  # corner marker
    base[:, 1, 2] = 20.0
    return RadarSequence(base)


class TestAugment:
    def test_identity_transform(self):
        seq = _marker_sequence()
        out = apply_transform(seq, (0, 0), (4, 4), 0, False)
        assert np.array_equal(out.values, seq.values)

    def test_determinism(self):
        seq = _marker_sequence()
        a = augment(seq, (2, 2), rng_seed=7)
        b = augment(seq, (2, 2), rng_seed=7)
        assert np.array_equal(a.values, b.values)

    def test_double_180_rotation_restores(self):
        seq = _marker_sequence()
        once = apply_transform(seq, (0, 0), (4, 4), 2, False)
        twice = apply_transform(once, (0, 0), (4, 4), 2, False)
        assert np.array_equal(twice.values, seq.values)

    def test_shared_transform_across_frames(self):
        rng = np.random.default_rng(0)
        seq = RadarSequence(rng.uniform(0, 60, size=(4, 8, 8)).astype(np.float32))
        out = augment(seq, (6, 6), rng_seed=3)
        # per-frame transforms would break frame identity relations:
        # recover the transform from frame 0 and check it maps every frame
        match = None
        for oy in range(3):
            for ox in range(3):
                for k in range(4):
                    for flip in (False, True):
                        cand = apply_transform(seq, (oy, ox), (6, 6), k, flip)
                        if np.array_equal(cand.values[0], out.values[0]):
                            match = cand
        assert match is not None
        assert np.array_equal(match.values, out.values)

    def test_crop_larger_than_frame_rejected(self):
        with pytest.raises(ValueError):
            augment(_marker_sequence(), (8, 8), rng_seed=0)

    def test_pure_function_of_inputs(self):
        seq = _marker_sequence()
        outs = {augment(seq, (2, 2), rng_seed=s).values.tobytes() for s in range(10)}
        again = {augment(seq, (2, 2), rng_seed=s).values.tobytes() for s in range(10)}
        assert outs == again


class TestDeriveSeed:
    def test_member_zero_fixed_point(self):
        for seed in (0, 1, 12345):
            for i in (0, 1, 7):
                derived = derive_seed(seed, i)
                assert derive_seed(derived, 0) == derived

    def test_distinct(self):
        seeds = {derive_seed(42, i) for i in range(100)}
        assert len(seeds) == 100
