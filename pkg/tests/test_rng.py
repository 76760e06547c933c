"""Tests for seeded random streams."""

import numpy as np
import pytest


class TestRng:

    def test_same_seed_same_stream(self):
        from core.rng import make_rng

        a = make_rng(42, "pair", "tumor-0001").random(8)
        b = make_rng(42, "pair", "tumor-0001").random(8)
        assert a.tobytes() == b.tobytes()

    def test_keys_separate_streams(self):
        from core.rng import make_rng

        base = make_rng(42).random(4)
        assert not np.array_equal(base, make_rng(42, "a").random(4))
        assert not np.array_equal(make_rng(42, "a").random(4), make_rng(42, "b").random(4))
        assert not np.array_equal(make_rng(42, 0).random(4), make_rng(42, 1).random(4))

    def test_negative_key_rejected(self):
        from core.rng import make_rng

        with pytest.raises(ValueError):
            make_rng(0, -1)

    def test_glorot_bounds(self):
        from core.rng import conv_fans, glorot_uniform, make_rng

        shape = (16, 8, 3, 3)
        fan_in, fan_out = conv_fans(shape)
        assert (fan_in, fan_out) == (72, 144)
        weights = glorot_uniform(make_rng(0), shape, fan_in, fan_out)
        assert np.abs(weights).max() <= np.sqrt(6.0 / (fan_in + fan_out))
