"""Tests for 16-bit PGM I/O."""

import numpy as np
import pytest


class TestPGM:

    def test_round_trip_within_quantization(self, tmp_path):
        from utils.pgm import MAXVAL, read_pgm, write_pgm

        pixels = np.random.default_rng(0).random((1, 7, 5))
        back = read_pgm(write_pgm(tmp_path / "a.pgm", pixels))

        assert back.shape == (1, 7, 5)
        assert np.abs(back - pixels).max() <= 0.5 / MAXVAL + 1e-15

    def test_zero_image_bytes(self):
        from utils.pgm import encode_pgm

        payload = encode_pgm(np.zeros((2, 3)))
        assert payload == b"P5\n3 2\n65535\n" + bytes(12)

    def test_big_endian_samples(self):
        from utils.pgm import encode_pgm

        payload = encode_pgm(np.array([[1.0]]))
        assert payload.endswith(b"\xff\xff")
        assert encode_pgm(np.array([[256 / 65535]])).endswith(b"\x01\x00")

    def test_header_comments_accepted(self):
        from utils.pgm import decode_pgm

        pixels = decode_pgm(b"P5\n# made by hand\n1 1\n65535\n\x80\x00")
        assert pixels[0, 0, 0] == pytest.approx(0x8000 / 65535)

    def test_rejects_ascii_variant(self):
        from core.exceptions import PGMFormatError
        from utils.pgm import decode_pgm

        with pytest.raises(PGMFormatError) as exc:
            decode_pgm(b"P2\n1 1\n65535\n0\n")
        assert exc.value.error_code == "BAD_MAGIC"

    def test_rejects_8_bit_and_truncated(self):
        from core.exceptions import PGMFormatError
        from utils.pgm import decode_pgm

        with pytest.raises(PGMFormatError):
            decode_pgm(b"P5\n1 1\n255\n\x00")
        with pytest.raises(PGMFormatError) as exc:
            decode_pgm(b"P5\n2 2\n65535\n\x00\x00")
        assert exc.value.error_code == "TRUNCATED"

    def test_missing_file(self, tmp_path):
        from core.exceptions import PGMFormatError
        from utils.pgm import read_pgm

        with pytest.raises(PGMFormatError):
            read_pgm(tmp_path / "absent.pgm")
