import struct

import numpy as np
import pytest

from mmalign.encoders import (
    EncoderConfig,
    FeatureFormatError,
    FeatureMatrix,
    MediaRef,
    encode,
    load_features,
    mock_encode_audio,
    mock_encode_image,
    save_features,
)
from mmalign.minicore import FrozenTensorError


@pytest.fixture
def media(tmp_path):
    a = tmp_path / "a.jpg"
    a.write_bytes(b"\x89PNG fake image bytes 0001")
    b = tmp_path / "b.jpg"
    b.write_bytes(b"\x89PNG fake image bytes 0002")
    return a, b


def test_image_encoding_is_deterministic(media):
    cfg = EncoderConfig()
    ref = MediaRef(str(media[0]), "image")
    assert mock_encode_image(ref, cfg) == mock_encode_image(ref, cfg)


def test_one_byte_difference_changes_features(media):
    cfg = EncoderConfig()
    fa = mock_encode_image(MediaRef(str(media[0]), "image"), cfg)
    fb = mock_encode_image(MediaRef(str(media[1]), "image"), cfg)
    assert fa != fb


def test_image_shape_follows_config(media):
    m = mock_encode_image(MediaRef(str(media[0]), "image"), EncoderConfig(image_positions=16, image_dim=32))
    assert m.shape == (16, 32)


def test_audio_default_has_1500_rows(media):
    m = mock_encode_audio(MediaRef(str(media[0]), "audio"), EncoderConfig(audio_dim=24))
    assert m.shape == (1500, 24)
    assert m == mock_encode_audio(MediaRef(str(media[0]), "audio"), EncoderConfig(audio_dim=24))


def test_salt_changes_features(media):
    ref = MediaRef(str(media[0]), "image")
    assert mock_encode_image(ref, EncoderConfig()) != mock_encode_image(ref, EncoderConfig(content_seed_salt="x"))


def test_missing_file_is_io_error(tmp_path):
    with pytest.raises(OSError, match="nope.jpg"):
        mock_encode_image(MediaRef(str(tmp_path / "nope.jpg"), "image"), EncoderConfig())


def test_features_are_frozen(media):
    m = mock_encode_image(MediaRef(str(media[0]), "image"), EncoderConfig())
    with pytest.raises(ValueError):
        m.values[0, 0] = 1.0
    t = m.as_tensor()
    with pytest.raises(FrozenTensorError):
        t.requires_grad = True


def test_placeholder_encodes_to_zeros():
    cfg = EncoderConfig(audio_positions=100, audio_dim=4)
    m = encode(MediaRef("", "audio", placeholder=True), cfg)
    assert m.shape == (100, 4) and not m.values.any()


def test_round_trip(tmp_path, rng):
    m = FeatureMatrix(rng.normal(size=(7, 5)))
    save_features(m, tmp_path / "f.mmmf")
    back = load_features(tmp_path / "f.mmmf")
    assert back == m
    assert back.values.tobytes() == m.values.tobytes()


def test_encode_reads_feature_files(tmp_path, rng):
    cfg = EncoderConfig(image_positions=3, image_dim=2)
    m = FeatureMatrix(rng.normal(size=(3, 2)))
    save_features(m, tmp_path / "real.mmmf")
    assert encode(MediaRef(str(tmp_path / "real.mmmf"), "image"), cfg) == m


def test_hand_built_file(tmp_path):
    # bytes written out by hand from the layout: magic, version 1, dtype 0,
    # ndim 2, reserved 0, dims 2 and 3, then six little-endian float32 values
    raw = (
        b"MMMF" + bytes([1, 0, 2, 0])
        + (2).to_bytes(4, "little") + (3).to_bytes(4, "little")
        + bytes.fromhex("0000803f" "00000040" "00004040")  # 1.0 2.0 3.0
        + bytes.fromhex("000000bf" "00000000" "0000c842")  # -0.5 0.0 100.0
    )
    (tmp_path / "hand.mmmf").write_bytes(raw)
    m = load_features(tmp_path / "hand.mmmf")
    assert m.shape == (2, 3)
    assert m.values.tolist() == [[1.0, 2.0, 3.0], [-0.5, 0.0, 100.0]]


@pytest.mark.parametrize(
    "mutate, offset",
    [
        (lambda b: b"MMMX" + b[4:], 0),
        (lambda b: b[:4] + bytes([9]) + b[5:], 4),
        (lambda b: b[:-3], None),
        (lambda b: b + b"\x00", None),
        (lambda b: b[:8] + struct.pack("<2I", 0x10000, 0x10000) + b[16:], 12),
    ],
    ids=["magic", "version", "truncated", "trailing", "overflow"],
)
def test_format_errors(tmp_path, mutate, offset):
    good = (tmp_path / "g.mmmf")
    save_features(FeatureMatrix(np.ones((2, 3))), good)
    bad = tmp_path / "bad.mmmf"
    bad.write_bytes(mutate(good.read_bytes()))
    with pytest.raises(FeatureFormatError) as ei:
        load_features(bad)
    if offset is not None:
        assert ei.value.offset == offset
    assert "offset" in str(ei.value)
