import hashlib
import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from taskmerge.checkpoint import (
    Checkpoint,
    LoraAdapter,
    bf16_to_f32,
    expand_lora,
    f32_to_bf16,
    materialize_lora,
    parse,
    read_checkpoint,
    serialize,
    validate_compat,
    write_checkpoint,
)
from taskmerge.errors import (
    CheckpointFormatError,
    HeaderError,
    OffsetError,
    ShapeError,
    TruncatedFileError,
    UnknownDtypeError,
)


def _raw(header: dict, data: bytes) -> bytes:
    text = json.dumps(header).encode()
    return struct.pack("<Q", len(text)) + text + data


def _fixture(tag):
    rng = np.random.default_rng(0)
    x = rng.standard_normal((3, 5))
    np_dtype = {"F16": np.float16, "BF16": np.float32, "F32": np.float32, "F64": np.float64}[tag]
    return Checkpoint(
        {"layer.0.weight": x.astype(np_dtype), "layer.0.bias": x[0].astype(np_dtype), "z": np.float64(3.0).astype(np_dtype).reshape(())},
        {"note": "fixture"},
        {"layer.0.weight": tag, "layer.0.bias": tag, "z": tag},
    )


# -- round trips ----------------------------------------------------------


@pytest.mark.parametrize("tag", ["F16", "BF16", "F32", "F64"])
def test_round_trip_bit_exact(tmp_path, tag):
    c = _fixture(tag)
    write_checkpoint(c, tmp_path / "a.safetensors")
    back = read_checkpoint(tmp_path / "a.safetensors")
    assert back == c
    assert back.metadata == {"note": "fixture"}
    assert all(back.dtype_of(k) == tag for k in back)
    write_checkpoint(back, tmp_path / "b.safetensors")
    assert (tmp_path / "a.safetensors").read_bytes() == (tmp_path / "b.safetensors").read_bytes()


def test_float16_raw_bytes_preserved_against_hand_built_file():
    # Oracle: bytes laid out by hand, independently of serialize().
    values = np.array([1.0, -2.5, 65504.0, 6e-8], np.float16)
    raw = _raw({"w": {"dtype": "F16", "shape": [4], "data_offsets": [0, 8]}}, values.tobytes())
    c = parse(raw)
    assert c["w"].tobytes() == values.tobytes()
    parsed_again = parse(serialize(c, align=False))
    assert parsed_again["w"].tobytes() == values.tobytes()


def test_empty_checkpoint(tmp_path):
    write_checkpoint(Checkpoint({}), tmp_path / "e.safetensors")
    assert len(read_checkpoint(tmp_path / "e.safetensors")) == 0


def test_determinism_hash(tmp_path):
    c = _fixture("F32")
    write_checkpoint(c, tmp_path / "1")
    write_checkpoint(Checkpoint(dict(reversed(list(c.items()))), c.metadata), tmp_path / "2")
    h = [hashlib.sha256((tmp_path / n).read_bytes()).hexdigest() for n in "12"]
    assert h[0] == h[1]


def test_offsets_monotone_and_aligned():
    c = Checkpoint({"a": np.ones(3, np.float16), "b": np.ones((2, 3), np.float32), "c": np.ones(1, np.float64)})
    data = serialize(c)
    (n,) = struct.unpack("<Q", data[:8])
    header = json.loads(data[8 : 8 + n])
    assert n % 8 == 0
    offsets = [header[k]["data_offsets"] for k in ("a", "b", "c")]
    assert [o[0] for o in offsets] == sorted(o[0] for o in offsets)
    assert all(o[0] % 8 == 0 for o in offsets)
    for (_, end), (begin, _) in zip(offsets, offsets[1:]):
        assert end <= begin


def test_safetensors_interop(tmp_path):
    safetensors_numpy = pytest.importorskip("safetensors.numpy")
    c = _fixture("F32")
    write_checkpoint(c, tmp_path / "ours", align=False)
    loaded = safetensors_numpy.load_file(str(tmp_path / "ours"))
    for k in c:
        np.testing.assert_array_equal(loaded[k], c[k])
    safetensors_numpy.save_file({"x": np.arange(6, dtype=np.float32).reshape(2, 3)}, str(tmp_path / "theirs"))
    np.testing.assert_array_equal(read_checkpoint(tmp_path / "theirs")["x"], np.arange(6).reshape(2, 3))


def test_checkpoint_is_read_only():
    c = _fixture("F32")
    with pytest.raises(ValueError):
        c["z"][...] = 1.0


# -- bf16 -----------------------------------------------------------------


def _bf16_oracle(x: float) -> int:
    (bits,) = struct.unpack("<I", struct.pack("<f", x))
    if (bits & 0x7F800000) == 0x7F800000 and bits & 0x7FFFFF:
        return (bits >> 16) | 0x40
    lower = bits & 0xFFFF
    upper = bits >> 16
    if lower > 0x8000 or (lower == 0x8000 and upper & 1):
        upper += 1
    return upper & 0xFFFF


@settings(max_examples=300)
@given(st.floats(width=32, allow_nan=False))
def test_bf16_round_to_nearest_even(x):
    got = int(f32_to_bf16(np.array([x], np.float32))[0])
    assert got == _bf16_oracle(x)


def test_bf16_widening_exact():
    raw = np.arange(0, 0x7F80, 97, dtype=np.uint16)
    assert np.array_equal(f32_to_bf16(bf16_to_f32(raw)), raw)


# -- malformed ------------------------------------------------------------


GOOD_HEADER = {"w": {"dtype": "F32", "shape": [2], "data_offsets": [0, 8]}}


@pytest.mark.parametrize(
    "data, error",
    [
        (b"\x01\x02", TruncatedFileError),
        (struct.pack("<Q", 1000) + b"{}", TruncatedFileError),
        (struct.pack("<Q", 5) + b"{nope", HeaderError),
        (struct.pack("<Q", 2) + b"[]", HeaderError),
        (_raw({"w": {"dtype": "I8", "shape": [2], "data_offsets": [0, 2]}}, b"\0\0"), UnknownDtypeError),
        (_raw({"w": {"dtype": "F32", "shape": [3], "data_offsets": [0, 8]}}, b"\0" * 8), OffsetError),
        (_raw(GOOD_HEADER, b"\0" * 4), TruncatedFileError),
        (_raw(GOOD_HEADER, b"\0" * 12), OffsetError),
        (
            _raw(
                {
                    "a": {"dtype": "F32", "shape": [2], "data_offsets": [0, 8]},
                    "b": {"dtype": "F32", "shape": [2], "data_offsets": [4, 12]},
                },
                b"\0" * 12,
            ),
            OffsetError,
        ),
        (_raw({"w": {"dtype": "F32", "shape": [-2], "data_offsets": [0, 8]}}, b"\0" * 8), HeaderError),
        (_raw({"w": {"dtype": "F32", "shape": [2]}}, b"\0" * 8), HeaderError),
    ],
    ids=["short", "header-past-eof", "bad-json", "not-object", "dtype", "size", "data-short", "data-long", "overlap", "neg-shape", "no-offsets"],
)
def test_malformed_rejected(data, error):
    with pytest.raises(error) as info:
        parse(data)
    assert isinstance(info.value, CheckpointFormatError)
    assert "byte" in str(info.value)


def test_valid_hand_built_parses():
    c = parse(_raw(GOOD_HEADER, np.array([1.0, 2.0], np.float32).tobytes()))
    np.testing.assert_array_equal(c["w"], [1.0, 2.0])


# -- LoRA -----------------------------------------------------------------


def test_expand_lora_hand_product():
    out = expand_lora((2, 2), [[3.0, 4.0]], [[1.0], [2.0]], alpha=2.0, r=1)
    np.testing.assert_array_equal(out, [[6, 8], [12, 16]])


def test_expand_lora_zero_adapter():
    out = expand_lora((3, 4), np.zeros((2, 4)), np.ones((3, 2)), alpha=5.0, r=2)
    np.testing.assert_array_equal(out, np.zeros((3, 4)))


def test_expand_lora_alpha_equals_rank():
    rng = np.random.default_rng(2)
    a, b = rng.standard_normal((4, 6)), rng.standard_normal((5, 4))
    np.testing.assert_array_equal(expand_lora((5, 6), a, b, 4.0, 4), b @ a)


@given(st.floats(0.01, 100))
def test_expand_lora_linear_in_alpha(alpha):
    rng = np.random.default_rng(3)
    a, b = rng.standard_normal((2, 6)), rng.standard_normal((5, 2))
    np.testing.assert_allclose(expand_lora((5, 6), a, b, 2 * alpha, 2), 2 * expand_lora((5, 6), a, b, alpha, 2), rtol=1e-6)


def test_expand_lora_shape_mismatch():
    with pytest.raises(ShapeError):
        expand_lora((3, 3), np.zeros((1, 4)), np.zeros((3, 1)), 1.0, 1)


def test_lora_adapter_rank_invariants():
    with pytest.raises(ShapeError):
        LoraAdapter({"w": (np.zeros((3, 2)), np.zeros((2, 3)))}, 1.0, 3)
    with pytest.raises(ShapeError):
        LoraAdapter({"w": (np.zeros((2, 4)), np.zeros((4, 1)))}, 1.0, 2)


def test_materialize_lora_from_checkpoint():
    base = Checkpoint({"proj.weight": np.zeros((2, 2), np.float32), "proj.bias": np.zeros(2, np.float32)})
    ad = Checkpoint(
        {"proj.lora_A.weight": np.array([[3.0, 4.0]], np.float32), "proj.lora_B.weight": np.array([[1.0], [2.0]], np.float32)},
        {"alpha": "2", "rank": "1"},
    )
    tuned = materialize_lora(base, LoraAdapter.from_checkpoint(ad))
    np.testing.assert_array_equal(tuned["proj.weight"], [[6, 8], [12, 16]])
    np.testing.assert_array_equal(tuned["proj.bias"], [0, 0])


def test_lora_missing_metadata():
    ad = Checkpoint({"p.lora_A.weight": np.zeros((1, 2)), "p.lora_B.weight": np.zeros((2, 1))})
    with pytest.raises(CheckpointFormatError):
        LoraAdapter.from_checkpoint(ad)


# -- compatibility --------------------------------------------------------


def test_compat_identical():
    c = _fixture("F32")
    r = validate_compat([c, c])
    assert r.ok and not r.shape_mismatches and not r.dtype_mismatches


def test_compat_missing_key():
    a = Checkpoint({"w1": np.zeros(2), "w2": np.zeros(2)})
    b = Checkpoint({"w1": np.zeros(2)})
    r = validate_compat([a, b])
    assert r.missing[1] == ["w2"] and r.missing[0] == []
    assert r.shared_keys == ["w1"]


def test_compat_shape_mismatch():
    a = Checkpoint({"w": np.zeros((4, 4))})
    b = Checkpoint({"w": np.zeros((4, 5))})
    r = validate_compat([a, b])
    assert r.shape_mismatches == [("w", [(4, 4), (4, 5)])]
    assert r.mergeable_keys == []


def test_compat_needs_two():
    with pytest.raises(ValueError):
        validate_compat([Checkpoint({})])
