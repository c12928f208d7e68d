"""
    The MIT License (MIT)

    Copyright (c) 2023 pkjmesra

    Permission is hereby granted, free of charge, to any person obtaining a copy
    of this software and associated documentation files (the "Software"), to deal
    in the Software without restriction, including without limitation the rights
    to use, copy, modify, merge, publish, distribute, sublicense, and/or sell
    copies of the Software, and to permit persons to whom the Software is
    furnished to do so, subject to the following conditions:

    The above copyright notice and this permission notice shall be included in all
    copies or substantial portions of the Software.

    THE SOFTWARE IS PROVIDED "AS IS", WITHOUT WARRANTY OF ANY KIND, EXPRESS OR
    IMPLIED, INCLUDING BUT NOT LIMITED TO THE WARRANTIES OF MERCHANTABILITY,
    FITNESS FOR A PARTICULAR PURPOSE AND NONINFRINGEMENT. IN NO EVENT SHALL THE
    AUTHORS OR COPYRIGHT HOLDERS BE LIABLE FOR ANY CLAIM, DAMAGES OR OTHER
    LIABILITY, WHETHER IN AN ACTION OF CONTRACT, TORT OR OTHERWISE, ARISING FROM,
    OUT OF OR IN CONNECTION WITH THE SOFTWARE OR THE USE OR OTHER DEALINGS IN THE
    SOFTWARE.
"""

import hashlib
import json
import struct

import numpy as np
import pytest

from PKTaskMerge.classes.Exceptions import (
    CheckpointError,
    DuplicateTensorError,
    MalformedHeaderError,
    TruncatedDataError,
    UnknownTensorError,
    UnsupportedDtypeError,
)
from PKTaskMerge.classes.SafeTensors import (
    Checkpoint,
    CheckpointWriter,
    TypedTensor,
    bf16_bits_to_f32,
    build_header,
    f32_to_bf16_bits,
    layout,
    open_checkpoint,
    read_tensor,
    save_tensors,
    write_checkpoint,
)


def raw_file(header: dict, data: bytes = b"", pad: bytes = b"") -> bytes:
    headerBytes = json.dumps(header).encode("utf-8") + pad
    return struct.pack("<Q", len(headerBytes)) + headerBytes + data


@pytest.fixture
def mixed_checkpoint(tmp_path):
    path = tmp_path / "mixed.safetensors"
    ckpt = Checkpoint.fromTensors(
        [
            TypedTensor("w.f32", "F32", np.arange(6, dtype=np.float32).reshape(2, 3)),
            TypedTensor("w.f16", "F16", np.array([1.0, -2.5, 0.25], dtype=np.float32)),
            TypedTensor("w.bf16", "BF16", np.array([[1.0, 3.0], [-0.5, 8.0]], dtype=np.float32)),
            ("step", "I64", (1,), struct.pack("<q", 42)),
        ],
        metadata={"format": "pt"},
    )
    write_checkpoint(ckpt, str(path))
    return str(path)


def sha(path):
    with open(path, "rb") as f:
        return hashlib.sha256(f.read()).hexdigest()


def test_open_minimal_zero_tensor():
    blob = raw_file({"w": {"dtype": "F32", "shape": [2, 2], "data_offsets": [0, 16]}}, b"\x00" * 16)
    ckpt = open_checkpoint(blob)
    assert ckpt.names() == ["w"]
    assert ckpt.meta("w").shape == (2, 2)
    np.testing.assert_array_equal(ckpt.read_f32("w"), np.zeros((2, 2), dtype=np.float32))


def test_open_truncated_data_region():
    blob = raw_file({"w": {"dtype": "F32", "shape": [4], "data_offsets": [0, 16]}}, b"\x00" * 8)
    with pytest.raises(TruncatedDataError):
        open_checkpoint(blob)


def test_open_rejects_duplicate_names():
    header = b'{"w":{"dtype":"F32","shape":[1],"data_offsets":[0,4]},"w":{"dtype":"F32","shape":[1],"data_offsets":[4,8]}}'
    blob = struct.pack("<Q", len(header)) + header + b"\x00" * 8
    with pytest.raises(DuplicateTensorError):
        open_checkpoint(blob)


@pytest.mark.parametrize(
    "header",
    [
        b"not json",
        b"[1, 2]",
        b'{"w": {"dtype": "F32", "shape": [2], "data_offsets": [0, 4]}}',
        b'{"w": {"dtype": "F32", "shape": [-1], "data_offsets": [0, 4]}}',
        b'{"w": {"dtype": "F32", "shape": [1], "data_offsets": [4, 8]}}',
    ],
)
def test_open_rejects_malformed_headers(header):
    blob = struct.pack("<Q", len(header)) + header + b"\x00" * 8
    with pytest.raises(CheckpointError):
        open_checkpoint(blob)


def test_open_rejects_header_longer_than_file():
    with pytest.raises(MalformedHeaderError):
        open_checkpoint(struct.pack("<Q", 1000) + b"{}")


def test_open_rejects_trailing_bytes():
    blob = raw_file({"w": {"dtype": "F32", "shape": [1], "data_offsets": [0, 4]}}, b"\x00" * 12)
    with pytest.raises(MalformedHeaderError):
        open_checkpoint(blob)


def test_open_missing_file_is_checkpoint_error(tmp_path):
    with pytest.raises(CheckpointError):
        open_checkpoint(str(tmp_path / "nope.safetensors"))


def test_round_trip_is_byte_identical(mixed_checkpoint, tmp_path):
    copy = str(tmp_path / "copy.safetensors")
    write_checkpoint(open_checkpoint(mixed_checkpoint), copy)
    assert sha(copy) == sha(mixed_checkpoint)


def test_round_trip_keeps_foreign_header_bytes(tmp_path):
    # key order and whitespace chosen by another writer survive untouched
    blob = raw_file(
        {"b": {"data_offsets": [0, 4], "dtype": "F32", "shape": [1]}, "__metadata__": {"k": "v"}},
        struct.pack("<f", 2.0),
        pad=b"   ",
    )
    source = tmp_path / "foreign.safetensors"
    source.write_bytes(blob)
    copy = tmp_path / "copy.safetensors"
    write_checkpoint(open_checkpoint(str(source)), str(copy))
    assert copy.read_bytes() == blob


def test_metadata_preserved(mixed_checkpoint):
    assert open_checkpoint(mixed_checkpoint).metadata == {"format": "pt"}


def test_read_tensor_widens_and_records_dtype(mixed_checkpoint):
    ckpt = open_checkpoint(mixed_checkpoint)
    tensor = read_tensor(ckpt, "w.f16")
    assert tensor.dtype == "F16"
    assert tensor.values.dtype == np.float32
    np.testing.assert_array_equal(tensor.values, [1.0, -2.5, 0.25])
    assert read_tensor(ckpt, "w.bf16").values.shape == (2, 2)


def test_read_unknown_name(mixed_checkpoint):
    with pytest.raises(UnknownTensorError):
        read_tensor(open_checkpoint(mixed_checkpoint), "missing")


def test_opaque_dtype_is_pass_through_only(mixed_checkpoint):
    ckpt = open_checkpoint(mixed_checkpoint)
    assert ckpt.read_raw("step") == struct.pack("<q", 42)
    with pytest.raises(UnsupportedDtypeError):
        ckpt.read_f32("step")


def test_reads_are_order_independent(mixed_checkpoint):
    ckpt = open_checkpoint(mixed_checkpoint)
    forward = [ckpt.read_raw(n) for n in ckpt.names()]
    backward = [ckpt.read_raw(n) for n in reversed(ckpt.names())]
    assert forward == list(reversed(backward))
    assert ckpt.read_raw("w.f32") == ckpt.read_raw("w.f32")


def test_bf16_bit_pattern_widening():
    assert bf16_bits_to_f32(np.array([0x3F80], dtype=np.uint16))[0] == np.float32(1.0)


def test_bf16_narrowing_rounds_to_nearest_even():
    # 1 + 2^-8 is exactly halfway between two bf16 values: ties to the even one (1.0)
    halfway = np.array([1.0 + 2.0**-8, 1.0 + 3 * 2.0**-8], dtype=np.float32)
    bits = f32_to_bf16_bits(halfway)
    assert bits[0] == 0x3F80
    assert bits[1] == 0x3F82


def test_bf16_nan_stays_nan():
    bits = f32_to_bf16_bits(np.array([np.nan], dtype=np.float32))
    assert np.isnan(bf16_bits_to_f32(bits))[0]


def test_all_16_bit_patterns_survive_widen_and_narrow():
    patterns = np.arange(0, 1 << 16, dtype=np.uint32).astype(np.uint16)
    f16 = patterns.view(np.float16)
    finite = ~np.isnan(f16)
    widened = f16.astype(np.float32)
    assert np.array_equal(widened.astype(np.float16).view(np.uint16)[finite], patterns[finite])
    bf16 = bf16_bits_to_f32(patterns)
    notNan = ~np.isnan(bf16)
    assert np.array_equal(f32_to_bf16_bits(bf16)[notNan], patterns[notNan])


def test_f16_narrowing_rounds(tmp_path):
    path = str(tmp_path / "f16.safetensors")
    write_checkpoint([TypedTensor("x", "F16", np.array([1.0000001], dtype=np.float32))], path)
    ckpt = open_checkpoint(path)
    assert ckpt.read_raw("x") == np.array([1.0], dtype="<f2").tobytes()


def test_write_then_open_gives_identical_metas(tmp_path):
    path = str(tmp_path / "out.safetensors")
    tensors = [
        TypedTensor("a", "F32", np.ones((3, 4), dtype=np.float32)),
        TypedTensor("b", "BF16", np.zeros((5,), dtype=np.float32)),
    ]
    write_checkpoint(tensors, path)
    ckpt = open_checkpoint(path)
    assert ckpt.metas == layout([("a", "F32", (3, 4)), ("b", "BF16", (5,))])


def test_empty_checkpoint(tmp_path):
    path = str(tmp_path / "empty.safetensors")
    write_checkpoint([], path)
    ckpt = open_checkpoint(path)
    assert len(ckpt) == 0
    assert ckpt.metadata is None


def test_generated_header_is_padded():
    header = build_header(layout([("abc", "F32", (1,))]))
    assert len(header) % 8 == 0
    assert json.loads(header.decode("utf-8"))["abc"]["data_offsets"] == [0, 4]


def test_layout_rejects_duplicates():
    with pytest.raises(DuplicateTensorError):
        layout([("a", "F32", (1,)), ("a", "F32", (2,))])


def test_zero_sized_tensor(tmp_path):
    path = str(tmp_path / "zero.safetensors")
    save_tensors(path, {"empty": np.zeros((0, 3), dtype=np.float32), "one": np.ones(1, dtype=np.float32)})
    ckpt = open_checkpoint(path)
    assert ckpt.read_f32("empty").shape == (0, 3)
    assert ckpt.read_f32("one")[0] == 1.0


def test_writer_buffers_out_of_order_tensors(tmp_path):
    metas = layout([("a", "F32", (2,)), ("b", "F32", (2,)), ("c", "F32", (2,))])
    path = str(tmp_path / "streamed.safetensors")
    with CheckpointWriter(path, metas) as writer:
        writer.write("c", np.array([5, 6], dtype=np.float32))
        writer.write("a", np.array([1, 2], dtype=np.float32))
        writer.write("b", np.array([3, 4], dtype=np.float32))
    ckpt = open_checkpoint(path)
    np.testing.assert_array_equal(ckpt.read_f32("c"), [5, 6])
    np.testing.assert_array_equal(ckpt.read_f32("a"), [1, 2])


def test_writer_fails_on_missing_tensor_and_leaves_nothing(tmp_path):
    metas = layout([("a", "F32", (1,)), ("b", "F32", (1,))])
    path = tmp_path / "partial.safetensors"
    writer = CheckpointWriter(str(path), metas).open()
    writer.write("a", np.zeros(1, dtype=np.float32))
    with pytest.raises(CheckpointError):
        writer.close()
    assert not path.exists()
    assert not (tmp_path / "partial.safetensors.partial").exists()


def test_writer_rejects_length_mismatch(tmp_path):
    metas = layout([("a", "F32", (2,))])
    with CheckpointWriter(str(tmp_path / "x.safetensors"), metas) as writer:
        with pytest.raises(CheckpointError):
            writer.writeRaw("a", b"\x00" * 4)
        writer.writeRaw("a", b"\x00" * 8)


def test_u8_mask_reads_as_bool(tmp_path):
    path = str(tmp_path / "mask.safetensors")
    save_tensors(path, {"m": np.array([0, 3, 1, 0], dtype=np.uint8)}, dtype="U8")
    np.testing.assert_array_equal(open_checkpoint(path).read_mask("m"), [False, True, True, False])
