import gc
import hashlib
import json
import struct
from pathlib import Path

import numpy as np
import pytest

from vbtensor import overlay as vt
from vbtensor.dtypes import DType
from vbtensor.errors import (DeviceError, DTypeError, FormatError, ShapeError,
                             VbtError)
from vbtensor.interop import (ExchangeDescriptor, export_descriptor,
                              import_descriptor, load_safetensors,
                              save_safetensors)
from vbtensor.storage import as_strided

FIXTURES = Path(__file__).parent / "fixtures"
GOLDEN = FIXTURES / "golden_small.safetensors"
GOLDEN_SHA256 = "336f0f901bb608a8f408805f37da2cfb48f56e60d0ceb2b13c756c6c926e448a"


def reference_read_safetensors(path):
    """Independent minimal reader: struct + json, no product code."""
    raw = Path(path).read_bytes()
    (n,) = struct.unpack("<Q", raw[:8])
    header = json.loads(raw[8:8 + n].decode("utf-8"))
    payload = raw[8 + n:]
    np_dtypes = {"F32": "<f4", "F64": "<f8", "I64": "<i8", "I32": "<i4",
                 "BOOL": "|b1"}
    out = {}
    meta = {}
    for name, info in header.items():
        if name == "__metadata__":
            meta = info
            continue
        b, e = info["data_offsets"]
        arr = np.frombuffer(payload[b:e], dtype=np_dtypes[info["dtype"]])
        out[name] = arr.reshape(info["shape"])
    return out, meta


class TestExportDescriptor:
    def test_field_mapping_f32(self):
        t = vt.tensor(np.zeros((2, 3), dtype=np.float32), dtype=DType.F32)
        d = export_descriptor(t)
        assert (d.dtype_code, d.dtype_bits, d.lanes) == (2, 32, 1)
        assert d.shape == (2, 3)
        assert d.strides == (3, 1)
        assert d.device_type == 1
        assert d.byte_offset == 0

    def test_bool_mapping(self):
        t = vt.tensor([True, False], dtype=DType.BOOL)
        d = export_descriptor(t)
        assert (d.dtype_code, d.dtype_bits) == (6, 8)

    def test_strided_view_offsets(self):
        base = vt.tensor(np.arange(10.0), dtype=DType.F64)
        view = as_strided(base, [3], [2], 4)
        d = export_descriptor(view)
        assert d.byte_offset == 32
        assert d.strides == (2,)


class TestImportDescriptor:
    def test_round_trip_zero_copy(self):
        t = vt.tensor([[1.0, 2.0], [3.0, 4.0]], dtype=DType.F64)
        imported = import_descriptor(export_descriptor(t))
        assert np.array_equal(imported.numpy(), t.numpy())
        t.ndview()[0, 0] = 42.0  # write-through is visible both ways
        assert imported.ndview()[0, 0] == 42.0
        assert imported.version.value == 0  # fresh counter for the new family

    def test_foreign_column_major_buffer(self):
        buf = np.arange(4, dtype=np.float64).tobytes()
        arr = np.frombuffer(bytearray(buf), dtype=np.uint8)
        fired = []
        d = ExchangeDescriptor(
            data=arr, byte_offset=0, device_type=1, device_id=0, ndim=2,
            dtype_code=2, dtype_bits=64, shape=(2, 2), strides=(1, 2),
            deleter=lambda: fired.append(1))
        t = import_descriptor(d)
        assert np.array_equal(t.numpy(), [[0.0, 2.0], [1.0, 3.0]])

    def test_unknown_device_code(self):
        t = vt.tensor([1.0], dtype=DType.F32)
        d = export_descriptor(t)
        d.device_type = 99
        with pytest.raises(DeviceError):
            import_descriptor(d)

    def test_unknown_dtype_code(self):
        t = vt.tensor([1.0], dtype=DType.F32)
        d = export_descriptor(t)
        d.dtype_bits = 16
        with pytest.raises(DTypeError):
            import_descriptor(d)

    def test_negative_strides_rejected(self):
        t = vt.tensor([1.0, 2.0], dtype=DType.F32)
        d = export_descriptor(t)
        d.strides = (-1,)
        with pytest.raises(ShapeError):
            import_descriptor(d)

    def test_double_import_rejected(self):
        t = vt.tensor([1.0], dtype=DType.F32)
        d = export_descriptor(t)
        import_descriptor(d)
        with pytest.raises(VbtError, match="already imported"):
            import_descriptor(d)


class TestDeleterLifetime:
    def test_deleter_after_last_import_drop(self):
        fired = []
        t = vt.tensor([1.0, 2.0], dtype=DType.F64)
        d = export_descriptor(t)
        d.deleter = lambda: fired.append(1)
        imported = import_descriptor(d)
        view = as_strided(imported, [1], [1], 0)
        del d, t
        gc.collect()
        assert fired == []  # imports still alive
        del imported
        gc.collect()
        assert fired == []  # view keeps the family alive
        del view
        gc.collect()
        assert fired == [1]

    def test_unconsumed_descriptor_fires_on_drop(self):
        fired = []
        t = vt.tensor([1.0], dtype=DType.F64)
        d = export_descriptor(t)
        d.deleter = lambda: fired.append(1)
        del d
        gc.collect()
        assert fired == [1]

    def test_deleter_exactly_once_randomized(self):
        rng = np.random.default_rng(0)

        def build(fired):
            t = vt.tensor(rng.standard_normal(4), dtype=DType.F64)
            d = export_descriptor(t)
            d.deleter = lambda: fired.append(1)
            objs = [t, d]
            if rng.random() < 0.8:
                imported = import_descriptor(d)
                objs.append(imported)
                for _ in range(int(rng.integers(0, 3))):
                    objs.append(as_strided(imported, [2], [1], 0))
            return objs

        for trial in range(30):
            fired = []
            objs = build(fired)
            rng.shuffle(objs)
            while objs:
                objs.pop()
                gc.collect()
            assert fired == [1], f"trial {trial}: fired {len(fired)} times"


class TestSafetensorsSave:
    def test_single_f32_payload_bytes(self, tmp_path):
        path = tmp_path / "one.safetensors"
        save_safetensors(path, {"w": vt.tensor([1.0], dtype=DType.F32)})
        raw = path.read_bytes()
        (n,) = struct.unpack("<Q", raw[:8])
        header = json.loads(raw[8:8 + n])
        assert header["w"] == {"dtype": "F32", "shape": [1],
                               "data_offsets": [0, 4]}
        assert raw[8 + n:] == bytes([0x00, 0x00, 0x80, 0x3F])  # IEEE-754 1.0

    def test_empty_map_round_trips(self, tmp_path):
        path = tmp_path / "empty.safetensors"
        save_safetensors(path, {}, metadata={"k": "v"})
        loaded, meta = load_safetensors(path)
        assert loaded == {}
        assert meta == {"k": "v"}

    def test_offsets_contiguous(self, tmp_path):
        path = tmp_path / "two.safetensors"
        save_safetensors(path, {
            "a": vt.tensor([1.0, 2.0], dtype=DType.F32),
            "b": vt.tensor([3.0], dtype=DType.F64),
        })
        raw = path.read_bytes()
        (n,) = struct.unpack("<Q", raw[:8])
        header = json.loads(raw[8:8 + n])
        assert header["a"]["data_offsets"][1] == header["b"]["data_offsets"][0]

    def test_determinism_byte_identical(self, tmp_path):
        tensors = {"x": vt.tensor(np.arange(4.0), dtype=DType.F64),
                   "y": vt.tensor([1], dtype=DType.I32)}
        p1, p2 = tmp_path / "a.st", tmp_path / "b.st"
        save_safetensors(p1, tensors, metadata={"m": "1"})
        save_safetensors(p2, tensors, metadata={"m": "1"})
        assert p1.read_bytes() == p2.read_bytes()

    def test_virt_tensor_rejected(self, fresh_runtime, tmp_path):
        t = vt.tensor([1.0], dtype=DType.F32, device=vt.device("virt:0"))
        with pytest.raises(DeviceError):
            save_safetensors(tmp_path / "x.st", {"t": t})

    def test_noncontiguous_made_contiguous(self, tmp_path):
        base = vt.tensor(np.arange(6.0).reshape(2, 3), dtype=DType.F64)
        tr = vt.transpose(base, 0, 1)
        path = tmp_path / "t.st"
        save_safetensors(path, {"t": tr})
        loaded, _ = load_safetensors(path)
        assert np.array_equal(loaded["t"].numpy(), base.numpy().T)


class TestSafetensorsLoad:
    def test_round_trip_random_f64(self, tmp_path):
        rng = np.random.default_rng(1)
        tensors = {f"t{i}": vt.tensor(rng.standard_normal((3, 2)),
                                      dtype=DType.F64) for i in range(4)}
        p1 = tmp_path / "x.st"
        save_safetensors(p1, tensors)
        loaded, _ = load_safetensors(p1)
        for k in tensors:
            assert np.array_equal(loaded[k].numpy(), tensors[k].numpy())
        p2 = tmp_path / "y.st"
        save_safetensors(p2, loaded)
        assert p1.read_bytes() == p2.read_bytes()  # save . load . save

    def test_truncated_payload(self, tmp_path):
        path = tmp_path / "bad.st"
        save_safetensors(path, {"w": vt.tensor([1.0, 2.0], dtype=DType.F32)})
        raw = path.read_bytes()
        path.write_bytes(raw[:-4])
        with pytest.raises(FormatError):
            load_safetensors(path)

    def test_overlapping_offsets(self, tmp_path):
        header = json.dumps({
            "a": {"dtype": "F32", "shape": [1], "data_offsets": [0, 4]},
            "b": {"dtype": "F32", "shape": [1], "data_offsets": [2, 6]},
        }, separators=(",", ":")).encode()
        path = tmp_path / "ovl.st"
        path.write_bytes(struct.pack("<Q", len(header)) + header + b"\0" * 6)
        with pytest.raises(FormatError, match="overlapping"):
            load_safetensors(path)

    def test_gapped_offsets(self, tmp_path):
        header = json.dumps({
            "a": {"dtype": "F32", "shape": [1], "data_offsets": [0, 4]},
            "b": {"dtype": "F32", "shape": [1], "data_offsets": [8, 12]},
        }, separators=(",", ":")).encode()
        path = tmp_path / "gap.st"
        path.write_bytes(struct.pack("<Q", len(header)) + header + b"\0" * 12)
        with pytest.raises(FormatError, match="gapped"):
            load_safetensors(path)

    def test_malformed_json(self, tmp_path):
        path = tmp_path / "bad.st"
        blob = b"{not json"
        path.write_bytes(struct.pack("<Q", len(blob)) + blob)
        with pytest.raises(FormatError, match="JSON"):
            load_safetensors(path)

    def test_oversized_header_guard(self, tmp_path):
        path = tmp_path / "huge.st"
        path.write_bytes(struct.pack("<Q", 200 << 20) + b"x" * 64)
        with pytest.raises(FormatError, match="guard"):
            load_safetensors(path)

    def test_size_mismatch(self, tmp_path):
        header = json.dumps({
            "a": {"dtype": "F32", "shape": [3], "data_offsets": [0, 4]},
        }, separators=(",", ":")).encode()
        path = tmp_path / "bad.st"
        path.write_bytes(struct.pack("<Q", len(header)) + header + b"\0" * 4)
        with pytest.raises(FormatError, match="require"):
            load_safetensors(path)


GOLDEN_I32 = FIXTURES / "golden_i32.safetensors"
GOLDEN_I32_SHA256 = \
    "5b242c415d62a579cd1673e08daa8eddd6a9e3a88a5ec7229ab5073271aee607"


class TestGoldenFixture:
    def test_fixture_bytes_stable(self):
        assert hashlib.sha256(GOLDEN.read_bytes()).hexdigest() == GOLDEN_SHA256

    def test_i32_fixture_with_empty_tensor(self, tmp_path):
        assert hashlib.sha256(GOLDEN_I32.read_bytes()).hexdigest() \
            == GOLDEN_I32_SHA256
        loaded, _ = load_safetensors(GOLDEN_I32)
        assert loaded["counts"].dtype is DType.I32
        assert np.array_equal(loaded["counts"].numpy(),
                              [[-7, 0], [123456, -1]])
        assert loaded["empty"].sizes == (0, 4)
        out = tmp_path / "resave.st"
        save_safetensors(out, loaded)
        assert out.read_bytes() == GOLDEN_I32.read_bytes()

    def test_fixture_loads_and_resaves_identically(self, tmp_path):
        loaded, meta = load_safetensors(GOLDEN)
        assert meta == {"purpose": "golden fixture", "version": "1"}
        assert np.array_equal(loaded["w"].numpy(), [1.0])
        assert np.array_equal(loaded["mat"].numpy(),
                              np.arange(6, dtype=np.int64).reshape(2, 3))
        assert np.array_equal(loaded["mask"].numpy(), [True, False, True])
        assert loaded["scalar"].numpy()[()] == 2.5
        out = tmp_path / "roundtrip.st"
        save_safetensors(out, loaded, metadata=meta)
        assert out.read_bytes() == GOLDEN.read_bytes()

    def test_independent_reference_reader_agrees(self, tmp_path):
        ref, meta = reference_read_safetensors(GOLDEN)
        loaded, _ = load_safetensors(GOLDEN)
        assert set(ref.keys()) == set(loaded.keys())
        for k in ref:
            assert np.array_equal(ref[k], loaded[k].numpy())

        rng = np.random.default_rng(9)
        tensors = {"p": vt.tensor(rng.standard_normal((4, 4)), dtype=DType.F64)}
        path = tmp_path / "fresh.st"
        save_safetensors(path, tensors)
        ref2, _ = reference_read_safetensors(path)
        assert np.array_equal(ref2["p"], tensors["p"].numpy())
