import gc

import numpy as np
import pytest

from vbtensor.dtypes import DType, HOST
from vbtensor.errors import ShapeError
from vbtensor.storage import (Tensor, as_strided, bump_version,
                              is_contiguous, make_tensor)
from vbtensor import overlay as vt

from oracles.gather import contiguous_strides_oracle, gather


class TestMakeTensor:
    def test_row_major_strides(self):
        t = make_tensor([2, 3], DType.F32, HOST)
        assert t.strides == (3, 1)
        assert t.storage.size_bytes == 24

    def test_empty_tensor(self):
        t = make_tensor([0, 5], DType.F64, HOST)
        assert t.numel() == 0
        assert t.storage.size_bytes == 0

    def test_stride_oracle(self):
        t = make_tensor([2, 2, 2], DType.I64, HOST)
        assert t.strides == contiguous_strides_oracle([2, 2, 2])
        assert t.storage.size_bytes == 64

    @pytest.mark.parametrize("sizes", [[3], [2, 3], [4, 1, 5], [2, 3, 4, 2]])
    def test_stride_oracle_randomized(self, sizes):
        t = make_tensor(sizes, DType.F32, HOST)
        assert t.strides == contiguous_strides_oracle(sizes)

    def test_zero_initialized(self):
        t = make_tensor([4, 4], DType.F64, HOST)
        assert np.all(t.ndview() == 0.0)

    def test_negative_size_rejected(self):
        with pytest.raises(ShapeError):
            make_tensor([2, -1], DType.F32, HOST)

    def test_virt_index_out_of_range(self, fresh_runtime):
        from vbtensor.dtypes import virt
        from vbtensor.errors import DeviceError
        with pytest.raises(DeviceError, match="out of range"):
            make_tensor([2], DType.F32, virt(99))


class TestAsStrided:
    def test_gather_oracle_basic(self):
        base = vt.tensor(np.arange(6.0), dtype=DType.F64)
        v = as_strided(base, [2, 2], [3, 1], 0)
        flat = base.storage.typed(np.float64)
        assert np.array_equal(v.ndview(), gather(flat, [2, 2], [3, 1], 0))
        assert np.array_equal(v.ndview(), [[0.0, 1.0], [3.0, 4.0]])

    def test_identity_view(self):
        base = vt.tensor(np.arange(6.0).reshape(2, 3), dtype=DType.F64)
        v = as_strided(base, base.sizes, base.strides, base.offset_elems)
        assert np.array_equal(v.ndview(), base.ndview())

    def test_zero_stride_broadcast(self):
        base = vt.tensor(np.array([7.0, 9.0]), dtype=DType.F64)
        v = as_strided(base, [3, 2], [0, 1], 0)
        assert np.array_equal(v.ndview(), np.tile([7.0, 9.0], (3, 1)))

    def test_out_of_bounds_rejected(self):
        base = make_tensor([6], DType.F32, HOST)
        with pytest.raises(ShapeError):
            as_strided(base, [2, 3], [4, 1], 0)  # max index 4+2=6 >= 6

    def test_negative_stride_rejected(self):
        base = make_tensor([6], DType.F32, HOST)
        with pytest.raises(ShapeError):
            as_strided(base, [3], [-1], 2)

    def test_shares_storage_no_copy(self):
        base = vt.tensor(np.arange(6.0), dtype=DType.F64)
        v = as_strided(base, [3], [2], 0)
        v.ndview()[1] = 99.0
        assert base.ndview()[2] == 99.0

    def test_view_aliasing_randomized_gather(self):
        rng = np.random.default_rng(7)
        for _ in range(60):
            ndim = rng.integers(1, 5)
            sizes = rng.integers(0, 6, ndim).tolist()
            strides = rng.integers(0, 4, ndim).tolist()
            offset = int(rng.integers(0, 3))
            span = offset + sum((s - 1) * st for s, st in zip(sizes, strides)
                                if s > 0) + 1 if all(s > 0 for s in sizes) else offset
            base = vt.tensor(rng.standard_normal(max(span, 1) + 2),
                             dtype=DType.F64)
            v = as_strided(base, sizes, strides, offset)
            flat = base.storage.typed(np.float64)
            assert np.array_equal(v.ndview(),
                                  gather(flat, sizes, strides, offset))


class TestIsContiguous:
    def test_fresh_tensor(self):
        assert is_contiguous(make_tensor([2, 3], DType.F32, HOST))

    def test_transpose_not_contiguous(self):
        t = make_tensor([2, 3], DType.F32, HOST)
        tt = as_strided(t, [3, 2], [1, 3], 0)
        assert not is_contiguous(tt)

    def test_size_one_dim_stride_ignored(self):
        base = make_tensor([32], DType.F32, HOST)
        v = as_strided(base, [1, 4], [7, 1], 0)
        assert is_contiguous(v)

    def test_empty_contiguous(self):
        assert is_contiguous(make_tensor([0, 4], DType.F32, HOST))


class TestVersionCounter:
    def test_single_inplace_bump(self):
        t = vt.tensor([1.0, 2.0], dtype=DType.F64)
        v = as_strided(t, [2], [1], 0)
        with vt.no_grad():
            vt.add_(t, t)
        assert t.version.value == 1
        assert v.version.value == 1

    def test_two_inplace_ops(self):
        t = vt.tensor([1.0], dtype=DType.F64)
        with vt.no_grad():
            vt.add_(t, t)
            vt.fill_(t, 3.0)
        assert t.version.value == 2

    def test_mutation_through_view_bumps_base(self):
        base = vt.tensor([1.0, 2.0, 3.0], dtype=DType.F64)
        view = as_strided(base, [2], [1], 1)
        with vt.no_grad():
            vt.fill_(view, 0.0)
        assert base.version.value == 1
        assert base.version is view.version  # shared counter object

    def test_version_sharing_chain(self):
        base = vt.tensor([1.0, 2.0, 3.0, 4.0], dtype=DType.F64)
        v1 = as_strided(base, [2], [2], 0)
        v2 = as_strided(v1, [2], [1], 1)
        bump_version(v2)
        assert base.version.value == v1.version.value == v2.version.value == 1

    def test_bump_returns_new_value(self):
        t = make_tensor([1], DType.F32, HOST)
        assert bump_version(t) == 1
        assert bump_version(t) == 2


class TestRefcountSoundness:
    def test_exactly_one_free(self):
        frees = []
        t = make_tensor([8], DType.F64, HOST,
                        _host_free_cb=lambda: frees.append(1))
        v1 = as_strided(t, [4], [2], 0)
        v2 = as_strided(v1, [2], [1], 0)
        del t
        gc.collect()
        assert frees == []
        del v1, v2
        gc.collect()
        assert frees == [1]

    def test_virt_storage_returns_to_allocator(self, fresh_runtime):
        t = make_tensor([64], DType.F64, vt.device("virt:0"))
        stats = vt.memory_stats(0)
        assert stats["allocated_bytes"]["current"] == 512
        del t
        gc.collect()
        stats = vt.memory_stats(0)
        assert stats["allocated_bytes"]["current"] == 0
        assert stats["allocated_bytes"]["freed_total"] == 512
