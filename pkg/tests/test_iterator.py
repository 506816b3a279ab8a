import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vbtensor import overlay as vt
from vbtensor.dtypes import DType, HOST
from vbtensor.errors import DeviceError, DTypeError, OverlapError, ShapeError
from vbtensor.iterator import (IterPlan, OperandSpec, Overlap, broadcast_shapes,
                               build_iter, check_overlap, for_each)
from vbtensor.storage import as_strided, make_tensor

from oracles.gather import broadcast_oracle, gather


def t_of(arr, dtype=DType.F64):
    return vt.tensor(np.asarray(arr), dtype=dtype)


class TestBuildIter:
    def test_basic_broadcast(self):
        a = make_tensor([3, 1], DType.F64, HOST)
        b = make_tensor([1, 4], DType.F64, HOST)
        out = make_tensor([3, 4], DType.F64, HOST)
        plan = build_iter([OperandSpec(out, is_output=True),
                           OperandSpec(a), OperandSpec(b)])
        assert plan.common_shape == (3, 4)
        assert plan.per_operand_strides[1] == (1, 0)
        assert plan.per_operand_strides[2] == (0, 1)

    def test_contiguous_coalescing(self):
        a = make_tensor([2, 3], DType.F64, HOST)
        b = make_tensor([2, 3], DType.F64, HOST)
        out = make_tensor([2, 3], DType.F64, HOST)
        plan = build_iter([OperandSpec(out, is_output=True),
                           OperandSpec(a), OperandSpec(b)])
        assert plan.coalesced_shape == (6,)
        assert all(s == (1,) for s in plan.coalesced_strides)

    def test_outputs_never_broadcast(self):
        a = make_tensor([3, 1], DType.F64, HOST)
        b = make_tensor([4], DType.F64, HOST)
        ok_out = make_tensor([3, 4], DType.F64, HOST)
        build_iter([OperandSpec(ok_out, is_output=True),
                    OperandSpec(a), OperandSpec(b)])
        bad_out = make_tensor([3, 1], DType.F64, HOST)
        with pytest.raises(ShapeError):
            build_iter([OperandSpec(bad_out, is_output=True),
                        OperandSpec(a), OperandSpec(b)])

    def test_shape_mismatch(self):
        a = make_tensor([3], DType.F64, HOST)
        b = make_tensor([4], DType.F64, HOST)
        out = make_tensor([4], DType.F64, HOST)
        with pytest.raises(ShapeError):
            build_iter([OperandSpec(out, is_output=True),
                        OperandSpec(a), OperandSpec(b)])

    def test_mixed_dtype_rejected(self):
        a = make_tensor([3], DType.F64, HOST)
        b = make_tensor([3], DType.F32, HOST)
        with pytest.raises(DTypeError):
            build_iter([OperandSpec(a), OperandSpec(b)])

    def test_mixed_device_rejected(self, fresh_runtime):
        a = make_tensor([3], DType.F64, HOST)
        b = make_tensor([3], DType.F64, vt.device("virt:0"))
        with pytest.raises(DeviceError):
            build_iter([OperandSpec(a), OperandSpec(b)])

    def test_partial_overlap_rejected(self):
        base = t_of(np.arange(10.0))
        out = as_strided(base, [4], [1], 2)
        inp = as_strided(base, [4], [1], 0)
        with pytest.raises(OverlapError):
            build_iter([OperandSpec(out, is_output=True,
                                    allow_inplace_alias=True),
                        OperandSpec(inp)])

    def test_exact_alias_needs_flag(self):
        base = t_of(np.arange(4.0))
        with pytest.raises(OverlapError):
            build_iter([OperandSpec(base, is_output=True), OperandSpec(base)])
        plan = build_iter([OperandSpec(base, is_output=True,
                                       allow_inplace_alias=True),
                           OperandSpec(base)])
        assert plan.common_shape == (4,)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(1, 5), min_size=0, max_size=4),
       st.lists(st.integers(1, 5), min_size=0, max_size=4))
def test_broadcast_equivalence_property(shape_a, shape_b):
    expected = broadcast_oracle(shape_a, shape_b)
    if expected is None:
        with pytest.raises(ShapeError):
            broadcast_shapes([tuple(shape_a), tuple(shape_b)])
    else:
        assert broadcast_shapes([tuple(shape_a), tuple(shape_b)]) == expected


class TestForEach:
    def test_copy_kernel(self):
        src = t_of(np.arange(4.0).reshape(2, 2))
        dst = make_tensor([2, 2], DType.F64, HOST)
        plan = build_iter([OperandSpec(dst, is_output=True), OperandSpec(src)])
        dbase = dst.storage.typed(np.float64)
        sbase = src.storage.typed(np.float64)

        def body(offsets):
            dbase[offsets[0]] = sbase[offsets[1]]

        for_each(plan, body)
        assert np.array_equal(dst.ndview(), src.ndview())

    def test_broadcast_scalar_fill(self):
        scalar = t_of(np.array(5.0))
        dst = make_tensor([3], DType.F64, HOST)
        plan = build_iter([OperandSpec(dst, is_output=True),
                           OperandSpec(scalar)])
        dbase = dst.storage.typed(np.float64)
        sbase = scalar.storage.typed(np.float64)
        for_each(plan, lambda offs: dbase.__setitem__(offs[0], sbase[offs[1]]))
        assert np.array_equal(dst.ndview(), [5.0, 5.0, 5.0])

    def test_randomized_strided_copy_matches_gather(self):
        rng = np.random.default_rng(11)
        for _ in range(40):
            ndim = int(rng.integers(1, 5))
            sizes = rng.integers(0, 5, ndim).tolist()
            strides = rng.integers(0, 4, ndim).tolist()
            offset = int(rng.integers(0, 3))
            span = offset + (sum((s - 1) * st for s, st in zip(sizes, strides))
                             + 1 if all(s > 0 for s in sizes) else 0)
            base = t_of(rng.standard_normal(max(span, 1) + 1))
            src = as_strided(base, sizes, strides, offset)
            dst = make_tensor(sizes, DType.F64, HOST)
            plan = build_iter([OperandSpec(dst, is_output=True),
                               OperandSpec(src)])
            dbase = dst.storage.typed(np.float64)
            sbase = src.storage.typed(np.float64)
            for_each(plan, lambda offs: dbase.__setitem__(offs[0],
                                                          sbase[offs[1]]))
            assert np.array_equal(
                dst.ndview(), gather(sbase, sizes, strides, offset))

    def test_visit_count_and_order(self):
        a = make_tensor([2, 3], DType.F64, HOST)
        plan = build_iter([OperandSpec(a)])
        seen = []
        for_each(plan, lambda offs: seen.append(offs[0]))
        assert len(seen) == 6
        assert seen == sorted(seen)  # row-major over a contiguous operand

    def test_zero_size_no_callbacks(self):
        a = make_tensor([0, 4], DType.F64, HOST)
        plan = build_iter([OperandSpec(a)])
        calls = []
        for_each(plan, calls.append)
        assert calls == []
        assert plan.numel() == 0


class TestCoalescingSoundness:
    def test_multiset_of_offsets_matches_uncoalesced(self):
        rng = np.random.default_rng(3)
        for _ in range(30):
            ndim = int(rng.integers(1, 4))
            sizes = rng.integers(1, 5, ndim).tolist()
            base_a = t_of(rng.standard_normal(int(np.prod(sizes)) * 4 + 4))
            strides = []
            acc = 1
            for s in reversed(sizes):
                strides.append(acc)
                acc *= s
            strides = list(reversed(strides))
            a = as_strided(base_a, sizes, strides, 0)
            plan = build_iter([OperandSpec(a)])
            coalesced = []
            for_each(plan, lambda offs: coalesced.append(offs[0]))
            flat = IterPlan(
                common_shape=plan.common_shape,
                per_operand_strides=plan.per_operand_strides,
                coalesced_shape=plan.common_shape,
                coalesced_strides=plan.per_operand_strides,
                reduction_dims=frozenset(), operands=[a])
            uncoalesced = []
            for_each(flat, lambda offs: uncoalesced.append(offs[0]))
            assert sorted(coalesced) == sorted(uncoalesced)


class TestCheckOverlap:
    def test_self_exact_alias(self):
        t = make_tensor([4], DType.F64, HOST)
        assert check_overlap(t, t) is Overlap.EXACT_ALIAS

    def test_distinct_storages_disjoint(self):
        a = make_tensor([4], DType.F64, HOST)
        b = make_tensor([4], DType.F64, HOST)
        assert check_overlap(a, b) is Overlap.DISJOINT

    def test_slice_partial(self):
        base = t_of(np.arange(10.0))
        piece = as_strided(base, [4], [1], 2)
        assert check_overlap(base, piece) is Overlap.PARTIAL

    def test_disjoint_slices_of_one_storage(self):
        base = t_of(np.arange(10.0))
        lo = as_strided(base, [3], [1], 0)
        hi = as_strided(base, [3], [1], 5)
        assert check_overlap(lo, hi) is Overlap.DISJOINT
