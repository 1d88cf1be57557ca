import itertools
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from voxmem.autodiff import Tape, Tensor
from voxmem.errors import ConfigError, DimensionError, FormatError
from voxmem.voxels import (VoxelGrid, bce_loss, binarize, iou, pack_bits, read_grid, unpack_bits,
                           value_similarity, write_voxb, write_voxf)

EPS = 1e-7


def grid_from_bits(bits, r=2):
    return VoxelGrid(np.array([(bits >> i) & 1 for i in range(r ** 3)], dtype=float).reshape(r, r, r))


ALL_2CUBED = [grid_from_bits(b) for b in range(256)]


# VoxelGrid


def test_grid_rejects_out_of_range_and_non_cubic():
    with pytest.raises(ValueError):
        VoxelGrid(np.full((2, 2, 2), 1.5))
    with pytest.raises(DimensionError):
        VoxelGrid(np.zeros((2, 2, 3)))
    with pytest.raises(DimensionError):
        VoxelGrid(np.zeros(7))


def test_grid_is_immutable():
    g = VoxelGrid(np.zeros((2, 2, 2)))
    with pytest.raises(ValueError):
        g.values[0, 0, 0] = 1.0


def test_binary_flag():
    assert VoxelGrid(np.ones((2, 2, 2))).binary
    assert not VoxelGrid(np.full((2, 2, 2), 0.4)).binary


# binarize


def test_binarize_strict_boundary():
    g = VoxelGrid(np.full((2, 2, 2), 0.3))
    assert binarize(g, 0.3).occupied() == 0


def test_binarize_either_side():
    vals = np.array([0.29, 0.31] * 4).reshape(2, 2, 2)
    assert binarize(vals, 0.3).flat().tolist() == [0.0, 1.0] * 4


@given(st.integers(0, 255), st.floats(0.001, 0.999))
def test_binarize_idempotent_on_binary(bits, t):
    g = grid_from_bits(bits)
    assert binarize(g, t) == g


def test_binarize_threshold_range():
    for t in (0.0, 1.0, -0.1, 1.5):
        with pytest.raises(ConfigError):
            binarize(VoxelGrid.zeros(2), t)


# value similarity


def test_value_similarity_hand_values():
    g = grid_from_bits(0b10110010)
    assert value_similarity(g, g) == 1.0
    assert value_similarity(np.ones((2, 2, 2)), np.zeros((2, 2, 2))) == 0.0
    assert value_similarity(grid_from_bits(0b00000011), grid_from_bits(0)) == 0.75


def test_value_similarity_mismatch():
    with pytest.raises(DimensionError):
        value_similarity(VoxelGrid.zeros(2), VoxelGrid.zeros(3))


@given(st.integers(0, 255), st.integers(0, 255))
def test_value_similarity_symmetric_and_bounded(a, b):
    ga, gb = ALL_2CUBED[a], ALL_2CUBED[b]
    s = value_similarity(ga, gb)
    assert s == value_similarity(gb, ga)
    assert 0.0 <= s <= 1.0
    assert (s == 1.0) == (a == b)


# IoU


def test_iou_hand_values():
    gt = grid_from_bits(0b01101001)
    assert iou(gt, gt, 0.3) == 1.0
    assert iou(grid_from_bits(0b00001111), grid_from_bits(0b11110000)) == 0.0
    # p = {A, B}, gt = {B, C}
    assert iou(grid_from_bits(0b011), grid_from_bits(0b110)) == pytest.approx(1 / 3, abs=1e-12)


def test_iou_both_empty_is_one():
    assert iou(VoxelGrid.zeros(2), VoxelGrid.zeros(2)) == 1.0


def test_iou_exhaustive_against_set_oracle():
    sets = [frozenset(i for i in range(8) if (b >> i) & 1) for b in range(256)]
    for a, b in itertools.product(range(256), repeat=2):
        sa, sb = sets[a], sets[b]
        expected = 1.0 if not (sa | sb) else len(sa & sb) / len(sa | sb)
        assert iou(ALL_2CUBED[a], ALL_2CUBED[b], 0.3) == expected


@given(arrays(np.float64, (3, 3, 3), elements=st.floats(0, 1)), st.integers(0, 2 ** 27 - 1))
def test_iou_bounded_and_threshold_interval_invariant(p, bits):
    gt = VoxelGrid(np.array([(bits >> i) & 1 for i in range(27)], float).reshape(3, 3, 3))
    v = iou(p, gt, 0.3)
    assert 0.0 <= v <= 1.0
    # moving t inside an interval that contains no grid value leaves IoU unchanged
    cuts = np.unique(np.concatenate([[0.0, 1.0], p.ravel()]))
    k = np.searchsorted(cuts, 0.3)
    lo, hi = cuts[max(k - 1, 0)], cuts[min(k, len(cuts) - 1)]
    if lo < 0.3 < hi:
        for t in (lo + (0.3 - lo) / 2, 0.3 + (hi - 0.3) / 2):
            if 0 < t < 1:
                assert iou(p, gt, t) == v


# BCE


def test_bce_uniform_half_is_ln2():
    gt = grid_from_bits(0b10011010)
    loss = bce_loss(np.full((2, 2, 2), 0.5), gt)
    assert loss.item() == pytest.approx(math.log(2), abs=1e-12)


def test_bce_perfect_prediction():
    gt = grid_from_bits(0b11100001)
    loss = bce_loss(gt.values, gt).item()
    assert 0.0 <= loss <= -math.log(1 - EPS) + 1e-15
    assert loss <= 2 * EPS


def test_bce_clamped_region_has_zero_gradient():
    p = Tensor(np.array([0.0, 1.0, 0.5, 0.2]).reshape(-1), requires_grad=True)
    gt = np.array([0.0, 1.0, 1.0, 0.0])
    from voxmem.voxels import bce_rows
    with Tape() as tape:
        tape.backward(bce_rows(p, gt))
    assert p.grad[0] == 0.0 and p.grad[1] == 0.0
    assert p.grad[2] == pytest.approx(-1 / (0.5 * 4))


@given(arrays(np.float64, 8, elements=st.floats(0, 1)), st.integers(0, 255))
def test_bce_non_negative(p, bits):
    gt = ALL_2CUBED[bits]
    assert bce_loss(p.reshape(2, 2, 2), gt).item() >= 0.0


def test_bce_resolution_mismatch():
    with pytest.raises(DimensionError):
        bce_loss(np.full((2, 2, 2), 0.5), VoxelGrid.zeros(3))


# file formats


@given(st.integers(1, 9), st.integers(0, 2 ** 32 - 1))
def test_bit_packing_round_trip(r, seed):
    bits = np.random.default_rng(seed).random(r ** 3) > 0.5
    assert np.array_equal(unpack_bits(pack_bits(bits), r ** 3) > 0.5, bits)


def test_bit_order_is_lsb_first():
    raw = pack_bits(np.array([1, 0, 0, 0, 0, 0, 0, 0, 0, 1], dtype=float))
    assert raw == bytes([0b00000001, 0b00000010])


def test_voxb_round_trip(tmp_path):
    g = VoxelGrid((np.random.default_rng(0).random((5, 5, 5)) > 0.5).astype(float))
    write_voxb(tmp_path / "g.voxb", g)
    assert read_grid(tmp_path / "g.voxb") == g
    assert (tmp_path / "g.voxb").stat().st_size == 12 + 16


def test_voxf_round_trip_is_f32(tmp_path):
    vals = np.random.default_rng(1).random((4, 4, 4))
    write_voxf(tmp_path / "g.voxf", VoxelGrid(vals))
    back = read_grid(tmp_path / "g.voxf")
    assert np.array_equal(back.values, vals.astype(np.float32).astype(np.float64))


def test_voxb_rejects_probabilities(tmp_path):
    with pytest.raises(ValueError):
        write_voxb(tmp_path / "g.voxb", VoxelGrid(np.full((2, 2, 2), 0.5)))


@pytest.mark.parametrize("mutate,offset", [
    (lambda raw: raw[:8], None),
    (lambda raw: b"ABCD" + raw[4:], 0),
    (lambda raw: raw[:4] + (9).to_bytes(4, "little") + raw[8:], 4),
    (lambda raw: raw[:-1], 12),
    (lambda raw: raw + b"\0", 12),
])
def test_grid_format_errors(tmp_path, mutate, offset):
    path = tmp_path / "g.voxb"
    write_voxb(path, VoxelGrid(np.ones((3, 3, 3))))
    path.write_bytes(mutate(path.read_bytes()))
    with pytest.raises(FormatError) as info:
        read_grid(path)
    if offset is not None:
        assert info.value.offset >= offset
