"""Occupancy grids, value similarity, IoU, the voxel BCE loss and grid file formats."""

from __future__ import annotations

import struct

import numpy as np

from .autodiff import Tensor, record_op, reshape
from .errors import ConfigError, DimensionError, FormatError

BCE_EPS = 1e-7


class VoxelGrid:
    """Immutable cubic grid of occupancy values in [0, 1], indexed ``(i, j, k)``."""

    __slots__ = ("values", "_binary")

    def __init__(self, values):
        arr = np.array(values, dtype=np.float64)
        if arr.ndim == 1:
            r = round(arr.size ** (1.0 / 3.0))
            if r ** 3 != arr.size:
                raise DimensionError(f"{arr.size} values do not form a cubic grid")
            arr = arr.reshape(r, r, r)
        if arr.ndim != 3 or not (arr.shape[0] == arr.shape[1] == arr.shape[2]) or arr.shape[0] < 1:
            raise DimensionError(f"voxel grid must be cubic, got shape {arr.shape}")
        if np.any(arr < 0.0) or np.any(arr > 1.0) or np.any(np.isnan(arr)):
            raise ValueError("voxel values must lie in [0, 1]")
        arr.setflags(write=False)
        self.values = arr
        self._binary = None

    @classmethod
    def zeros(cls, r):
        return cls(np.zeros((r, r, r)))

    @property
    def resolution(self):
        return self.values.shape[0]

    @property
    def binary(self):
        if self._binary is None:
            v = self.values
            self._binary = bool(np.all((v == 0.0) | (v == 1.0)))
        return self._binary

    def flat(self):
        return self.values.reshape(-1)

    def occupied(self):
        return int(np.count_nonzero(self.values))

    def __eq__(self, other):
        return isinstance(other, VoxelGrid) and np.array_equal(self.values, other.values)

    def __hash__(self):
        return hash(self.values.tobytes())

    def __repr__(self):
        kind = "binary" if self.binary else "prob"
        return f"VoxelGrid(r={self.resolution}, {kind}, occupied={self.occupied()})"


def _values(g):
    return g.values if isinstance(g, VoxelGrid) else np.asarray(g, dtype=np.float64)


def _check_threshold(t):
    if not 0.0 < t < 1.0:
        raise ConfigError(f"threshold must lie in (0, 1), got {t}")


def _check_same(a, b, what):
    if a.shape != b.shape:
        raise DimensionError(f"{what}: resolution mismatch {a.shape} vs {b.shape}")


def binarize(g, t=0.3):
    """Occupied where value > t (strict)."""
    _check_threshold(t)
    return VoxelGrid((_values(g) > t).astype(np.float64))


def value_similarity(v, w):
    """One minus the mean squared voxel difference."""
    a, b = _values(v), _values(w)
    _check_same(a, b, "value_similarity")
    d = a - b
    return 1.0 - float(np.sum(d * d)) / d.size


def iou(p, gt, t=0.3):
    """Intersection over union of ``p > t`` and the binary ground truth.

    Two empty occupancies count as perfect agreement (1.0).
    """
    _check_threshold(t)
    a, b = _values(p), _values(gt)
    _check_same(a, b, "iou")
    pred = a > t
    ref = b > 0.5
    union = np.count_nonzero(pred | ref)
    if union == 0:
        return 1.0
    return np.count_nonzero(pred & ref) / union


def bce_rows(p, gt, eps=BCE_EPS):
    """Per-row mean binary cross entropy of probabilities ``p`` (n, v) vs targets ``gt``.

    Probabilities are clamped to [eps, 1 - eps] inside the loss only; the clamp
    has zero gradient where it is active.
    """
    target = np.asarray(gt, dtype=np.float64)
    if p.shape != target.shape:
        raise DimensionError(f"bce: resolution mismatch {p.shape} vs {target.shape}")
    pd = p.data
    pc = np.clip(pd, eps, 1.0 - eps)
    n = pd.shape[-1]
    loss = -(target * np.log(pc) + (1.0 - target) * np.log(1.0 - pc)).sum(axis=-1) / n
    inside = (pd >= eps) & (pd <= 1.0 - eps)

    def back(g):
        dp = (-(target / pc) + (1.0 - target) / (1.0 - pc)) / n
        return (np.expand_dims(g, -1) * dp * inside,)

    return record_op("bce", loss, (p,), back)


def bce_loss(p, gt, eps=BCE_EPS):
    """Mean voxel-wise BCE between a probability tensor and a binary grid (scalar tensor)."""
    if not isinstance(p, Tensor):
        p = Tensor(_values(p))
    target = _values(gt)
    if p.size != target.size:
        raise DimensionError(f"bce: resolution mismatch {p.shape} vs {target.shape}")
    flat_p = p if p.data.ndim == 1 else reshape(p, (-1,))
    return bce_rows(flat_p, target.reshape(-1), eps)


# Grid files: "VOXB" bit-packed binary, "VOXF" float32 probabilities.
VOXB_MAGIC = b"VOXB"
VOXF_MAGIC = b"VOXF"
GRID_VERSION = 1


def pack_bits(values):
    return np.packbits(np.asarray(values).reshape(-1) > 0.5, bitorder="little").tobytes()


def unpack_bits(raw, n):
    bits = np.unpackbits(np.frombuffer(raw, dtype=np.uint8), bitorder="little")
    return bits[:n].astype(np.float64)


def packed_size(r):
    return (r ** 3 + 7) // 8


def write_voxb(path, grid):
    if not grid.binary:
        raise ValueError("VOXB stores binary grids only")
    with open(path, "wb") as fh:
        fh.write(VOXB_MAGIC + struct.pack("<II", GRID_VERSION, grid.resolution) + pack_bits(grid.values))


def write_voxf(path, grid):
    data = np.ascontiguousarray(grid.values.reshape(-1), dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(VOXF_MAGIC + struct.pack("<II", GRID_VERSION, grid.resolution) + data)


def read_grid(path):
    """Load a VOXB or VOXF file, dispatching on the magic bytes."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < 12:
        raise FormatError("truncated grid header", len(buf))
    magic = buf[:4]
    version, r = struct.unpack("<II", buf[4:12])
    if magic not in (VOXB_MAGIC, VOXF_MAGIC):
        raise FormatError(f"unknown grid magic {magic!r}", 0)
    if version != GRID_VERSION:
        raise FormatError(f"unsupported grid version {version}", 4)
    if r == 0:
        raise FormatError("zero resolution", 8)
    body = buf[12:]
    if magic == VOXB_MAGIC:
        need = packed_size(r)
        if len(body) != need:
            raise FormatError(f"expected {need} payload bytes, found {len(body)}", 12 + min(len(body), need))
        return VoxelGrid(unpack_bits(body, r ** 3).reshape(r, r, r))
    need = 4 * r ** 3
    if len(body) != need:
        raise FormatError(f"expected {need} payload bytes, found {len(body)}", 12 + min(len(body), need))
    vals = np.frombuffer(body, dtype="<f4").astype(np.float64)
    return VoxelGrid(np.clip(vals, 0.0, 1.0).reshape(r, r, r))
