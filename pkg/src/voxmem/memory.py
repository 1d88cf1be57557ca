"""Key-value shape-prior memory.

Each slot holds a unit-norm feature key, a binary voxel volume and an age.
Writes either refresh the best-matching slot (when its stored volume is close
enough to the incoming one) or insert into an empty or the oldest slot. Reads
return every stored volume whose key clears the cosine threshold, most similar
first.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, cosine
from .errors import ConfigError, DegenerateInputError, DimensionError, EmptyBankError, FormatError
from .voxels import VoxelGrid, pack_bits, packed_size, unpack_bits

SNAPSHOT_MAGIC = b"VMEM"
SNAPSHOT_VERSION = 1


def key_similarity(f, k):
    """Cosine similarity between a feature vector and a key."""
    f = np.asarray(f, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    if f.shape != k.shape:
        raise DimensionError(f"key_similarity: dimension mismatch {f.shape} vs {k.shape}")
    nf, nk = np.linalg.norm(f), np.linalg.norm(k)
    if nf == 0 or nk == 0:
        raise DegenerateInputError("key similarity of a zero vector")
    return float(f @ k / (nf * nk))


@dataclass(frozen=True)
class WriteOutcome:
    kind: str  # "updated" (similar example) or "inserted" (new example)
    index: int
    evicted: bool = False

    @property
    def updated(self):
        return self.kind == "updated"


@dataclass
class RetrievedSequence:
    """Retrieved volumes in descending key-similarity order."""

    slots: np.ndarray
    similarities: np.ndarray
    values: np.ndarray  # (L, r_v**3) bool

    def __len__(self):
        return len(self.slots)

    @property
    def grids(self):
        r = round(self.values.shape[1] ** (1 / 3)) if len(self) else 0
        return [VoxelGrid(v.reshape(r, r, r).astype(np.float64)) for v in self.values]

    @classmethod
    def empty(cls, n_v):
        return cls(np.zeros(0, dtype=np.int64), np.zeros(0), np.zeros((0, n_v), dtype=bool))

    @classmethod
    def from_values(cls, values, similarities=None):
        """Build a sequence from raw volumes (no slot identity), e.g. for tests."""
        values = np.asarray([v.flat() if isinstance(v, VoxelGrid) else np.ravel(v) for v in values]) > 0.5
        n = len(values)
        sims = np.linspace(1.0, 0.9, n) if similarities is None else np.asarray(similarities, float)
        return cls(np.full(n, -1, dtype=np.int64), sims, values.reshape(n, -1))


@dataclass(frozen=True)
class Triplet:
    positive: int
    negative: int
    s_kp: object  # float, or Tensor when mined with a Tensor feature
    s_kb: object


def _feature(f):
    arr = np.asarray(f.data if isinstance(f, Tensor) else f, dtype=np.float64).reshape(-1)
    norm = np.linalg.norm(arr)
    if norm == 0 or not np.isfinite(norm):
        raise DegenerateInputError("feature vector is zero")
    return arr, norm


class MemoryBank:
    """Fixed-capacity slot store; slots ``0..count-1`` are filled."""

    def __init__(self, capacity, key_dim, resolution, read_threshold=0.85, write_threshold=0.90):
        if capacity < 1 or key_dim < 1 or resolution < 1:
            raise ConfigError("memory capacity, key dimension and resolution must be positive")
        for name, v in (("read_threshold", read_threshold), ("write_threshold", write_threshold)):
            if not 0.0 < v < 1.0:
                raise ConfigError(f"{name} must lie in (0, 1), got {v}")
        self.capacity = int(capacity)
        self.key_dim = int(key_dim)
        self.resolution = int(resolution)
        self.n_v = self.resolution ** 3
        self.read_threshold = float(read_threshold)
        self.write_threshold = float(write_threshold)
        self.keys = np.zeros((self.capacity, self.key_dim))
        self.values = np.zeros((self.capacity, self.n_v), dtype=bool)
        self.ages = np.zeros(self.capacity, dtype=np.uint64)
        self.write_counts = np.zeros(self.capacity, dtype=np.int64)
        self.last_write = np.full(self.capacity, -1, dtype=np.int64)
        self.count = 0
        self.clock = 0  # incremented per write; stamps last_write

    def __len__(self):
        return self.count

    def _value(self, v):
        arr = v.values if isinstance(v, VoxelGrid) else np.asarray(v, dtype=np.float64)
        flat = arr.reshape(-1)
        if flat.size != self.n_v:
            raise DimensionError(f"value has {flat.size} voxels, bank expects {self.n_v}")
        if not np.all((flat == 0) | (flat == 1)):
            raise ValueError("memory values must be binary")
        return flat > 0.5

    def key_similarities(self, f):
        arr, norm = _feature(f)
        if arr.size != self.key_dim:
            raise DimensionError(f"feature has dimension {arr.size}, bank keys have {self.key_dim}")
        keys = self.keys[:self.count]
        return keys @ arr / (np.linalg.norm(keys, axis=1) * norm)

    def value_similarities(self, v):
        """Value similarity of ``v`` against every stored volume."""
        bits = self._value(v)
        return 1.0 - np.count_nonzero(self.values[:self.count] != bits, axis=1) / self.n_v

    def nearest_key(self, f):
        if self.count == 0:
            raise EmptyBankError("nearest_key on an empty memory")
        return int(np.argmax(self.key_similarities(f)))

    def write(self, f, v):
        arr, norm = _feature(f)
        if arr.size != self.key_dim:
            raise DimensionError(f"feature has dimension {arr.size}, bank keys have {self.key_dim}")
        bits = self._value(v)
        unit = arr / norm
        self.clock += 1
        if self.count:
            n1 = self.nearest_key(arr)
            sim = 1.0 - np.count_nonzero(self.values[n1] != bits) / self.n_v
            if sim >= self.write_threshold:
                merged = unit + self.keys[n1]
                mnorm = np.linalg.norm(merged)
                self.keys[n1] = merged / mnorm if mnorm > 0 else unit
                self._touch(n1)
                return WriteOutcome("updated", n1)
        evicted = self.count == self.capacity
        if evicted:
            n_o = int(np.argmax(self.ages))
        else:
            n_o = self.count
            self.count += 1
        self.keys[n_o] = unit
        self.values[n_o] = bits
        self.write_counts[n_o] = 0
        self._touch(n_o)
        return WriteOutcome("inserted", n_o, evicted)

    def _touch(self, idx):
        self.ages[:self.count] += np.uint64(1)
        self.ages[idx] = 0
        self.write_counts[idx] += 1
        self.last_write[idx] = self.clock

    def read(self, f):
        """Every slot with key similarity strictly above the read threshold, most similar first."""
        if self.count == 0:
            _feature(f)
            return RetrievedSequence.empty(self.n_v)
        sims = self.key_similarities(f)
        hit = np.flatnonzero(sims > self.read_threshold)
        order = hit[np.lexsort((hit, -sims[hit]))]
        return RetrievedSequence(order, sims[order], self.values[order])

    def mine_triplet(self, f, gt):
        """Most key-similar positive and negative slots, split by the write threshold.

        Returns ``None`` when the bank lacks either a positive or a negative.
        Similarities are Tensors (differentiable in ``f``) when ``f`` is a Tensor.
        """
        if self.count == 0:
            return None
        ksim = self.key_similarities(f)
        pos = self.value_similarities(gt) >= self.write_threshold
        if not pos.any() or pos.all():
            return None
        p = int(np.flatnonzero(pos)[np.argmax(ksim[pos])])
        n = int(np.flatnonzero(~pos)[np.argmax(ksim[~pos])])
        if isinstance(f, Tensor):
            return Triplet(p, n, cosine(f, Tensor(self.keys[p].copy())),
                           cosine(f, Tensor(self.keys[n].copy())))
        return Triplet(p, n, float(ksim[p]), float(ksim[n]))

    def retrieval_precision(self, seq, gt):
        """Fraction of retrieved volumes within the write threshold of ``gt``; None if nothing was retrieved."""
        if len(seq) == 0:
            return None
        bits = self._value(gt)
        sims = 1.0 - np.count_nonzero(seq.values != bits, axis=1) / self.n_v
        return float(np.mean(sims >= self.write_threshold))

    def slot(self, i):
        if not 0 <= i < self.count:
            raise IndexError(i)
        r = self.resolution
        return self.keys[i].copy(), VoxelGrid(self.values[i].reshape(r, r, r).astype(np.float64)), int(self.ages[i])

    def copy(self):
        other = MemoryBank(self.capacity, self.key_dim, self.resolution,
                           self.read_threshold, self.write_threshold)
        for name in ("keys", "values", "ages", "write_counts", "last_write"):
            setattr(other, name, getattr(self, name).copy())
        other.count = self.count
        other.clock = self.clock
        return other

    def to_bytes(self):
        header = SNAPSHOT_MAGIC + struct.pack("<IIIII", SNAPSHOT_VERSION, self.capacity,
                                              self.key_dim, self.resolution, self.count)
        parts = [header]
        for i in range(self.count):
            parts.append(np.ascontiguousarray(self.keys[i], dtype="<f4").tobytes())
            parts.append(pack_bits(self.values[i]))
            parts.append(struct.pack("<Q", int(self.ages[i])))
        return b"".join(parts)

    def digest(self):
        return hashlib.sha256(self.to_bytes()).hexdigest()

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def from_bytes(cls, buf, resolution=None, read_threshold=0.85, write_threshold=0.90):
        if len(buf) < 24:
            raise FormatError("truncated snapshot header", len(buf))
        if buf[:4] != SNAPSHOT_MAGIC:
            raise FormatError("not a VMEM snapshot", 0)
        version, m, n_k, r_v, count = struct.unpack("<IIIII", buf[4:24])
        if version != SNAPSHOT_VERSION:
            raise FormatError(f"unsupported VMEM version {version}", 4)
        if count > m:
            raise FormatError(f"slot count {count} exceeds capacity {m}", 20)
        if resolution is not None and r_v != resolution:
            raise ConfigError(f"snapshot resolution {r_v} does not match configured {resolution}")
        try:
            bank = cls(m, n_k, r_v, read_threshold, write_threshold)
        except ConfigError as exc:
            raise FormatError(f"invalid snapshot header: {exc}", 8) from None
        nbits = packed_size(r_v)
        stride = 4 * n_k + nbits + 8
        pos = 24
        for i in range(count):
            if pos + stride > len(buf):
                raise FormatError(f"truncated in slot {i}", pos)
            bank.keys[i] = np.frombuffer(buf, dtype="<f4", count=n_k, offset=pos)
            bank.values[i] = unpack_bits(buf[pos + 4 * n_k:pos + 4 * n_k + nbits], r_v ** 3) > 0.5
            (bank.ages[i],) = struct.unpack("<Q", buf[pos + 4 * n_k + nbits:pos + stride])
            pos += stride
        if pos != len(buf):
            raise FormatError("trailing bytes after last slot", pos)
        bank.count = count
        return bank

    @classmethod
    def load(cls, path, resolution=None, read_threshold=0.85, write_threshold=0.90):
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read(), resolution, read_threshold, write_threshold)


def snapshot_save(bank, path):
    bank.save(path)


def snapshot_load(path, resolution=None, read_threshold=0.85, write_threshold=0.90):
    return MemoryBank.load(path, resolution, read_threshold, write_threshold)


def save_write_counts(bank, path):
    """Per-slot write counts live beside the snapshot (the VMEM layout has no field for them)."""
    with open(path, "w") as fh:
        json.dump({"count": bank.count, "write_counts": bank.write_counts[:bank.count].tolist()}, fh)
        fh.write("\n")


def load_write_counts(bank, path):
    with open(path) as fh:
        data = json.load(fh)
    counts = data.get("write_counts")
    if data.get("count") != bank.count or counts is None or len(counts) != bank.count:
        raise FormatError(f"write-count sidecar {path} does not match the snapshot's {bank.count} slots", 0)
    bank.write_counts[:bank.count] = counts


def inspect_bank(bank, bins=20):
    """Slot ages, write counts, key-norm residuals and a pairwise value-similarity histogram."""
    n = bank.count
    vals = bank.values[:n].astype(np.float64)
    if n > 1:
        # S_v between binary rows from the overlap Gram matrix
        ones = vals.sum(axis=1)
        diff = ones[:, None] + ones[None, :] - 2.0 * (vals @ vals.T)
        iu = np.triu_indices(n, k=1)
        pair_sims = 1.0 - diff[iu] / bank.n_v
    else:
        pair_sims = np.zeros(0)
    hist, edges = np.histogram(pair_sims, bins=bins, range=(0.0, 1.0))
    norms = np.linalg.norm(bank.keys[:n], axis=1)
    return {
        "capacity": bank.capacity, "count": n, "key_dim": bank.key_dim, "resolution": bank.resolution,
        "ages": bank.ages[:n].tolist(),
        "write_counts": bank.write_counts[:n].tolist(),
        "key_norm_residuals": np.abs(norms - 1.0).tolist(),
        "max_key_norm_residual": float(np.abs(norms - 1.0).max()) if n else 0.0,
        "occupancy": (bank.values[:n].sum(axis=1) / bank.n_v).tolist(),
        "value_similarity_hist": hist.tolist(),
        "value_similarity_edges": edges.tolist(),
        "pairs_at_or_above_write_threshold": int(np.count_nonzero(pair_sims >= bank.write_threshold)),
    }
