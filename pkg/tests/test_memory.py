import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from voxmem.autodiff import Tensor
from voxmem.errors import ConfigError, DegenerateInputError, DimensionError, EmptyBankError, FormatError
from voxmem.memory import (MemoryBank, RetrievedSequence, inspect_bank, key_similarity, load_write_counts,
                           save_write_counts, snapshot_load, snapshot_save)
from voxmem.voxels import VoxelGrid


def bits_grid(bits, r=2):
    return VoxelGrid(np.array([(bits >> i) & 1 for i in range(r ** 3)], float).reshape(r, r, r))


def random_bank(rng, m=None, n_k=None, r=2, fill=None, beta=0.85, delta=0.9):
    m = m or int(rng.integers(1, 65))
    n_k = n_k or int(rng.integers(2, 17))
    bank = MemoryBank(m, n_k, r, beta, delta)
    count = int(rng.integers(0, m + 1)) if fill is None else fill
    keys = rng.normal(size=(count, n_k))
    if count > 2 and rng.random() < 0.3:
        keys[1] = keys[0]  # exact tie
    bank.keys[:count] = keys / np.linalg.norm(keys, axis=1, keepdims=True)
    bank.values[:count] = rng.random((count, r ** 3)) > 0.5
    bank.ages[:count] = rng.integers(0, 50, size=count).astype(np.uint64)
    bank.count = count
    return bank


def cos(a, b):
    return float(np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b)))


# key similarity


def test_key_similarity_hand_values():
    f = np.array([0.3, -2.0, 1.0])
    assert key_similarity(f, f) == pytest.approx(1.0, abs=1e-15)
    assert key_similarity([1, 0], [0, 1]) == 0.0
    assert key_similarity([1, 1], [1, 0]) == pytest.approx(1 / math.sqrt(2), abs=1e-15)


def test_key_similarity_errors():
    with pytest.raises(DegenerateInputError):
        key_similarity([0, 0], [1, 0])
    with pytest.raises(DimensionError):
        key_similarity([1, 0], [1, 0, 0])


# nearest key


def test_nearest_key_hand_cases():
    bank = MemoryBank(4, 2, 2)
    with pytest.raises(EmptyBankError):
        bank.nearest_key([1.0, 0.0])
    bank.write([0.2, 1.0], bits_grid(1))
    assert bank.nearest_key([1.0, 0.0]) == 0
    bank.write([0.0, 1.0], bits_grid(0b11110000))
    bank.keys[0] = [1.0, 0.0]
    assert bank.nearest_key([0.0, 3.0]) == 1


def test_nearest_key_oracle():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        bank = random_bank(rng, fill=16, m=16)
        f = rng.normal(size=bank.key_dim)
        sims = [cos(f, bank.keys[i]) for i in range(16)]
        best = max(range(16), key=lambda i: (sims[i], -i))
        assert bank.nearest_key(f) == best


# read


def test_read_empty_bank():
    assert len(MemoryBank(3, 2, 2).read([1.0, 0.0])) == 0


def test_read_hand_example():
    bank = MemoryBank(3, 2, 2, read_threshold=0.85)
    f = np.array([1.0, 0.0])
    for s, b in ((0.50, 1), (0.90, 2), (0.86, 3)):
        bank.write([s, math.sqrt(1 - s * s)], bits_grid(b))
    seq = bank.read(f)
    assert seq.slots.tolist() == [1, 2]
    np.testing.assert_allclose(seq.similarities, [0.90, 0.86], atol=1e-12)


def test_read_self_retrieval_first():
    bank = MemoryBank(4, 3, 2)
    rng = np.random.default_rng(1)
    for b in range(4):
        bank.write(rng.normal(size=3), bits_grid(b * 60 + 1))
    seq = bank.read(bank.keys[2])
    assert seq.slots[0] == 2 and seq.similarities[0] == pytest.approx(1.0, abs=1e-12)
    assert np.array_equal(seq.values[0], bank.values[2])


def test_read_oracle_1000_banks():
    rng = np.random.default_rng(2)
    for _ in range(1000):
        bank = random_bank(rng, beta=float(rng.uniform(0.05, 0.95)))
        f = rng.normal(size=bank.key_dim)
        if bank.count and rng.random() < 0.3:
            f = bank.keys[int(rng.integers(bank.count))] + 1e-3 * rng.normal(size=bank.key_dim)
        sims = [cos(f, bank.keys[i]) for i in range(bank.count)]
        expected = sorted([i for i in range(bank.count) if sims[i] > bank.read_threshold],
                          key=lambda i: (-sims[i], i))
        seq = bank.read(f)
        assert seq.slots.tolist() == expected
        assert np.all(seq.similarities > bank.read_threshold)
        assert np.all(np.diff(seq.similarities) <= 0)
        for slot, val in zip(seq.slots, seq.values):
            assert np.array_equal(val, bank.values[slot])


def test_read_zero_feature():
    bank = MemoryBank(2, 2, 2)
    with pytest.raises(DegenerateInputError):
        bank.read([0.0, 0.0])


# mine triplet


def test_mine_triplet_forced_and_absent():
    bank = MemoryBank(4, 2, 2, write_threshold=0.9)
    gt = bits_grid(0b1111)
    bank.write([1.0, 0.0], gt)
    assert bank.mine_triplet([1.0, 0.2], gt) is None  # only positives
    bank.write([0.0, 1.0], bits_grid(0b11110000))
    trip = bank.mine_triplet([1.0, 0.2], gt)
    assert (trip.positive, trip.negative) == (0, 1)
    assert trip.s_kp == pytest.approx(cos([1, 0.2], [1, 0]))


def test_mine_triplet_differentiable():
    bank = MemoryBank(4, 2, 2)
    bank.write([1.0, 0.0], bits_grid(0b1111))
    bank.write([0.0, 1.0], bits_grid(0b11110000))
    trip = bank.mine_triplet(Tensor(np.array([1.0, 0.5]), requires_grad=True), bits_grid(0b1111))
    assert isinstance(trip.s_kp, Tensor) and isinstance(trip.s_kb, Tensor)


def test_mine_triplet_exhaustive_oracle():
    rng = np.random.default_rng(3)
    for _ in range(1000):
        bank = random_bank(rng, m=32, fill=32, delta=0.75)
        f = rng.normal(size=bank.key_dim)
        gt = bits_grid(int(rng.integers(256)))
        gbits = gt.flat() > 0.5
        sims = [cos(f, bank.keys[i]) for i in range(32)]
        sv = [1 - np.count_nonzero(bank.values[i] != gbits) / 8 for i in range(32)]
        best = None
        for p in range(32):
            for n in range(32):
                if sv[p] >= 0.75 > sv[n]:
                    cand = (sims[p], -p, sims[n], -n)
                    if best is None or cand > best:
                        best = cand
        trip = bank.mine_triplet(f, gt)
        if best is None:
            assert trip is None
        else:
            assert (trip.positive, trip.negative) == (-best[1], -best[3])


# write


def test_first_insert():
    bank = MemoryBank(3, 2, 2)
    out = bank.write([3.0, 4.0], bits_grid(5))
    assert (out.kind, out.index) == ("inserted", 0)
    assert bank.ages[0] == 0
    np.testing.assert_allclose(bank.keys[0], [0.6, 0.8], atol=1e-15)


def test_similar_write_averages_directions():
    bank = MemoryBank(3, 2, 2, write_threshold=0.9)
    w = bits_grid(0b1010)
    bank.write([1.0, 0.0], w)
    out = bank.write([0.0, 1.0], w)
    assert (out.kind, out.index) == ("updated", 0)
    np.testing.assert_allclose(bank.keys[0], np.array([1.0, 1.0]) / math.sqrt(2), atol=1e-15)
    assert bank.ages[0] == 0 and bank.count == 1


def test_full_bank_evicts_oldest():
    bank = MemoryBank(2, 2, 2)
    bank.write([1.0, 0.0], bits_grid(0b1))
    bank.write([0.0, 1.0], bits_grid(0b11111110))
    bank.ages[:2] = [5, 2]
    out = bank.write([1.0, 1.0], bits_grid(0b00111100))
    assert (out.kind, out.index, out.evicted) == ("inserted", 0, True)
    assert bank.ages[:2].tolist() == [0, 3]


def test_write_errors():
    bank = MemoryBank(2, 2, 2)
    with pytest.raises(DegenerateInputError):
        bank.write([0.0, 0.0], bits_grid(1))
    with pytest.raises(DimensionError):
        bank.write([1.0, 0.0], VoxelGrid.zeros(3))
    with pytest.raises(ValueError):
        bank.write([1.0, 0.0], VoxelGrid(np.full((2, 2, 2), 0.5)))


def test_bank_config_guards():
    with pytest.raises(ConfigError):
        MemoryBank(0, 2, 2)
    with pytest.raises(ConfigError):
        MemoryBank(2, 2, 2, read_threshold=1.0)


def _unit_list(v):
    n = math.sqrt(sum(x * x for x in v))
    return [x / n for x in v]


class ReferenceBank:
    """Plain-list restatement of the slot rules, used as the writer oracle."""

    def __init__(self, m, delta):
        self.m, self.delta = m, delta
        self.slots = []  # [key, bits, age]

    def write(self, f, bits):
        """Returns ``(kind, index, evicted, S_v of the nearest slot or None)``."""
        f = _unit_list(f)
        sv = None
        if self.slots:
            sims = [sum(a * b for a, b in zip(f, k)) for k, _, _ in self.slots]
            n1 = max(range(len(sims)), key=lambda i: (sims[i], -i))
            sv = 1 - sum(a != b for a, b in zip(self.slots[n1][1], bits)) / len(bits)
            if sv >= self.delta:
                self.slots[n1][0] = _unit_list([a + b for a, b in zip(f, self.slots[n1][0])])
                self._age(n1)
                return "updated", n1, False, sv
        if len(self.slots) < self.m:
            self.slots.append([f, list(bits), 0])
            idx, evicted = len(self.slots) - 1, False
        else:
            idx = max(range(self.m), key=lambda i: (self.slots[i][2], -i))
            self.slots[idx] = [f, list(bits), 0]
            evicted = True
        self._age(idx)
        return "inserted", idx, evicted, sv

    def _age(self, idx):
        for i, s in enumerate(self.slots):
            s[2] = 0 if i == idx else s[2] + 1


def test_writer_oracle_and_invariants_10000_sequences():
    rng = np.random.default_rng(4)
    n_writes = 0
    for _ in range(10_000):
        m = int(rng.integers(1, 7))
        n_k = int(rng.integers(2, 5))
        delta = float(rng.choice([0.6, 0.75, 0.9]))
        bank = MemoryBank(m, n_k, 2, 0.5, delta)
        ref = ReferenceBank(m, delta)
        length = int(rng.integers(1, 13))
        # near-repeats of a few volumes make both strategies fire
        protos = rng.integers(0, 256, size=3)[rng.integers(3, size=length)]
        flips = np.where(rng.random(length) < 0.5, 1 << rng.integers(8, size=length), 0)
        feats = rng.normal(size=(length, n_k))
        for b, f in zip((protos ^ flips).tolist(), feats):
            bits = [(b >> i) & 1 for i in range(8)]
            before_ages = bank.ages[:bank.count].tolist()
            before_count = bank.count
            out = bank.write(f, np.array(bits, float).reshape(2, 2, 2))
            kind, index, evicted, sv = ref.write(f.tolist(), bits)
            n_writes += 1
            assert (out.kind, out.index, out.evicted) == (kind, index, evicted)
            # dichotomy on the argmax-key slot
            assert out.updated == (sv is not None and sv >= delta)
            # capacity and eviction only when full
            assert bank.count <= m
            assert out.evicted == (out.kind == "inserted" and before_count == m)
            if out.evicted:
                assert before_ages[out.index] == max(before_ages)
            # ages: exactly one zero, everyone else +1
            ages = bank.ages[:bank.count].tolist()
            assert ages.count(0) == 1 and ages[out.index] == 0
            assert all(ages[i] == before_ages[i] + 1 for i in range(before_count) if i != out.index)
            # unit keys and agreement with the reference state
            keys = bank.keys[:bank.count]
            assert np.all(np.abs(np.sqrt((keys * keys).sum(axis=1)) - 1.0) <= 1e-6)
            assert np.max(np.abs(keys - np.array([k for k, _, _ in ref.slots]))) <= 1e-12
            assert bank.values[:bank.count].astype(int).tolist() == [vb for _, vb, _ in ref.slots]
            assert ages == [a for _, _, a in ref.slots]
    assert n_writes > 50_000


# retrieval precision


@given(st.integers(0, 2 ** 31))
def test_retrieval_precision_in_unit_interval(seed):
    rng = np.random.default_rng(seed)
    bank = random_bank(rng, beta=0.05)
    gt = bits_grid(int(rng.integers(256)))
    if bank.count == 0:
        return
    seq = bank.read(bank.keys[0])
    p = bank.retrieval_precision(seq, gt)
    assert 0.0 <= p <= 1.0
    sv = bank.value_similarities(gt)[seq.slots]
    assert p == np.mean(sv >= bank.write_threshold)


def test_retrieval_precision_empty_sequence():
    assert MemoryBank(2, 2, 2).retrieval_precision(RetrievedSequence.empty(8), bits_grid(1)) is None


# snapshots


def test_snapshot_round_trip(tmp_path):
    rng = np.random.default_rng(5)
    bank = MemoryBank(8, 5, 3)
    for _ in range(12):
        bank.write(rng.normal(size=5), (rng.random((3, 3, 3)) > 0.5).astype(float))
    path = tmp_path / "m.vmem"
    snapshot_save(bank, path)
    back = snapshot_load(path, resolution=3)
    assert back.count == bank.count and back.capacity == 8
    for i in range(bank.count):
        k, v, a = bank.slot(i)
        k2, v2, a2 = back.slot(i)
        assert np.array_equal(k.astype(np.float32), k2.astype(np.float32))
        assert v == v2 and a == a2
    assert back.to_bytes() == bank.to_bytes()


def test_snapshot_errors(tmp_path):
    bank = MemoryBank(4, 3, 2)
    bank.write([1.0, 2.0, 3.0], bits_grid(7))
    raw = bank.to_bytes()
    path = tmp_path / "m.vmem"
    path.write_bytes(raw[:-3])
    with pytest.raises(FormatError, match="offset"):
        snapshot_load(path)
    path.write_bytes(b"NOPE" + raw[4:])
    with pytest.raises(FormatError):
        snapshot_load(path)
    path.write_bytes(raw)
    with pytest.raises(ConfigError):
        snapshot_load(path, resolution=4)


def test_write_count_sidecar_and_inspection(tmp_path):
    bank = MemoryBank(4, 2, 2)
    g = bits_grid(0b1111)
    bank.write([1.0, 0.0], g)
    bank.write([1.0, 0.1], g)
    bank.write([0.0, 1.0], bits_grid(0b11110000))
    save_write_counts(bank, tmp_path / "c.json")
    back = MemoryBank.from_bytes(bank.to_bytes())
    load_write_counts(back, tmp_path / "c.json")
    stats = inspect_bank(back)
    assert stats["write_counts"] == [2, 1]
    assert stats["ages"] == [1, 0]
    assert sum(stats["value_similarity_hist"]) == 1
    assert stats["max_key_norm_residual"] < 1e-6
