"""Procedural voxel shapes, silhouette images with occlusion/clutter, and corpus building.

Shapes are compositions of boxes, ellipsoids and cylinders rotated about z in
90 degree steps. Images are three orthographic max-projection silhouettes (one
per axis). Train and test shapes are jittered variants of shared prototypes so
that every test shape has a near-duplicate in the training split.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError, FormatError, GenerationError
from .voxels import VoxelGrid, read_grid, value_similarity, write_voxb

FAMILIES = ("box", "ellipsoid", "cylinder", "composite")
IMGF_MAGIC = b"IMGF"


@dataclass
class Primitive:
    kind: str  # box | ellipsoid | cylinder
    center: tuple
    extents: tuple  # half sizes (box), radii (ellipsoid), (radius_x, radius_y, half_height) (cylinder)
    rotation: int = 0  # quarter turns about z


@dataclass
class ShapeSpec:
    family: str
    primitives: list
    seed: int = 0

    def to_dict(self):
        return {"family": self.family, "seed": self.seed,
                "primitives": [asdict(p) for p in self.primitives]}


def _rasterize(prim, r):
    c = (np.arange(r) + 0.5)[:, None, None], (np.arange(r) + 0.5)[None, :, None], (np.arange(r) + 0.5)[None, None, :]
    x, y, z = (c[i] - prim.center[i] for i in range(3))
    for _ in range(prim.rotation % 4):
        x, y = y, -x
    a, b, h = prim.extents
    if prim.kind == "box":
        return (np.abs(x) <= a) & (np.abs(y) <= b) & (np.abs(z) <= h)
    if prim.kind == "ellipsoid":
        return (x / a) ** 2 + (y / b) ** 2 + (z / h) ** 2 <= 1.0
    if prim.kind == "cylinder":
        return ((x / a) ** 2 + (y / b) ** 2 <= 1.0) & (np.abs(z) <= h)
    raise GenerationError(f"unknown primitive kind {prim.kind!r}")


def generate_shape(spec, r_v=16):
    """Rasterize the union of primitives at voxel centers, keeping a 1-voxel empty margin."""
    occ = np.zeros((r_v, r_v, r_v), dtype=bool)
    for prim in spec.primitives:
        occ |= _rasterize(prim, r_v)
    occ[[0, -1], :, :] = False
    occ[:, [0, -1], :] = False
    occ[:, :, [0, -1]] = False
    if not occ.any():
        raise GenerationError("shape is empty after margin clipping")
    return VoxelGrid(occ.astype(np.float64))


def random_spec(rng, r_v=16, family=None):
    """A random prototype whose size is scaled to the grid resolution."""
    s = r_v / 16.0
    family = family or FAMILIES[int(rng.integers(len(FAMILIES)))]
    mid = r_v / 2.0

    def prim(kind, lo, hi, jitter):
        center = tuple(float(mid + rng.uniform(-jitter, jitter) * s) for _ in range(3))
        ext = tuple(float(rng.uniform(lo, hi) * s) for _ in range(3))
        return Primitive(kind, center, ext, int(rng.integers(4)))

    if family == "composite":
        body_kind = ("box", "ellipsoid", "cylinder")[int(rng.integers(3))]
        prims = [prim(body_kind, 3.0, 5.5, 1.0)]
        for _ in range(int(rng.integers(1, 4))):
            kind = ("box", "ellipsoid", "cylinder")[int(rng.integers(3))]
            prims.append(prim(kind, 1.5, 3.5, 4.0))
    else:
        prims = [prim(family, 3.0, 7.0, 1.0)]
    return ShapeSpec(family, prims, int(rng.integers(2 ** 31)))


def jitter_spec(spec, rng, r_v=16, shift=0.5, stretch=0.08):
    """A near-duplicate: every primitive nudged and rescaled slightly."""
    s = r_v / 16.0
    prims = []
    for p in spec.primitives:
        center = tuple(float(c + rng.uniform(-shift, shift) * s) for c in p.center)
        ext = tuple(float(e * rng.uniform(1.0 - stretch, 1.0 + stretch)) for e in p.extents)
        prims.append(Primitive(p.kind, center, ext, p.rotation))
    return ShapeSpec(spec.family, prims, int(rng.integers(2 ** 31)))


@dataclass
class CorruptionParams:
    occlusion: float = 0.0  # target fraction of object pixels hidden per channel
    clutter: float = 0.0  # fraction of background pixels covered by noise patches

    def validate(self):
        if not 0.0 <= self.occlusion <= 0.6:
            raise ConfigError(f"occlusion fraction must lie in [0, 0.6], got {self.occlusion}")
        if not 0.0 <= self.clutter <= 0.5:
            raise ConfigError(f"clutter density must lie in [0, 0.5], got {self.clutter}")


@dataclass
class RenderedExample:
    image: np.ndarray  # (3, r_i, r_i)
    gt: VoxelGrid
    corruption: dict = field(default_factory=dict)


def silhouettes(gt, r_i):
    """Max-projections along x, y and z, resampled to ``r_i`` by nearest neighbour."""
    occ = gt.values > 0.5
    r = occ.shape[0]
    pick = (np.arange(r_i) * r) // r_i
    chans = [occ.any(axis=a)[np.ix_(pick, pick)] for a in range(3)]
    return np.stack(chans).astype(np.float64)


def _occlude(chan, frac, rng):
    """Zero a strip through the silhouette's bounding box hiding ~``frac`` of its pixels."""
    obj = chan > 0
    total = int(obj.sum())
    if frac <= 0 or total == 0:
        return None
    rows, cols = np.flatnonzero(obj.any(axis=1)), np.flatnonzero(obj.any(axis=0))
    r0, r1, c0, c1 = rows[0], rows[-1] + 1, cols[0], cols[-1] + 1
    vertical = bool(rng.integers(2))
    from_start = bool(rng.integers(2))
    counts = obj[r0:r1, c0:c1].sum(axis=0 if vertical else 1)
    if not from_start:
        counts = counts[::-1]
    cum = np.cumsum(counts) / total
    width = int(np.argmin(np.abs(cum - frac))) + 1
    if vertical:
        a, b = (c0, c0 + width) if from_start else (c1 - width, c1)
        rect = (int(r0), int(r1), int(a), int(b))
    else:
        a, b = (r0, r0 + width) if from_start else (r1 - width, r1)
        rect = (int(a), int(b), int(c0), int(c1))
    return rect


def _clutter(chan, density, rng):
    """Noise patches placed on background pixels until ``density`` of them are covered."""
    bg = chan == 0
    n_bg = int(bg.sum())
    if density <= 0 or n_bg == 0:
        return chan, 0
    n = chan.shape[0]
    covered = np.zeros_like(bg)
    patches = 0
    while covered[bg].sum() < density * n_bg and patches < 10_000:
        h, w = rng.integers(2, max(3, n // 4), size=2)
        r, c = rng.integers(0, n - h + 1), rng.integers(0, n - w + 1)
        covered[r:r + h, c:c + w] = True
        patches += 1
    mask = covered & bg
    out = chan.copy()
    out[mask] = rng.random(int(mask.sum()))
    return out, patches


def render(gt, corruption=None, seed=0, r_i=32):
    """Silhouette image of ``gt`` with optional clutter and occluders."""
    corruption = corruption or CorruptionParams()
    corruption.validate()
    rng = np.random.default_rng(seed)
    image = silhouettes(gt, r_i)
    record = {"occlusion": corruption.occlusion, "clutter": corruption.clutter, "seed": int(seed),
              "occluders": [], "clutter_patches": []}
    for ch in range(image.shape[0]):
        clean = image[ch].copy()
        image[ch], patches = _clutter(clean, corruption.clutter, rng)
        record["clutter_patches"].append(int(patches))
        rect = _occlude(clean, corruption.occlusion, rng)
        if rect is not None:
            r0, r1, c0, c1 = rect
            image[ch, r0:r1, c0:c1] = 0.0
            record["occluders"].append([ch, *rect])
    return RenderedExample(image, gt, record)


def fresh_corruptions(gts, rng, r_i=32, occlusion_max=0.5, clutter_max=0.25):
    """Re-render flat binary ground truths with newly drawn corruption levels and seeds."""
    images = []
    for bits in gts:
        r = round(bits.size ** (1.0 / 3.0))
        corr = CorruptionParams(float(rng.uniform(0, occlusion_max)), float(rng.uniform(0, clutter_max)))
        grid = VoxelGrid(bits.reshape(r, r, r).astype(np.float64))
        images.append(render(grid, corr, int(rng.integers(2 ** 31)), r_i).image)
    return np.array(images)


def write_imgf(path, image):
    c, h, w = image.shape
    with open(path, "wb") as fh:
        fh.write(IMGF_MAGIC + struct.pack("<III", c, h, w)
                 + np.ascontiguousarray(image, dtype="<f4").tobytes())


def read_imgf(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < 16:
        raise FormatError("truncated image header", len(buf))
    if buf[:4] != IMGF_MAGIC:
        raise FormatError("not an IMGF image", 0)
    c, h, w = struct.unpack("<III", buf[4:16])
    need = 4 * c * h * w
    if len(buf) - 16 != need:
        raise FormatError(f"expected {need} payload bytes, found {len(buf) - 16}", 16 + min(need, len(buf) - 16))
    return np.frombuffer(buf, dtype="<f4", offset=16).astype(np.float64).reshape(c, h, w)


@dataclass
class CorpusConfig:
    n_train: int = 500
    n_test: int = 100
    n_prototypes: int = 160
    r_v: int = 16
    r_i: int = 32
    seed: int = 7
    delta: float = 0.90
    test_occlusion: float = 0.5
    test_clutter: float = 0.25
    train_occlusion_max: float = 0.5
    train_clutter_max: float = 0.25
    max_retries: int = 50


@dataclass
class Corpus:
    """In-memory corpus: per split, images ``(n, 3, r_i, r_i)``, gts ``(n, r_v**3)`` and records."""

    config: CorpusConfig
    splits: dict

    def digest(self):
        """SHA-256 over records, images and ground truths of every split."""
        h = hashlib.sha256()
        for split in sorted(self.splits):
            data = self.splits[split]
            h.update(json.dumps(data["records"], sort_keys=True).encode())
            h.update(np.ascontiguousarray(data["images"], dtype="<f4").tobytes())
            h.update(np.packbits(np.asarray(data["gts"], dtype=bool)).tobytes())
        return h.hexdigest()

    def images(self, split):
        return self.splits[split]["images"]

    def gts(self, split):
        return self.splits[split]["gts"]

    def records(self, split):
        return self.splits[split]["records"]


SPLITS = ("train", "test-clean", "test-occluded")


def generate_corpus(cfg):
    """Build all three splits in memory, deterministic in ``cfg.seed``."""
    if min(cfg.n_train, cfg.n_test, cfg.n_prototypes) < 1:
        raise ConfigError("corpus counts must be positive")
    rng = np.random.default_rng(cfg.seed)
    prototypes = []
    while len(prototypes) < cfg.n_prototypes:
        spec = random_spec(rng, cfg.r_v)
        try:
            grid = generate_shape(spec, cfg.r_v)
        except GenerationError:
            continue
        occupancy = grid.occupied() / cfg.r_v ** 3
        if 0.15 <= occupancy <= 0.55:
            prototypes.append(spec)

    def variant(proto_id):
        for _ in range(cfg.max_retries):
            spec = jitter_spec(prototypes[proto_id], rng, cfg.r_v)
            try:
                return spec, generate_shape(spec, cfg.r_v)
            except GenerationError:
                continue
        raise GenerationError(f"prototype {proto_id} keeps producing empty variants")

    train = []
    for i in range(cfg.n_train):
        pid = i % cfg.n_prototypes if i < cfg.n_prototypes else int(rng.integers(cfg.n_prototypes))
        spec, grid = variant(pid)
        corr = CorruptionParams(float(rng.uniform(0, cfg.train_occlusion_max)),
                                float(rng.uniform(0, cfg.train_clutter_max)))
        train.append((pid, spec, grid, corr, int(rng.integers(2 ** 31))))
    train_bits = np.array([g.flat() > 0.5 for _, _, g, _, _ in train])

    test = []
    for i in range(cfg.n_test):
        pid = int(rng.integers(cfg.n_prototypes))
        for _ in range(cfg.max_retries):
            spec, grid = variant(pid)
            diff = np.count_nonzero(train_bits != (grid.flat() > 0.5), axis=1)
            if 1.0 - diff.min() / cfg.r_v ** 3 >= cfg.delta:
                break
        else:
            raise GenerationError(f"test shape {i} has no training near-duplicate after "
                                  f"{cfg.max_retries} retries")
        test.append((pid, spec, grid, int(rng.integers(2 ** 31))))

    splits = {}
    rows = []
    for pid, spec, grid, corr, seed in train:
        rows.append(("train", pid, spec, grid, corr, seed))
    for pid, spec, grid, seed in test:
        rows.append(("test-clean", pid, spec, grid, CorruptionParams(), seed))
    for pid, spec, grid, seed in test:
        rows.append(("test-occluded", pid, spec, grid,
                     CorruptionParams(cfg.test_occlusion, cfg.test_clutter), seed))
    for split in SPLITS:
        chosen = [r for r in rows if r[0] == split]
        images, gts, records = [], [], []
        for k, (_, pid, spec, grid, corr, seed) in enumerate(chosen):
            ex = render(grid, corr, seed, cfg.r_i)
            # stored as f32 on disk; round here so in-memory and loaded corpora agree
            images.append(ex.image.astype(np.float32).astype(np.float64))
            gts.append(grid.flat() > 0.5)
            records.append({"id": f"{split}-{k:04d}", "split": split, "prototype": pid,
                            "family": spec.family, "seed": seed, "shape": spec.to_dict(),
                            "corruption": ex.corruption})
        splits[split] = {"images": np.array(images), "gts": np.array(gts), "records": records}
    return Corpus(cfg, splits)


def near_duplicate_report(corpus, delta=None):
    """Best training value similarity for every test shape (exhaustive scan)."""
    delta = corpus.config.delta if delta is None else delta
    train = corpus.gts("train")
    n_v = train.shape[1]
    best = []
    for g in corpus.gts("test-clean"):
        best.append(1.0 - np.count_nonzero(train != g, axis=1).min() / n_v)
    best = np.array(best)
    return best, bool(np.all(best >= delta))


def write_corpus(corpus, root):
    """Write VOXB grids, IMGF images and ``manifest.jsonl`` under ``root``."""
    os.makedirs(root, exist_ok=True)
    cfg = corpus.config
    lines = [json.dumps({"record": "header", "config": asdict(cfg)}, sort_keys=True)]
    r = cfg.r_v
    for split in SPLITS:
        os.makedirs(os.path.join(root, split), exist_ok=True)
        data = corpus.splits[split]
        for k, rec in enumerate(data["records"]):
            img_rel = f"{split}/{k:04d}.imgf"
            vox_rel = f"{split}/{k:04d}.voxb"
            write_imgf(os.path.join(root, img_rel), data["images"][k])
            write_voxb(os.path.join(root, vox_rel),
                       VoxelGrid(data["gts"][k].reshape(r, r, r).astype(np.float64)))
            entry = dict(rec, record="item", image=img_rel, voxels=vox_rel)
            lines.append(json.dumps(entry, sort_keys=True))
    with open(os.path.join(root, "manifest.jsonl"), "w") as fh:
        fh.write("\n".join(lines) + "\n")


def build_corpus(cfg, root):
    """Generate, verify the near-duplicate guarantee, and write the corpus. Returns it."""
    corpus = generate_corpus(cfg)
    _, ok = near_duplicate_report(corpus)
    if not ok:
        raise GenerationError("near-duplicate guarantee violated")
    write_corpus(corpus, root)
    return corpus


def load_corpus(root, splits=SPLITS):
    path = os.path.join(root, "manifest.jsonl")
    if not os.path.exists(path):
        raise FileNotFoundError(f"no manifest at {path}")
    with open(path) as fh:
        lines = [json.loads(line) for line in fh if line.strip()]
    header = lines[0]
    if header.get("record") != "header":
        raise FormatError("manifest does not start with a header record", 0)
    cfg = CorpusConfig(**header["config"])
    out = {}
    for split in splits:
        items = [e for e in lines[1:] if e["split"] == split]
        images, gts = [], []
        for e in items:
            try:
                images.append(read_imgf(os.path.join(root, e["image"])))
                gts.append(read_grid(os.path.join(root, e["voxels"])).flat() > 0.5)
            except FileNotFoundError as exc:
                raise FileNotFoundError(f"item {e['id']}: missing file {exc.filename}") from None
        records = [{k: v for k, v in e.items() if k not in ("record", "image", "voxels")} for e in items]
        out[split] = {"images": np.array(images), "gts": np.array(gts), "records": records}
    return Corpus(cfg, out)


def corpus_hash(root):
    """SHA-256 over the manifest and every file it references, in manifest order."""
    h = hashlib.sha256()
    with open(os.path.join(root, "manifest.jsonl"), "rb") as fh:
        manifest = fh.read()
    h.update(manifest)
    for line in manifest.decode().splitlines()[1:]:
        e = json.loads(line)
        for key in ("image", "voxels"):
            with open(os.path.join(root, e[key]), "rb") as fh:
                h.update(fh.read())
    return h.hexdigest()
