"""Training loop, evaluation and the ablation harness."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .autodiff import AdamState, Tape, Tensor, adam_step, zero_grad
from .errors import ConfigError, ContractError
from .memory import MemoryBank, RetrievedSequence
from .mesh import surface_f_scores
from .synth import fresh_corruptions
from .nets import Model, batch_triplet_loss, encode_batch, total_loss
from .voxels import VoxelGrid, bce_rows, iou

log = logging.getLogger(__name__)


def build_model(cfg):
    return Model(cfg.image_dim, cfg.r_v, n_k=cfg.n_k, n_e=cfg.n_e, n_h=cfg.n_h,
                 encoder_hidden=cfg.encoder_hidden, decoder_hidden=cfg.decoder_hidden,
                 fusion=cfg.fusion, order=cfg.sequence_order, seed=cfg.model_seed)


def build_bank(cfg):
    return MemoryBank(cfg.capacity, cfg.n_k, cfg.r_v, cfg.read_threshold, cfg.write_threshold)


@dataclass
class StepMetrics:
    l_t: float
    l_r: float
    l_total: float
    retrieved: list
    precision: list
    triplets: int
    inserted: int = 0
    updated: int = 0


def _check_dims(cfg, model, bank, images, gts):
    if images.shape[1:] != (3, cfg.r_i, cfg.r_i) and images.reshape(len(images), -1).shape[1] != cfg.image_dim:
        raise ConfigError(f"images have shape {images.shape[1:]}, config expects (3, {cfg.r_i}, {cfg.r_i})")
    if gts.shape[1] != cfg.r_v ** 3:
        raise ConfigError(f"ground truth has {gts.shape[1]} voxels, config expects {cfg.r_v ** 3}")
    if model.encoder.n_k != cfg.n_k or model.n_v != cfg.r_v ** 3:
        raise ConfigError("model dimensions do not match config")
    if bank is not None and (bank.key_dim != cfg.n_k or bank.resolution != cfg.r_v):
        raise ConfigError("memory dimensions do not match config")


def forward_batch(cfg, model, bank, images):
    """Encode, read memory, fuse. Returns ``(features, prior, sequences)``."""
    feats = model.encoder(Tensor(images.reshape(len(images), -1)))
    if cfg.memory_enabled and bank is not None:
        seqs = [bank.read(feats.data[b]) for b in range(len(images))]
        prior = encode_batch(model.shape_encoder, seqs)
    else:
        seqs = [RetrievedSequence.empty(model.n_v) for _ in range(len(images))]
        prior = model.zero_prior(len(images))
    return feats, prior, seqs


def train_step(cfg, model, bank, adam, images, gts, step=0):
    """One optimisation step on a batch, then memory writes in batch order."""
    _check_dims(cfg, model, bank, images, gts)
    params = model.parameters()
    gts_f = gts.astype(np.float64)
    batch = len(images)
    clock_before = bank.clock if bank is not None else 0
    with Tape() as tape:
        feats, prior, seqs = forward_batch(cfg, model, bank, images)
        if cfg.check_invariants and bank is not None:
            for s in seqs:
                if len(s) and np.any(bank.last_write[s.slots] > clock_before):
                    raise ContractError("read returned a slot written during the current step")
        probs = model.decoder(feats, prior)
        l_r = bce_rows(probs, gts_f).mean()
        rows, pos, neg = [], [], []
        if cfg.memory_enabled and cfg.triplet_enabled:
            for b in range(batch):
                trip = bank.mine_triplet(feats.data[b], gts[b])
                if trip is not None:
                    rows.append(b)
                    pos.append(bank.keys[trip.positive].copy())
                    neg.append(bank.keys[trip.negative].copy())
        l_t = batch_triplet_loss(feats, rows, pos, neg, batch, cfg.margin)
        loss = total_loss(l_t, l_r)
        tape.backward(loss)
    if cfg.check_invariants and loss.item() != l_t.item() + l_r.item():
        raise ContractError("logged total loss differs from the sum of its terms")
    adam_step(params, adam)
    zero_grad(params)

    metrics = StepMetrics(l_t.item(), l_r.item(), loss.item(),
                          [len(s) for s in seqs],
                          [bank.retrieval_precision(s, gts[b]) if bank is not None else None
                           for b, s in enumerate(seqs)],
                          len(rows))
    if cfg.memory_enabled and bank is not None:
        keys = feats.data
        if cfg.write_keys == "refreshed":
            keys = model.encoder(Tensor(images.reshape(batch, -1))).data
        for b in range(batch):
            out = bank.write(keys[b], gts[b])
            if out.updated:
                metrics.updated += 1
            else:
                metrics.inserted += 1
            if cfg.check_invariants:
                _check_bank(bank, out)
    return metrics


def _check_bank(bank, outcome):
    ages = bank.ages[:bank.count]
    if bank.count > bank.capacity or np.count_nonzero(ages == 0) != 1 or ages[outcome.index] != 0:
        raise ContractError("memory age/capacity invariant violated")
    norms = np.linalg.norm(bank.keys[:bank.count], axis=1)
    if np.any(np.abs(norms - 1.0) > 1e-6):
        raise ContractError("memory key lost unit norm")


@dataclass
class TrainResult:
    model: Model
    bank: MemoryBank
    epochs: list = field(default_factory=list)  # per-epoch summaries
    steps: list = field(default_factory=list)  # per-step loss ledger


def train(cfg, corpus, progress=None):
    """Train a fresh model (and memory) on the corpus' train split."""
    images = corpus.images("train")
    gts = corpus.gts("train")
    model = build_model(cfg)
    bank = build_bank(cfg) if cfg.memory_enabled else None
    adam = AdamState(lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.adam_eps)
    rng = np.random.default_rng(cfg.train_seed)
    result = TrainResult(model, bank)
    step = 0
    for epoch in range(cfg.epochs):
        adam.lr = cfg.lr * (0.5 if epoch >= cfg.lr_decay_epoch else 1.0)
        order = rng.permutation(len(images))
        epoch_images = images
        if cfg.augment and epoch > 0:
            epoch_images = fresh_corruptions(gts, rng, cfg.r_i, cfg.train_occlusion_max,
                                             cfg.train_clutter_max)
        acc = {"l_t": 0.0, "l_r": 0.0, "l_total": 0.0, "retrieved": 0, "precision": [],
               "triplets": 0, "inserted": 0, "updated": 0}
        n_steps = 0
        t0 = time.perf_counter()
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            m = train_step(cfg, model, bank, adam, epoch_images[idx], gts[idx], step)
            result.steps.append({"epoch": epoch, "step": step, "l_t": m.l_t, "l_r": m.l_r,
                                 "l_total": m.l_total})
            for k in ("l_t", "l_r", "l_total"):
                acc[k] += getattr(m, k)
            acc["retrieved"] += sum(m.retrieved)
            acc["precision"] += [p for p in m.precision if p is not None]
            acc["triplets"] += m.triplets
            acc["inserted"] += m.inserted
            acc["updated"] += m.updated
            n_steps += 1
            step += 1
        summary = {
            "epoch": epoch, "lr": adam.lr,
            "l_t": acc["l_t"] / n_steps, "l_r": acc["l_r"] / n_steps,
            "l_total": acc["l_total"] / n_steps,
            "memory_slots": len(bank) if bank is not None else 0,
            "mean_retrieved": acc["retrieved"] / len(images),
            "retrieval_precision": float(np.mean(acc["precision"])) if acc["precision"] else None,
            "triplet_fraction": acc["triplets"] / len(images),
            "inserted": acc["inserted"], "updated": acc["updated"],
        }
        result.epochs.append(summary)
        log.info("epoch %d  l_t=%.4f l_r=%.4f slots=%d retrieved=%.1f (%.1fs)", epoch,
                 summary["l_t"], summary["l_r"], summary["memory_slots"],
                 summary["mean_retrieved"], time.perf_counter() - t0)
        if progress is not None:
            progress(summary)
    return result


def reconstruct(cfg, model, bank, images):
    """Occupancy probabilities ``(n, r_v**3)`` and retrieved sequences; never writes memory."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 3:
        images = images[None]
    feats, prior, seqs = forward_batch(cfg, model, bank, images)
    return model.decoder(feats, prior).data, seqs


def evaluate(cfg, model, bank, corpus, split="test-occluded", batch=32, with_fscore=True):
    """Per-item IoU, F-Scores and retrieval statistics plus their means. Memory stays frozen."""
    if cfg.memory_enabled and bank is None:
        raise ConfigError("memory is enabled but no memory snapshot was supplied")
    before = bank.digest() if bank is not None else None
    images = corpus.images(split)
    gts = corpus.gts(split)
    records = corpus.records(split)
    r = cfg.r_v
    items = []
    for start in range(0, len(images), batch):
        probs, seqs = reconstruct(cfg, model, bank, images[start:start + batch])
        for k in range(len(probs)):
            i = start + k
            gt = gts[i].astype(np.float64)
            pred = VoxelGrid(probs[k].reshape(r, r, r))
            item = {"id": records[i]["id"], "iou": iou(pred, gt.reshape(r, r, r), cfg.iou_threshold),
                    "retrieved": len(seqs[k])}
            prec = bank.retrieval_precision(seqs[k], gts[i]) if bank is not None else None
            item["retrieval_precision"] = prec
            if with_fscore:
                scores = surface_f_scores(pred, VoxelGrid(gt.reshape(r, r, r)), cfg.fscore_d,
                                          cfg.iso_level, cfg.n_points, cfg.eval_seed + i)
                for d, p, rr, f in scores:
                    item[f"precision@{d:g}"] = p
                    item[f"recall@{d:g}"] = rr
                    item[f"fscore@{d:g}"] = f
            items.append(item)
    if bank is not None and bank.digest() != before:
        raise ContractError("evaluation modified the memory")
    return EvalReport(split, items, cfg)


@dataclass
class EvalReport:
    split: str
    items: list
    config: object

    def mean(self, key):
        vals = [it[key] for it in self.items if it.get(key) is not None]
        return float(np.mean(vals)) if vals else None

    def summary(self):
        out = {"split": self.split, "n_items": len(self.items), "mean_iou": self.mean("iou"),
               "mean_retrieved": self.mean("retrieved"),
               "mean_retrieval_precision": self.mean("retrieval_precision")}
        for d in self.config.fscore_d:
            for k in ("precision", "recall", "fscore"):
                key = f"{k}@{d:g}"
                if self.items and key in self.items[0]:
                    out[f"mean_{key}"] = self.mean(key)
        return out
