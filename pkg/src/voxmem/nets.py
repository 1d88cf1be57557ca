"""Trainable networks and losses.

Dense stand-ins for the convolutional image encoder and shape decoder, plus the
shape-prior encoder that turns a retrieved volume sequence into a fixed-length
vector. Everything is built on :mod:`voxmem.autodiff`.
"""

from __future__ import annotations

import numpy as np

from .autodiff import (Tensor, add, concat, cosine, linear, lstm_cell, lstm_sequence, matmul, mul, relu,
                       reshape, scale, sigmoid, sub, sum_, take_rows, tanh)
from .errors import ConfigError, DimensionError
from .memory import RetrievedSequence

FUSION_MODES = ("lstm", "average", "top1")


def _uniform(rng, fan_in, shape, name):
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, name=name)


class Dense:
    def __init__(self, n_in, n_out, rng, name):
        self.w = _uniform(rng, n_in, (n_in, n_out), f"{name}.w")
        self.b = _uniform(rng, n_in, (n_out,), f"{name}.b")

    def __call__(self, x):
        return linear(x, self.w, self.b)

    def parameters(self):
        return [self.w, self.b]


def _row(x):
    x = x if isinstance(x, Tensor) else Tensor(x)
    return reshape(x, (1, -1))


class EncoderNet:
    """flatten -> dense(hidden, relu) -> dense(n_k)."""

    def __init__(self, in_dim, n_k=128, hidden=256, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_dim = in_dim
        self.n_k = n_k
        self.l1 = Dense(in_dim, hidden, rng, "encoder.l1")
        self.l2 = Dense(hidden, n_k, rng, "encoder.l2")

    def __call__(self, images):
        x = images if isinstance(images, Tensor) else Tensor(images)
        if x.data.ndim != 2:
            x = reshape(x, (x.shape[0], -1))
        if x.shape[1] != self.in_dim:
            raise DimensionError(f"encoder expects {self.in_dim} inputs per image, got {x.shape[1]}")
        return self.l2(relu(self.l1(x)))

    def parameters(self):
        return self.l1.parameters() + self.l2.parameters()


def encode_image(net, img):
    """Feature vector of one image (any shape with ``in_dim`` elements)."""
    x = img if isinstance(img, Tensor) else Tensor(img)
    if x.size != net.in_dim:
        raise DimensionError(f"encoder expects {net.in_dim} inputs, got image of shape {x.shape}")
    return reshape(net(_row(x)), (-1,))


class LstmShapeEncoder:
    """Projects each retrieved volume to ``n_e`` dims, then fuses the sequence into ``n_h`` dims.

    ``fusion`` selects the LSTM (default), the mean of projected volumes, or the
    top-ranked projected volume alone. The last two pass through a dense tanh
    head so every mode emits a vector of the same size.
    """

    def __init__(self, n_v, n_e=64, n_h=128, rng=None, fusion="lstm", order="ascending"):
        if fusion not in FUSION_MODES:
            raise ConfigError(f"unknown fusion mode {fusion!r}")
        if order not in ("ascending", "descending"):
            raise ConfigError(f"unknown sequence order {order!r}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.n_v, self.n_e, self.n_h = n_v, n_e, n_h
        self.fusion = fusion
        self.order = order
        self.proj = Dense(n_v, n_e, rng, "shape.proj")
        if fusion == "lstm":
            self.w = _uniform(rng, n_e + n_h, (n_e + n_h, 4 * n_h), "shape.lstm.w")
            self.b = _uniform(rng, n_e + n_h, (4 * n_h,), "shape.lstm.b")
        else:
            self.head = Dense(n_e, n_h, rng, "shape.head")

    def parameters(self):
        ps = self.proj.parameters()
        return ps + ([self.w, self.b] if self.fusion == "lstm" else self.head.parameters())

    def __call__(self, seqs):
        return encode_batch(self, seqs)


def lstm_step(enc, x, h, c):
    """One LSTM step for a single example; returns ``(h', c')`` as 1-D tensors."""
    for t, n, what in ((x, enc.n_e, "x"), (h, enc.n_h, "h"), (c, enc.n_h, "c")):
        if t.size != n:
            raise DimensionError(f"lstm_step: {what} has {t.size} entries, expected {n}")
    h2, c2 = lstm_cell(_row(x), _row(h), _row(c), enc.w, enc.b)
    return reshape(h2, (-1,)), reshape(c2, (-1,))


def encode_batch(enc, seqs):
    """Shape prior vectors ``(B, n_h)`` for a batch of retrieved sequences.

    Empty sequences map to the zero vector. Volumes shared by several sequences
    (same memory slot) are projected once.
    """
    batch = len(seqs)
    lengths = np.array([len(s) for s in seqs])
    if lengths.sum() == 0:
        return Tensor(np.zeros((batch, enc.n_h)))
    for s in seqs:
        if len(s) and s.values.shape[1] != enc.n_v:
            raise DimensionError(f"retrieved volume has {s.values.shape[1]} voxels, expected {enc.n_v}")

    # unique rows: slot id when known, otherwise each row is its own entry
    table, rows_of = {}, []
    stacked = []
    for b, s in enumerate(seqs):
        idx = []
        for j in range(len(s)):
            key = ("slot", int(s.slots[j])) if s.slots[j] >= 0 else ("row", b, j)
            if key not in table:
                table[key] = len(stacked)
                stacked.append(s.values[j])
            idx.append(table[key])
        rows_of.append(idx)
    projected = enc.proj(Tensor(np.asarray(stacked, dtype=np.float64)))

    if enc.fusion == "lstm":
        steps = int(lengths.max())
        gather = np.zeros((steps, batch), dtype=np.int64)
        mask = np.zeros((steps, batch))
        for b, idx in enumerate(rows_of):
            # ascending order: least similar first, most similar last
            seq = idx[::-1] if enc.order == "ascending" else idx
            gather[:len(seq), b] = seq
            mask[:len(seq), b] = 1.0
        xs = reshape(take_rows(projected, gather.reshape(-1)), (steps, batch, enc.n_e))
        return lstm_sequence(xs, mask, enc.w, enc.b)

    weights = np.zeros((batch, len(stacked)))
    for b, idx in enumerate(rows_of):
        if not idx:
            continue
        if enc.fusion == "top1":
            weights[b, idx[0]] = 1.0
        else:
            for j in idx:
                weights[b, j] += 1.0 / len(idx)
    fused = tanh(enc.head(matmul(Tensor(weights), projected)))
    keep = (lengths > 0).astype(np.float64)[:, None] * np.ones((1, enc.n_h))
    return mul(fused, Tensor(keep))


def encode_shapes(enc, seq):
    """Shape prior vector ``(n_h,)`` of one retrieved sequence."""
    return reshape(encode_batch(enc, [seq]), (-1,))


class DecoderNet:
    """concat(feature, prior) -> dense(hidden, relu) -> dense(r_v**3) -> sigmoid."""

    def __init__(self, n_k, n_h, n_v, hidden=512, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.n_k, self.n_h, self.n_v = n_k, n_h, n_v
        self.l1 = Dense(n_k + n_h, hidden, rng, "decoder.l1")
        self.l2 = Dense(hidden, n_v, rng, "decoder.l2")

    def __call__(self, f, prior):
        if f.data.ndim != 2 or prior.data.ndim != 2 or f.shape[1] != self.n_k or prior.shape[1] != self.n_h:
            raise DimensionError(f"decoder expects (B, {self.n_k}) and (B, {self.n_h}), "
                                 f"got {f.shape} and {prior.shape}")
        return sigmoid(self.l2(relu(self.l1(concat([f, prior])))))

    def parameters(self):
        return self.l1.parameters() + self.l2.parameters()


def decode(net, f, prior):
    """Occupancy probabilities ``(r_v**3,)`` from one feature vector and one prior vector."""
    if f.size != net.n_k or prior.size != net.n_h:
        raise DimensionError(f"decode: got feature {f.shape} and prior {prior.shape}")
    return reshape(net(_row(f), _row(prior)), (-1,))


def triplet_loss(s_kb, s_kp, alpha=0.1):
    """Hinge ``max(s_kb - s_kp + alpha, 0)``; zero subgradient at the kink."""
    s_kb = s_kb if isinstance(s_kb, Tensor) else Tensor(s_kb)
    s_kp = s_kp if isinstance(s_kp, Tensor) else Tensor(s_kp)
    return relu(add(sub(s_kb, s_kp), Tensor(float(alpha))))


def total_loss(l_t, l_r):
    l_t = l_t if isinstance(l_t, Tensor) else Tensor(l_t)
    l_r = l_r if isinstance(l_r, Tensor) else Tensor(l_r)
    return add(l_t, l_r)


def batch_triplet_loss(features, rows, pos_keys, neg_keys, batch, alpha=0.1):
    """Mean hinge over a batch; ``rows`` index the examples that have a mined triplet.

    Examples without a triplet contribute zero but still count in the mean.
    """
    if len(rows) == 0:
        return Tensor(0.0)
    f = take_rows(features, np.asarray(rows))
    s_kp = cosine(f, Tensor(np.asarray(pos_keys)))
    s_kb = cosine(f, Tensor(np.asarray(neg_keys)))
    return scale(sum_(triplet_loss(s_kb, s_kp, alpha)), 1.0 / batch)


class Model:
    """Image encoder, shape-prior encoder and decoder sharing one seeded initialisation."""

    def __init__(self, in_dim, r_v, n_k=128, n_e=64, n_h=128, encoder_hidden=256,
                 decoder_hidden=512, fusion="lstm", order="ascending", seed=0):
        rng = np.random.default_rng(seed)
        self.n_v = r_v ** 3
        self.encoder = EncoderNet(in_dim, n_k, encoder_hidden, rng)
        self.shape_encoder = LstmShapeEncoder(self.n_v, n_e, n_h, rng, fusion, order)
        self.decoder = DecoderNet(n_k, n_h, self.n_v, decoder_hidden, rng)

    def parameters(self):
        return (self.encoder.parameters() + self.shape_encoder.parameters()
                + self.decoder.parameters())

    def named_parameters(self):
        return {p.name: p for p in self.parameters()}

    def load_state(self, arrays):
        named = self.named_parameters()
        missing = set(named) - set(arrays)
        extra = set(arrays) - set(named)
        if missing or extra:
            raise ConfigError(f"checkpoint does not match model: missing {sorted(missing)}, "
                              f"unexpected {sorted(extra)}")
        for name, p in named.items():
            if arrays[name].shape != p.shape:
                raise DimensionError(f"checkpoint tensor {name} has shape {arrays[name].shape}, "
                                     f"model expects {p.shape}")
            p.data[...] = arrays[name]

    def zero_prior(self, batch):
        return Tensor(np.zeros((batch, self.shape_encoder.n_h)))


__all__ = ["Dense", "EncoderNet", "LstmShapeEncoder", "DecoderNet", "Model", "encode_image",
           "lstm_step", "encode_batch", "encode_shapes", "decode", "triplet_loss", "total_loss",
           "batch_triplet_loss", "RetrievedSequence", "FUSION_MODES"]
