"""Conv64F backbone, prototype classifier and training losses."""
from __future__ import annotations

import math
from collections import OrderedDict

import numpy as np

from .autodiff import NonFiniteError, Parameter, ShapeError, Tensor, kaiming_uniform
from .autodiff import functional as F
from .autodiff.functional import BatchNormState, log_softmax_np
from .episodes import NO_ROTATION

N_ROTATIONS = 4


class Backbone:
    """Four blocks of 3x3 conv -> batchnorm -> ReLU -> 2x2 max-pool.

    The conv layers carry no bias (batchnorm's shift makes it redundant).
    The flattened output has ``filters * (H // 16) * (W // 16)`` features.
    """

    def __init__(self, in_shape=(1, 28, 28), filters=64, blocks=4, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        c, h, w = in_shape
        if h >> blocks < 1 or w >> blocks < 1:
            raise ShapeError(f"input {in_shape} is too small for {blocks} pooling stages")
        self.in_shape = tuple(int(v) for v in in_shape)
        self.filters = filters
        self.blocks = []
        cin = c
        for i in range(blocks):
            fan_in = cin * 9
            conv = Parameter(kaiming_uniform((filters, cin, 3, 3), fan_in, rng), name=f"backbone.{i}.conv.weight")
            gamma = Parameter(np.ones(filters, dtype=np.float32), name=f"backbone.{i}.bn.weight")
            beta = Parameter(np.zeros(filters, dtype=np.float32), name=f"backbone.{i}.bn.bias")
            self.blocks.append((conv, gamma, beta, BatchNormState(filters)))
            cin = filters
        self.embed_dim = filters * (h >> blocks) * (w >> blocks)

    def parameters(self):
        out = OrderedDict()
        for conv, gamma, beta, _ in self.blocks:
            for p in (conv, gamma, beta):
                out[p.name] = p
        return out

    def forward(self, x, training):
        if tuple(x.shape[1:]) != self.in_shape:
            raise ShapeError(f"embed: images of shape {tuple(x.shape[1:])} do not match backbone input {self.in_shape}")
        for conv, gamma, beta, state in self.blocks:
            x = F.conv2d(x, conv)
            x = F.batchnorm2d(x, gamma, beta, state, training=training)
            x = F.maxpool2x2(F.relu(x))
        return F.flatten(x)


class RotationHead:
    """One fully connected layer from the embedding to four rotation logits."""

    def __init__(self, embed_dim, rng=None):
        rng = rng if rng is not None else np.random.default_rng(1)
        self.weight = Parameter(kaiming_uniform((N_ROTATIONS, embed_dim), embed_dim, rng), name="rotation_head.weight")
        self.bias = Parameter(np.zeros(N_ROTATIONS, dtype=np.float32), name="rotation_head.bias")

    def parameters(self):
        return OrderedDict((p.name, p) for p in (self.weight, self.bias))

    def __call__(self, emb):
        return F.linear(emb, self.weight, self.bias)


class ProtoNet:
    """Backbone plus rotation head, with train/eval mode for batchnorm.

    ``eq5_literal`` switches the query score from softmax over negative
    squared distances (default) to distances normalised by their sum.
    """

    def __init__(self, in_shape=(1, 28, 28), filters=64, gamma=1.0, eq5_literal=False, seed=0):
        seed_ss = np.random.SeedSequence(seed)
        b_ss, h_ss = seed_ss.spawn(2)
        self.backbone = Backbone(in_shape, filters, rng=np.random.default_rng(b_ss))
        self.head = RotationHead(self.backbone.embed_dim, rng=np.random.default_rng(h_ss))
        self.gamma = float(gamma)
        self.eq5_literal = bool(eq5_literal)
        self.training = True

    @property
    def in_shape(self):
        return self.backbone.in_shape

    @property
    def embed_dim(self):
        return self.backbone.embed_dim

    def parameters(self):
        out = self.backbone.parameters()
        out.update(self.head.parameters())
        return out

    def train(self):
        self.training = True
        return self

    def eval(self):
        self.training = False
        return self

    def embed(self, images):
        """Embed a batch (or a single image) and return a (B, d) Tensor."""
        x = images if isinstance(images, Tensor) else Tensor(np.asarray(images, dtype=np.float32))
        if x.data.ndim == 3:
            x = Tensor(x.data[None])
        return self.backbone.forward(x, self.training)

    def embed_array(self, images, batch_size=256):
        """Eval-mode embeddings as a numpy array, computed in chunks."""
        was = self.training
        self.eval()
        try:
            chunks = [self.embed(images[i:i + batch_size]).data for i in range(0, len(images), batch_size)]
        finally:
            self.training = was
        return np.concatenate(chunks) if chunks else np.zeros((0, self.embed_dim), np.float32)


def compute_prototypes(support_emb, labels, n_way):
    """Per-class mean of the support embeddings."""
    if not isinstance(support_emb, Tensor):
        support_emb = Tensor(support_emb)
    return F.class_means(support_emb, labels, n_way)


def _as_2d(q):
    q = q if isinstance(q, Tensor) else Tensor(q)
    return Tensor(q.data[None], dtype=q.dtype) if q.data.ndim == 1 else q


def classify_query(q, protos, literal=False):
    """Class probabilities for each query embedding.

    Default: softmax over negative squared Euclidean distance. With
    ``literal=True``: each distance divided by the sum of distances.
    Returns a numpy array shaped (queries, N), or (N,) for a single query.
    """
    single = not isinstance(q, Tensor) and np.ndim(q) == 1 or isinstance(q, Tensor) and q.data.ndim == 1
    q2 = _as_2d(q)
    p = protos if isinstance(protos, Tensor) else Tensor(protos)
    if q2.shape[1] != p.shape[1]:
        raise ShapeError(f"classify_query: query dim {q2.shape[1]} does not match prototype dim {p.shape[1]}")
    d = F.sq_distances(q2, p).data.astype(np.float64)
    if literal:
        probs = d / d.sum(axis=1, keepdims=True)
    else:
        probs = np.exp(log_softmax_np(-d))
    return probs[0] if single else probs


def predict(query_emb, protos, literal=False):
    """Predicted class per query: the highest score under the chosen rule.

    Under the softmax rule that is the nearest prototype; the literal
    ratio rule scores larger distances higher, so it picks the farthest.
    """
    q = np.asarray(query_emb, dtype=np.float64)
    p = np.asarray(protos, dtype=np.float64)
    d = (q * q).sum(1)[:, None] - 2 * q @ p.T + (p * p).sum(1)[None, :]
    return d.argmax(axis=1) if literal else d.argmin(axis=1)


def few_shot_loss(query_emb, protos, labels, literal=False):
    """Mean negative log score of each query's true class."""
    dists = F.sq_distances(query_emb, protos)
    if literal:
        return F.distance_ratio_nll(dists, labels)
    return F.softmax_cross_entropy(F.scale(dists, -1.0), labels)


def rotation_loss(query_emb, rotations, head):
    """Cross-entropy of the rotation head over queries that carry a rotation label.

    Queries without a label are skipped; with none at all the loss is an
    untracked zero.
    """
    rotations = np.asarray(rotations)
    rows = np.flatnonzero(rotations != NO_ROTATION)
    if rows.size == 0:
        return Tensor(np.zeros(1, dtype=query_emb.dtype), dtype=query_emb.dtype)
    logits = head(F.take_rows(query_emb, rows))
    return F.softmax_cross_entropy(logits, rotations[rows])


def total_loss(l_few, l_self, gamma):
    """``l_few + gamma * l_self``."""
    for name, t in (("few-shot loss", l_few), ("rotation loss", l_self)):
        if not math.isfinite(t.item()):
            raise NonFiniteError(f"total_loss: {name} is not finite")
    return F.add(l_few, F.scale(l_self, gamma))


def episode_forward(model, episode):
    """Training-mode forward pass over one episode.

    Returns ``(total, l_few, l_self, accuracy)`` where the losses are
    Tensors (recorded if a tape is active) and accuracy is the fraction of
    queries whose nearest prototype is their own class.
    """
    n_support = len(episode.support_images)
    emb = model.embed(episode.batch())
    support = F.take_rows(emb, np.arange(n_support))
    query = F.take_rows(emb, np.arange(n_support, emb.shape[0]))
    protos = compute_prototypes(support, episode.support_labels, episode.n_way)
    l_few = few_shot_loss(query, protos, episode.query_labels, literal=model.eq5_literal)
    l_self = rotation_loss(query, episode.query_rotations, model.head)
    total = total_loss(l_few, l_self, model.gamma)
    pred = predict(query.data, protos.data, literal=model.eq5_literal)
    acc = float((pred == episode.query_labels).mean())
    return total, l_few, l_self, acc
