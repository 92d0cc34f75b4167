"""Pretext and evaluation episodes.

A pretext episode takes N unlabeled images, gives the i-th one pseudo-label
i, and builds the support set with the support operator set and the query
set with M draws from the query operator set per class. Labels are
0-based (0..N-1) throughout the package.

Randomness: an episode is a pure function of its integer ``seed``. The
seed is split with ``numpy.random.SeedSequence`` into one stream for
choosing source images and one independent stream per augmented item, so
changing, say, a mixing coefficient's distribution does not perturb the
draws of any other item.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .augment import OperatorSet, apply_set

NO_ROTATION = -1


@dataclass(frozen=True, eq=False)
class UnlabeledPool:
    """Images without labels. ``source_ids`` are stable per-image identifiers."""

    images: np.ndarray
    source_ids: tuple

    def __post_init__(self):
        images = np.asarray(self.images)
        if images.ndim != 4 or len(images) == 0:
            raise ValueError(f"pool needs a non-empty (n, c, h, w) array, got shape {images.shape}")
        if len(self.source_ids) != len(images):
            raise ValueError(f"{len(self.source_ids)} source ids for {len(images)} images")
        images = np.array(images, dtype=np.float32, copy=True)
        images.flags.writeable = False
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "source_ids", tuple(self.source_ids))

    def __len__(self):
        return len(self.images)

    @property
    def image_shape(self):
        return self.images.shape[1:]


@dataclass(frozen=True, eq=False)
class LabeledSet:
    """Images with integer class labels (indices into ``class_names``)."""

    images: np.ndarray
    labels: np.ndarray
    class_names: tuple = ()

    def __post_init__(self):
        images = np.array(self.images, dtype=np.float32, copy=True)
        labels = np.asarray(self.labels, dtype=np.int64).copy()
        if images.ndim != 4 or len(images) != len(labels):
            raise ValueError(f"labeled set needs (n, c, h, w) images and n labels, got {images.shape} and {labels.shape}")
        names = tuple(self.class_names) or tuple(str(i) for i in range(int(labels.max()) + 1 if len(labels) else 0))
        images.flags.writeable = False
        labels.flags.writeable = False
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "class_names", names)

    def __len__(self):
        return len(self.images)

    def __iter__(self):
        return iter(zip(self.images, self.labels.tolist()))

    @property
    def image_shape(self):
        return self.images.shape[1:]

    @property
    def n_classes(self):
        return len(self.class_names)

    def without_labels(self):
        return UnlabeledPool(self.images, tuple(range(len(self.images))))

    def subset_classes(self, classes):
        """Keep only ``classes`` (relabelled 0..len-1 in the given order)."""
        classes = list(classes)
        remap = {c: i for i, c in enumerate(classes)}
        keep = np.flatnonzero(np.isin(self.labels, classes))
        return LabeledSet(
            self.images[keep],
            np.array([remap[int(c)] for c in self.labels[keep]]),
            tuple(self.class_names[c] for c in classes),
        )


@dataclass(frozen=True)
class EpisodeConfig:
    n_way: int = 5
    k_shot: int = 1
    m_query: int = 5
    episodes_per_epoch: int = 10_000

    def __post_init__(self):
        if self.n_way < 2:
            raise ValueError(f"n_way must be at least 2, got {self.n_way}")
        if self.k_shot < 1 or self.m_query < 1:
            raise ValueError(f"k_shot and m_query must be positive, got {self.k_shot} and {self.m_query}")
        if self.episodes_per_epoch < 0:
            raise ValueError(f"episodes_per_epoch must be non-negative, got {self.episodes_per_epoch}")


@dataclass(eq=False)
class Episode:
    """One task. Rows of the support arrays are ordered class-major.

    ``query_rotations`` holds the quarter-turn label of each query image,
    or ``NO_ROTATION`` when no rotation was applied. ``*_sources`` are the
    pool's source ids (or dataset indices for labeled episodes).
    """

    support_images: np.ndarray
    support_labels: np.ndarray
    support_sources: tuple
    query_images: np.ndarray
    query_labels: np.ndarray
    query_rotations: np.ndarray
    query_sources: tuple
    seed: int
    n_way: int

    @property
    def support(self):
        return list(zip(self.support_images, self.support_labels.tolist()))

    @property
    def query(self):
        rots = [None if r == NO_ROTATION else r for r in self.query_rotations.tolist()]
        return list(zip(self.query_images, self.query_labels.tolist(), rots))

    def batch(self):
        """Support and query images stacked into one (n, c, h, w) array."""
        return np.concatenate([self.support_images, self.query_images])


def _seed_from(rng):
    if isinstance(rng, np.random.Generator):
        return int(rng.integers(2**63))
    if rng is None:
        raise ValueError("an explicit seed is required")
    return int(rng)


def episode_seed(epoch_seed, z):
    """Deterministic 63-bit seed for episode ``z`` of the epoch seeded ``epoch_seed``."""
    state = np.random.SeedSequence([int(epoch_seed) & (2**63 - 1), int(z)]).generate_state(2, np.uint32)
    return (int(state[0]) << 31) ^ int(state[1])


def _augment_items(sources, reps, op_set, streams):
    """Augment ``reps`` copies of each source image with ``op_set``.

    Mixing partners are the raw source images of the other classes in the
    episode, so an image is never mixed with itself.
    """
    n = len(sources)
    out = np.empty((n * reps,) + sources.shape[1:], dtype=np.float32)
    rots = np.full(n * reps, NO_ROTATION, dtype=np.int64)
    needs_partner = op_set.needs_partner
    for i in range(n):
        partners = [sources[j] for j in range(n) if j != i] if needs_partner else None
        for r in range(reps):
            row = i * reps + r
            img, rot = apply_set(sources[i], op_set, streams[row], partners)
            out[row] = img
            if rot is not None:
                rots[row] = rot
    return out, rots


def sample_episode(pool, cfg, a_s, a_q, rng):
    """Build one pretext episode from ``pool``.

    ``rng`` is an integer seed (recorded on the episode) or a numpy
    ``Generator`` from which such a seed is drawn.
    """
    n = cfg.n_way
    if n > len(pool):
        raise ValueError(f"n_way={n} exceeds pool size {len(pool)}")
    if not isinstance(a_s, OperatorSet) or not isinstance(a_q, OperatorSet):
        raise ValueError("support and query operator sets must be non-empty OperatorSets")
    seed = _seed_from(rng)
    pick_ss, support_ss, query_ss = np.random.SeedSequence(seed).spawn(3)
    chosen = np.random.default_rng(pick_ss).choice(len(pool), size=n, replace=False)
    sources = pool.images[chosen]
    ids = tuple(pool.source_ids[i] for i in chosen)

    k, m = cfg.k_shot, cfg.m_query
    s_streams = [np.random.default_rng(s) for s in support_ss.spawn(n * k)]
    q_streams = [np.random.default_rng(s) for s in query_ss.spawn(n * m)]
    s_img, _ = _augment_items(sources, k, a_s, s_streams)
    q_img, q_rot = _augment_items(sources, m, a_q, q_streams)
    return Episode(
        support_images=s_img,
        support_labels=np.repeat(np.arange(n), k),
        support_sources=tuple(i for i in ids for _ in range(k)),
        query_images=q_img,
        query_labels=np.repeat(np.arange(n), m),
        query_rotations=q_rot,
        query_sources=tuple(i for i in ids for _ in range(m)),
        seed=seed,
        n_way=n,
    )


def iter_epoch(pool, cfg, a_s, a_q, epoch_seed, start=0):
    """Yield the epoch's episodes lazily, starting at index ``start``."""
    for z in range(start, cfg.episodes_per_epoch):
        yield sample_episode(pool, cfg, a_s, a_q, episode_seed(epoch_seed, z))


def build_epoch(pool, cfg, a_s, a_q, epoch_seed):
    """All ``cfg.episodes_per_epoch`` episodes of one epoch."""
    return list(iter_epoch(pool, cfg, a_s, a_q, epoch_seed))


def sample_labeled_indices(labels, n_way, k_shot, m_query, rng):
    """Choose classes and disjoint support/query indices for one episode.

    Returns ``(classes, support_idx, query_idx)`` with index arrays of
    shape (n_way, k_shot) and (n_way, m_query).
    """
    labels = np.asarray(labels)
    classes_present, counts = np.unique(labels, return_counts=True)
    need = k_shot + m_query
    short = classes_present[counts < need]
    if short.size:
        raise ValueError(f"class {int(short[0])} has {int(counts[counts < need][0])} examples; episodes need {need}")
    if len(classes_present) < n_way:
        raise ValueError(f"{len(classes_present)} classes available; episodes need {n_way}")
    classes = rng.choice(classes_present, size=n_way, replace=False)
    support = np.empty((n_way, k_shot), dtype=np.intp)
    query = np.empty((n_way, m_query), dtype=np.intp)
    for i, c in enumerate(classes):
        members = np.flatnonzero(labels == c)
        picked = rng.choice(members, size=need, replace=False)
        support[i] = picked[:k_shot]
        query[i] = picked[k_shot:]
    return classes, support, query


def sample_labeled_episode(labeled_set, cfg, rng):
    """A supervised N-way K-shot episode of real, unaugmented images."""
    seed = _seed_from(rng)
    gen = np.random.default_rng(seed)
    n, k, m = cfg.n_way, cfg.k_shot, cfg.m_query
    classes, s_idx, q_idx = sample_labeled_indices(labeled_set.labels, n, k, m, gen)
    return Episode(
        support_images=labeled_set.images[s_idx.reshape(-1)],
        support_labels=np.repeat(np.arange(n), k),
        support_sources=tuple(int(i) for i in s_idx.reshape(-1)),
        query_images=labeled_set.images[q_idx.reshape(-1)],
        query_labels=np.repeat(np.arange(n), m),
        query_rotations=np.full(n * m, NO_ROTATION, dtype=np.int64),
        query_sources=tuple(int(i) for i in q_idx.reshape(-1)),
        seed=seed,
        n_way=n,
    )
