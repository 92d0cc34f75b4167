"""Distribution shift between augmented support and query populations.

Two divergences are measured. The first is a KL divergence between
per-channel pixel-intensity histograms. The second is a Fréchet distance
between Gaussian fits of backbone features.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .augment import apply_set

BINS = 64
VALUE_RANGE = (-0.5, 1.5)
RIDGE = 1e-6
GROUP = 5  # mixing partners come from groups of this size, like an episode
DIAGNOSE_COLUMNS = ("aug_support", "aug_query", "kl", "frechet", "samples", "seed")


class FrechetError(ArithmeticError):
    pass


@dataclass(eq=False)
class SampleStats:
    """Histogram counts (channels, bins) and an optional feature Gaussian."""

    hist: np.ndarray
    value_range: tuple
    count: int
    mu: np.ndarray | None = None
    cov: np.ndarray | None = None

    @property
    def bins(self):
        return self.hist.shape[1]


@dataclass(frozen=True)
class DiversityReport:
    aug_support: str
    aug_query: str
    kl: float
    frechet: float
    sample_count: int
    seed: int

    def row(self):
        return [self.aug_support, self.aug_query, repr(self.kl), repr(self.frechet), self.sample_count, self.seed]


def channel_histograms(images, bins=BINS, value_range=VALUE_RANGE):
    """Per-channel counts; values outside the range land in the edge bins."""
    x = np.asarray(images, dtype=np.float64)
    lo, hi = value_range
    idx = np.clip(((x - lo) / (hi - lo) * bins).astype(np.int64), 0, bins - 1)
    c = x.shape[1]
    per_channel = idx.transpose(1, 0, 2, 3).reshape(c, -1)
    return np.stack([np.bincount(row, minlength=bins) for row in per_channel])


def sample_stats(images, features=None, bins=BINS, value_range=VALUE_RANGE):
    """Histogram the images and, given features (n, d), fit a Gaussian."""
    images = np.asarray(images)
    hist = channel_histograms(images, bins, value_range)
    mu = cov = None
    if features is not None:
        f = np.asarray(features, dtype=np.float64)
        mu = f.mean(axis=0)
        cov = np.cov(f, rowvar=False) if len(f) > 1 else np.zeros((f.shape[1], f.shape[1]))
        cov = np.atleast_2d((cov + cov.T) / 2)
    return SampleStats(hist, tuple(value_range), len(images), mu, cov)


def histogram_kl(a, b, smoothing=1.0):
    """Mean over channels of KL(P_a || P_b) on add-``smoothing`` histograms."""
    if a.hist.shape != b.hist.shape or tuple(a.value_range) != tuple(b.value_range):
        raise ValueError(
            f"histogram_kl: bin layouts differ ({a.hist.shape} over {a.value_range} "
            f"vs {b.hist.shape} over {b.value_range})"
        )
    if a.hist.sum() == 0 or b.hist.sum() == 0:
        raise ValueError("histogram_kl: empty histogram")
    p = a.hist + smoothing
    q = b.hist + smoothing
    p = p / p.sum(axis=1, keepdims=True)
    q = q / q.sum(axis=1, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * (np.log(p) - np.log(q)), 0.0)
    return float(max(terms.sum(axis=1).mean(), 0.0))


def _psd_sqrt(m, what):
    try:
        w, v = np.linalg.eigh(m)
    except np.linalg.LinAlgError:
        finite = np.isfinite(m).all()
        cond = np.linalg.cond(m) if finite else float("inf")
        raise FrechetError(f"frechet_distance: eigendecomposition of {what} did not converge "
                           f"(condition number {cond:.3g}, finite={finite})") from None
    return (v * np.sqrt(np.clip(w, 0, None))) @ v.T, np.clip(w, 0, None)


def frechet_distance(a, b, ridge=RIDGE):
    """``|mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a S_b)^(1/2))`` with a ridge on S.

    The square-root trace is taken as ``tr((A S_b A)^(1/2))`` with
    ``A = S_a^(1/2)``, both from symmetric eigendecompositions with
    negative eigenvalues clipped to zero.
    """
    if a.mu is None or b.mu is None:
        raise ValueError("frechet_distance: feature statistics are missing")
    if a.mu.shape != b.mu.shape:
        raise ValueError(f"frechet_distance: feature dimensions differ ({a.mu.shape[0]} vs {b.mu.shape[0]})")
    d = a.mu.shape[0]
    sa = a.cov + ridge * np.eye(d)
    sb = b.cov + ridge * np.eye(d)
    root_a, _ = _psd_sqrt(sa, "the first covariance")
    inner = root_a @ sb @ root_a
    _, w = _psd_sqrt((inner + inner.T) / 2, "the covariance product")
    diff = a.mu - b.mu
    value = diff @ diff + np.trace(sa) + np.trace(sb) - 2 * np.sqrt(w).sum()
    return float(max(value, 0.0))


def augment_population(pool, op_set, sources, seeds):
    """Augment ``pool.images[sources]`` once each, item ``i`` with ``seeds[i]``.

    Mixing partners for item ``i`` are the other sources in its group of
    ``GROUP`` consecutive items.
    """
    images = pool.images
    out = np.empty((len(sources),) + pool.image_shape, dtype=np.float32)
    for i, (src, s) in enumerate(zip(sources, seeds)):
        partners = None
        if op_set.needs_partner:
            g0 = (i // GROUP) * GROUP
            group = sources[g0:g0 + GROUP]
            partners = [images[j] for k, j in enumerate(group) if g0 + k != i] or [images[src]]
        out[i], _ = apply_set(images[src], op_set, np.random.default_rng(s), partners)
    return out


def diversity_report(pool, a_s, a_q, model, sample_count=1000, seed=0, bins=BINS, value_range=VALUE_RANGE):
    """KL and Fréchet distance between ``a_s``- and ``a_q``-augmented samples.

    Both populations start from the same source images and reuse the same
    per-item random streams, so identical operator sets give identical
    populations and both divergences are exactly zero.
    """
    if sample_count < 2:
        raise ValueError(f"sample_count must be at least 2, got {sample_count}")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x444956]))
    replace = sample_count > len(pool)
    sources = rng.choice(len(pool), size=sample_count, replace=replace)
    seeds = np.random.SeedSequence([int(seed), 0x495445]).spawn(sample_count)
    xs = augment_population(pool, a_s, sources, seeds)
    xq = augment_population(pool, a_q, sources, seeds)
    fs = model.embed_array(xs) if model is not None else None
    fq = model.embed_array(xq) if model is not None else None
    st_s = sample_stats(xs, fs, bins, value_range)
    st_q = sample_stats(xq, fq, bins, value_range)
    kl = histogram_kl(st_s, st_q)
    fr = frechet_distance(st_s, st_q) if model is not None else float("nan")
    return DiversityReport(a_s.name, a_q.name, kl, fr, sample_count, int(seed))


def diagnose_csv(reports):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(DIAGNOSE_COLUMNS)
    for r in reports:
        w.writerow(r.row())
    return buf.getvalue()
