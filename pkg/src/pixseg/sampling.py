"""Negative-pixel sampling: per-anchor densities, Gumbel top-k draws, FNR.

A CandidatePool describes the M candidate pixels of one mini-batch: which
image each pixel came from, its predicted class-probability vector, and
(for the oracle strategy and FNR measurement only) its ground-truth class.
Each strategy turns one anchor into a normalized weight vector over the
pool; drawing without replacement is done with the Gumbel top-k trick.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyDensityError, InvalidParameterError

STRATEGIES = ("uniform", "diff", "pseudo", "diff+pseudo", "oracle")


@dataclass
class CandidatePool:
    image_id: np.ndarray                # (M,) int
    prob: np.ndarray                    # (M, C) rows on the simplex
    gt_label: np.ndarray | None = None  # (M,) int, oracle / FNR only
    anchor_exclusions: dict = field(default_factory=dict)

    def __post_init__(self):
        self.image_id = np.asarray(self.image_id)
        self.prob = np.asarray(self.prob, dtype=np.float64)
        if self.gt_label is not None:
            self.gt_label = np.asarray(self.gt_label)
        m = self.image_id.shape[0]
        if m < 2:
            raise InvalidParameterError(f"pool needs at least 2 candidates, got {m}")
        if self.prob.shape[0] != m:
            raise InvalidParameterError("image_id and prob lengths differ")
        if np.abs(self.prob.sum(axis=1) - 1.0).max() > 1e-6:
            raise InvalidParameterError("prob rows must sum to 1")

    @property
    def size(self):
        return self.image_id.shape[0]

    def excluded(self, anchor):
        return self.anchor_exclusions.get(anchor, (anchor,))


def _finalize(raw, anchor, pool, what):
    w = np.asarray(raw, dtype=np.float64)
    np.maximum(w, 0.0, out=w)
    w[list(pool.excluded(anchor))] = 0.0
    total = w.sum()
    if total <= 0.0:
        raise EmptyDensityError(f"{what}: no candidate has positive weight for anchor {anchor}")
    return w / total


def density_uniform(anchor, pool):
    """Equal weight on every non-excluded candidate."""
    return _finalize(np.ones(pool.size), anchor, pool, "uniform")


def density_diff_image(anchor, pool):
    """Weight only candidates from a different image than the anchor."""
    raw = (pool.image_id != pool.image_id[anchor]).astype(np.float64)
    return _finalize(raw, anchor, pool, "diff-image")


def density_pseudo_debiased(anchor, pool):
    """Weight by the predicted probability of a different class than the anchor."""
    raw = 1.0 - pool.prob @ pool.prob[anchor]
    return _finalize(raw, anchor, pool, "pseudo-debiased")


def density_combined(anchor, pool):
    """Different-image indicator times the pseudo-label debiasing weight."""
    ind = pool.image_id != pool.image_id[anchor]
    raw = ind * (1.0 - pool.prob @ pool.prob[anchor])
    return _finalize(raw, anchor, pool, "diff-image+pseudo")


def density_oracle(anchor, pool):
    """Uniform over candidates whose ground-truth class differs from the anchor's."""
    if pool.gt_label is None:
        raise InvalidParameterError("oracle strategy needs gt_label in the pool")
    raw = (pool.gt_label != pool.gt_label[anchor]).astype(np.float64)
    return _finalize(raw, anchor, pool, "oracle")


DENSITY_FNS = {
    "uniform": density_uniform,
    "diff": density_diff_image,
    "pseudo": density_pseudo_debiased,
    "diff+pseudo": density_combined,
    "oracle": density_oracle,
}


def _topk_from_keys(keys, n):
    # stable argsort on the negated keys breaks ties by ascending index
    order = np.argsort(-keys, kind="stable")
    return order[:n]


def gumbel_topk(weights, n, rng):
    """Draw up to n distinct indices without replacement from a weight vector.

    Keys are log(weight) + Gumbel(0,1) noise; the top-n keys are exactly a
    sequential draw without replacement from the normalized weights. Returns
    (indices, shortfall) where shortfall is True when fewer than n candidates
    carried positive weight. Zero-weight indices never appear.
    """
    if n < 1:
        raise InvalidParameterError(f"n must be >= 1, got {n}")
    w = np.asarray(weights, dtype=np.float64)
    pos = w > 0
    s = int(pos.sum())
    if s == 0:
        raise EmptyDensityError("gumbel_topk: all weights are zero")
    with np.errstate(divide="ignore"):
        keys = np.where(pos, np.log(w, where=pos), -np.inf)
    keys = keys + rng.gumbel(size=w.shape[0])
    keys[~pos] = -np.inf
    take = min(n, s)
    return _topk_from_keys(keys, take), s < n


def gumbel_topk_trials(weights, n, rng, trials):
    """Vectorized repetition of gumbel_topk: returns an (trials, k) index array."""
    w = np.asarray(weights, dtype=np.float64)
    pos = w > 0
    s = int(pos.sum())
    if s == 0:
        raise EmptyDensityError("gumbel_topk_trials: all weights are zero")
    with np.errstate(divide="ignore"):
        logw = np.where(pos, np.log(w, where=pos), -np.inf)
    keys = logw[None, :] + rng.gumbel(size=(trials, w.shape[0]))
    keys[:, ~pos] = -np.inf
    take = min(n, s)
    order = np.argsort(-keys, axis=1, kind="stable")
    return order[:, :take]


def density_matrix(strategy, pool):
    """All anchors' densities at once: row i equals DENSITY_FNS[strategy](i, pool).

    Rows whose weights are all zero (the per-anchor empty-density case) come
    back as zero rows instead of raising; callers skip them.
    """
    m = pool.size
    if strategy == "uniform":
        raw = np.ones((m, m))
    elif strategy == "diff":
        raw = (pool.image_id[:, None] != pool.image_id[None, :]).astype(np.float64)
    elif strategy == "pseudo":
        raw = 1.0 - pool.prob @ pool.prob.T
    elif strategy == "diff+pseudo":
        ind = pool.image_id[:, None] != pool.image_id[None, :]
        raw = ind * (1.0 - pool.prob @ pool.prob.T)
    elif strategy == "oracle":
        if pool.gt_label is None:
            raise InvalidParameterError("oracle strategy needs gt_label in the pool")
        raw = (pool.gt_label[:, None] != pool.gt_label[None, :]).astype(np.float64)
    else:
        raise InvalidParameterError(f"unknown strategy {strategy!r}")
    np.maximum(raw, 0.0, out=raw)
    for i in range(m):
        raw[i, list(pool.excluded(i))] = 0.0
    totals = raw.sum(axis=1, keepdims=True)
    np.divide(raw, totals, out=raw, where=totals > 0)
    raw[totals[:, 0] <= 0] = 0.0
    return raw


def gumbel_topk_rows(weights, n, rng):
    """Row-wise gumbel_topk on a (M, M) weight matrix.

    Returns (idx, valid) where idx is (M, n) candidate indices and valid a
    boolean mask; rows with fewer than n positive weights get padding marked
    invalid, all-zero rows are entirely invalid.
    """
    w = np.asarray(weights, dtype=np.float64)
    if n < 1:
        raise InvalidParameterError(f"n must be >= 1, got {n}")
    pos = w > 0
    with np.errstate(divide="ignore"):
        keys = np.where(pos, np.log(w, where=pos), -np.inf)
    keys = keys + rng.gumbel(size=w.shape)
    keys[~pos] = -np.inf
    m = w.shape[1]
    if n >= m:
        part = np.argsort(-keys, axis=1)[:, :n]
    else:
        part = np.argpartition(-keys, n - 1, axis=1)[:, :n]
    valid = np.take_along_axis(pos, part, axis=1)
    return part, valid


def false_negative_rate(sampled, pool, anchors):
    """Fraction of sampled negatives sharing the anchor's true class, over anchors."""
    if pool.gt_label is None:
        raise InvalidParameterError("false_negative_rate needs gt_label in the pool")
    rates = []
    for anchor, idx in zip(anchors, sampled):
        idx = np.asarray(idx)
        if idx.size == 0:
            continue
        rates.append(float(np.mean(pool.gt_label[idx] == pool.gt_label[anchor])))
    if not rates:
        return 0.0
    return float(np.mean(rates))


def op_count(m, n, d, c, mode):
    """Multiply-add count of the contrastive similarity computation.

    all_pairs contrasts every pixel with every pixel (M^2 * D). sampled_sim
    contrasts each pixel with N drawn negatives (M * N * D); sampled adds
    the pseudo-label comparison needed to build the densities (M^2 * C).
    """
    if min(m, n, d, c) <= 0:
        raise InvalidParameterError("all arguments must be positive")
    if mode == "all_pairs":
        return m * m * d
    if mode == "sampled_sim":
        return m * n * d
    if mode == "sampled":
        return m * n * d + m * m * c
    raise InvalidParameterError(f"unknown mode {mode!r}")


def make_benchmark_pool(rng, images=8, side=12, classes=5, label_noise=0.15,
                        flip_rate=0.1):
    """Synthetic pool with class-homogeneous images for FNR benchmarking.

    Each image is dominated by one foreground class (a random rectangle over
    a background of class 0), so same-image candidates are likely false
    negatives. Predicted probabilities are noisy one-hots of the true class,
    with a fraction of pixels confidently mislabeled.
    """
    m = images * side * side
    gt = np.zeros((images, side, side), dtype=int)
    for b in range(images):
        cls = 1 + b % (classes - 1)
        h = rng.integers(int(0.6 * side), side + 1)
        w = rng.integers(int(0.6 * side), side + 1)
        top = rng.integers(0, side - h + 1)
        left = rng.integers(0, side - w + 1)
        gt[b, top:top + h, left:left + w] = cls
    gt = gt.reshape(m)
    image_id = np.repeat(np.arange(images), side * side)
    pseudo = gt.copy()
    flip = rng.random(m) < flip_rate
    pseudo[flip] = rng.integers(0, classes, size=int(flip.sum()))
    prob = np.full((m, classes), label_noise / classes)
    prob[np.arange(m), pseudo] += 1.0 - label_noise
    return CandidatePool(image_id=image_id, prob=prob, gt_label=gt)


def fnr_benchmark(strategies, num_negatives, trials, rng, anchors_per_trial=64,
                  **pool_kwargs):
    """Measure FNR per strategy over freshly generated benchmark pools.

    Returns one dict per strategy with keys strategy, M, N, trials,
    fnr_mean, fnr_std (the CSV row schema of the fnr-bench command).
    """
    pools = [make_benchmark_pool(rng, **pool_kwargs) for _ in range(trials)]
    anchor_sets = [rng.integers(0, p.size, size=anchors_per_trial) for p in pools]
    rows = []
    for name in strategies:
        fn = DENSITY_FNS[name]
        per_trial = []
        for pool, anchors in zip(pools, anchor_sets):
            sampled = []
            kept = []
            for a in anchors:
                a = int(a)
                try:
                    w = fn(a, pool)
                except EmptyDensityError:
                    continue
                idx, _ = gumbel_topk(w, num_negatives, rng)
                sampled.append(idx)
                kept.append(a)
            per_trial.append(false_negative_rate(sampled, pool, kept))
        per_trial = np.asarray(per_trial)
        rows.append({
            "strategy": name,
            "M": pools[0].size,
            "N": num_negatives,
            "trials": trials,
            "fnr_mean": float(per_trial.mean()),
            "fnr_std": float(per_trial.std()),
        })
    return rows
