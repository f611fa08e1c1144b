"""Semi-supervised training loop, mIoU evaluation, and ablation drivers.

One train step runs the labeled stream (plain cross-entropy) and the
unlabeled stream (weak/strong augmented views, label consistency on the
outputs, pixel contrastive loss on projected features with strategy-driven
negative sampling), then applies one annealed SGD update. Randomness is
derived per (seed, step, purpose) so skipping the unlabeled stream never
perturbs the labeled stream's batches.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import os
from dataclasses import dataclass, replace

import numpy as np

from .data import IGNORE_LABEL, augment_pair, split
from .errors import InvalidParameterError, ParseError
from .interp import bilinear_resize, nearest_resize
from .losses import (NORM_EPS, combine_losses, cross_entropy_map,
                     pixel_contrastive_loss_and_grad, softmax)
from .model import NetConfig, ToyNet, save_checkpoint, sgd_step
from .sampling import (STRATEGIES, CandidatePool, density_matrix,
                       gumbel_topk_rows)

LABEL_LOSSES = ("l2", "ce")
FEATURE_LOSSES = ("none", "img_contrast", "pix_consist", "pix_contrast")

METRICS_HEADER = ["step", "supervised_ce", "contrastive", "consistency", "total",
                  "fnr", "eval_miou", "lr"]


@dataclass
class TrainConfig:
    lambda1: float = 0.3
    lambda2: float = 1.0
    tau: float = 0.07
    num_negatives: int = 200
    sharpen_t: float = 0.5
    strategy: str = "diff+pseudo"
    feature_stage: int = 3
    shared_projection: bool = False
    delayed_start: int = 0
    total_steps: int = 2000
    batch_labeled: int = 4
    batch_unlabeled: int = 4
    base_lr: float = 0.1
    weight_decay: float = 1e-4
    seed: int = 42
    labeled_fraction: float = 0.125
    classes: int = 5
    height: int = 32
    width: int = 32
    proj_dim: int = 16
    label_loss: str = "l2"
    feature_loss: str = "pix_contrast"
    eval_every: int = 0          # 0 -> total_steps // 20
    checkpoint_every: int = 0    # 0 -> final checkpoint only

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise InvalidParameterError("loss coefficients must be nonnegative")
        if self.tau <= 0 or self.sharpen_t <= 0:
            raise InvalidParameterError("temperatures must be positive")
        if self.delayed_start > self.total_steps:
            raise InvalidParameterError("delayed_start exceeds total_steps")
        if self.strategy not in STRATEGIES:
            raise InvalidParameterError(f"unknown strategy {self.strategy!r}")
        if self.label_loss not in LABEL_LOSSES:
            raise InvalidParameterError(f"unknown label_loss {self.label_loss!r}")
        if self.feature_loss not in FEATURE_LOSSES:
            raise InvalidParameterError(f"unknown feature_loss {self.feature_loss!r}")


def _parse_value(kind, raw):
    if kind is bool:
        return raw.strip().lower() in ("1", "true", "yes", "on")
    return kind(raw)


def load_config(path=None, overrides=None):
    """Build a TrainConfig from defaults, an optional key=value file, then
    explicit overrides (last wins)."""
    values = {}
    kinds = {f.name: type(f.default) for f in dataclasses.fields(TrainConfig)}
    if path is not None:
        with open(path) as f:
            for lineno, line in enumerate(f, start=1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ParseError(f"expected key=value in {path}", line=lineno)
                key, raw = (part.strip() for part in line.split("=", 1))
                if key not in kinds:
                    raise ParseError(f"unknown config key {key!r} in {path}",
                                     line=lineno)
                values[key] = _parse_value(kinds[key], raw)
    for key, val in (overrides or {}).items():
        if val is None:
            continue
        if key not in kinds:
            raise InvalidParameterError(f"unknown config key {key!r}")
        values[key] = _parse_value(kinds[key], val) if isinstance(val, str) else val
    return TrainConfig(**values)


@dataclass
class MetricsRow:
    step: int
    supervised_ce: float
    contrastive: float
    consistency: float
    total: float
    fnr: float | None
    eval_miou: float | None
    lr: float

    def csv_values(self):
        def fmt(x):
            return "" if x is None else f"{x:.10g}"
        return [str(self.step), fmt(self.supervised_ce), fmt(self.contrastive),
                fmt(self.consistency), fmt(self.total), fmt(self.fnr),
                fmt(self.eval_miou), fmt(self.lr)]


def write_metrics(path, rows):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(METRICS_HEADER)
    for row in rows:
        writer.writerow(row.csv_values())
    with open(path, "w", newline="") as f:
        f.write(buf.getvalue())


def _l2_consistency(target, probs):
    """Mean 1 - cos(target, probs) per pixel; gradient wrt the strong logits."""
    nw = np.linalg.norm(target, axis=-1, keepdims=True) + NORM_EPS
    ns = np.linalg.norm(probs, axis=-1, keepdims=True) + NORM_EPS
    dot = (target * probs).sum(axis=-1, keepdims=True)
    cos = dot / (nw * ns)
    npix = cos.size
    loss = float((1.0 - cos).mean())
    g = -(target / (nw * ns) - cos * probs / (ns * ns)) / npix
    dlogits = probs * (g - (g * probs).sum(axis=-1, keepdims=True))
    return loss, dlogits


def _ce_consistency(target, probs, logits):
    """Mean cross-entropy of strong logits against the weak soft target."""
    m = logits.max(axis=-1, keepdims=True)
    lse = m[..., 0] + np.log(np.exp(logits - m).sum(axis=-1))
    npix = lse.size
    loss = float((lse - (target * logits).sum(axis=-1)).mean())
    dlogits = (probs - target) / npix
    return loss, dlogits


def build_pool(weak_target, strong_probs, masks, feat_h, feat_w):
    """Candidate pool over both views' feature-map pixels.

    weak_target are the sharpened weak probabilities (the pseudo-labels),
    strong_probs the raw strong softmax; both are bilinearly downsampled to
    feature resolution. Returns (pool, partner) where partner[i] is the
    positive counterpart of pixel i in the other view.
    """
    pw = bilinear_resize(weak_target, feat_h, feat_w)
    ps = bilinear_resize(strong_probs, feat_h, feat_w)
    pw /= pw.sum(axis=-1, keepdims=True)
    ps /= ps.sum(axis=-1, keepdims=True)
    b = pw.shape[0]
    c = pw.shape[-1]
    k = b * feat_h * feat_w
    prob = np.concatenate([pw.reshape(k, c), ps.reshape(k, c)], axis=0)
    image_id = np.tile(np.repeat(np.arange(b), feat_h * feat_w), 2)
    gt = None
    if masks is not None:
        gt = np.tile(nearest_resize(masks, feat_h, feat_w).reshape(k), 2)
    partner = np.concatenate([np.arange(k) + k, np.arange(k)])
    exclusions = {i: (i, int(partner[i])) for i in range(2 * k)}
    pool = CandidatePool(image_id=image_id, prob=prob, gt_label=gt,
                         anchor_exclusions=exclusions)
    return pool, partner


def _pixel_contrastive_stream(cfg, z_all, pool, partner, rng):
    """Strategy-sampled InfoNCE over every anchor; returns mean loss, dZ, FNR.

    Vectorized across anchors: one density matrix, one row-wise Gumbel
    top-k draw, batched cosine/softmax/gradient math. Anchors with an empty
    density contribute zero loss and zero gradient and count as shortfalls.
    """
    m = z_all.shape[0]
    n_eff = min(cfg.num_negatives, m - 2)
    dz = np.zeros_like(z_all)
    if n_eff < 1:
        return 0.0, dz, None, 0
    w = density_matrix(cfg.strategy, pool)
    row_ok = w.sum(axis=1) > 0
    used = int(row_ok.sum())
    idx, valid = gumbel_topk_rows(w, n_eff, rng)
    valid &= row_ok[:, None]
    shortfalls = int((valid.sum(axis=1) < n_eff).sum())
    if used == 0:
        return 0.0, dz, None, shortfalls

    norms = np.linalg.norm(z_all, axis=1) + NORM_EPS
    u = z_all / norms[:, None]
    pos_sim = (u * u[partner]).sum(axis=1)
    neg_u = u[idx]                                        # (m, n, d)
    neg_sim = np.einsum("md,mnd->mn", u, neg_u, optimize=True)
    k = np.concatenate([pos_sim[:, None], neg_sim], axis=1) / cfg.tau
    k[:, 1:][~valid] = -np.inf
    kmax = k.max(axis=1)
    e = np.exp(k - kmax[:, None])
    z = e.sum(axis=1)
    losses = kmax + np.log(z) - k[:, 0]
    dsim = e / z[:, None] / cfg.tau
    dsim[:, 0] -= 1.0 / cfg.tau                           # empty rows cancel to 0
    dsim[:, 1:][~valid] = 0.0

    sims = np.concatenate([pos_sim[:, None], neg_sim], axis=1)
    others_u = np.concatenate([u[partner][:, None, :], neg_u], axis=1)
    d_anchor = (np.einsum("mj,mjd->md", dsim, others_u, optimize=True)
                - (dsim * sims).sum(axis=1)[:, None] * u) / norms[:, None]
    dz += d_anchor
    d_pos = dsim[:, 0, None] * (u - pos_sim[:, None] * u[partner]) \
        / norms[partner][:, None]
    np.add.at(dz, partner, d_pos)
    d_neg = dsim[:, 1:, None] * (u[:, None, :] - neg_sim[..., None] * neg_u) \
        / norms[idx][..., None]
    np.add.at(dz, idx, d_neg)

    fnr = None
    if pool.gt_label is not None:
        same = pool.gt_label[idx] == pool.gt_label[:, None]
        n_sampled = int(valid.sum())
        fnr = float((same & valid).sum() / n_sampled) if n_sampled else None
    return float(losses.sum()) / used, dz / used, fnr, shortfalls


def _pix_consistency_stream(zw, zs):
    """Mean 1 - cos between corresponding projected pixels; weak side frozen."""
    nw = np.linalg.norm(zw, axis=1, keepdims=True) + NORM_EPS
    ns = np.linalg.norm(zs, axis=1, keepdims=True) + NORM_EPS
    cos = (zw * zs).sum(axis=1, keepdims=True) / (nw * ns)
    loss = float((1.0 - cos).mean())
    dzs = -(zw / (nw * ns) - cos * zs / (ns * ns)) / zw.shape[0]
    return loss, dzs


def _image_contrastive_stream(cfg, zw, zs, b, pixels_per_image, rng):
    """Image-level InfoNCE on spatially pooled projected features."""
    del rng  # negatives are all other images' pooled vectors, no sampling
    pw = zw.reshape(b, pixels_per_image, -1).mean(axis=1)
    ps = zs.reshape(b, pixels_per_image, -1).mean(axis=1)
    pooled = np.concatenate([pw, ps], axis=0)  # (2B, P)
    dpool = np.zeros_like(pooled)
    if b < 2:
        return 0.0, np.zeros_like(zw), np.zeros_like(zs)
    total = 0.0
    anchors = 0
    for i in range(2 * b):
        mate = (i + b) % (2 * b)
        neg_idx = np.array([j for j in range(2 * b)
                            if j % b != i % b])
        loss, da, dp, dn = pixel_contrastive_loss_and_grad(
            pooled[i], pooled[mate], pooled[neg_idx], cfg.tau)
        total += loss
        dpool[i] += da
        dpool[mate] += dp
        dpool[neg_idx] += dn
        anchors += 1
    dpool /= anchors
    spread = 1.0 / pixels_per_image
    dzw = np.repeat(dpool[:b], pixels_per_image, axis=0) * spread
    dzs = np.repeat(dpool[b:], pixels_per_image, axis=0) * spread
    return total / anchors, dzw, dzs


def train_step(net, labeled_batch, unlabeled_batch, cfg, step):
    """One combined labeled + unlabeled gradient step; mutates net in place."""
    lab_images, lab_masks = labeled_batch
    out_l, cache_l = net.forward(lab_images, "weak", return_cache=True)
    sup_loss, dlog_l = cross_entropy_map(out_l.logits, lab_masks)
    grads = net.backward(cache_l, d_logits=dlog_l)

    contrast = 0.0
    consist = 0.0
    fnr = None
    shortfalls = 0
    active = (step >= cfg.delayed_start
              and (cfg.lambda1 > 0 or cfg.lambda2 > 0)
              and len(unlabeled_batch) > 0)
    if active:
        pairs = [augment_pair(s, [cfg.seed, step, 3, i])
                 for i, s in enumerate(unlabeled_batch)]
        weak_images = np.stack([p.weak for p in pairs])
        strong_images = np.stack([p.strong for p in pairs])
        masks = np.stack([p.mask for p in pairs])
        out_w, cache_w = net.forward(weak_images, "weak", return_cache=True)
        out_s, cache_s = net.forward(strong_images, "strong", return_cache=True)
        target = softmax(out_w.logits / cfg.sharpen_t)  # stop-gradient pseudo-labels

        d_logits_s = None
        if cfg.lambda2 > 0:
            if cfg.label_loss == "l2":
                consist, dls = _l2_consistency(target, out_s.probs)
            else:
                consist, dls = _ce_consistency(target, out_s.probs, out_s.logits)
            d_logits_s = cfg.lambda2 * dls

        d_proj_w = None
        d_proj_s = None
        if cfg.lambda1 > 0 and cfg.feature_loss != "none":
            b, fh, fw, p = out_w.projected.shape
            k = b * fh * fw
            zw = out_w.projected.reshape(k, p)
            zs = out_s.projected.reshape(k, p)
            rng = np.random.default_rng([cfg.seed, step, 4])
            if cfg.feature_loss == "pix_contrast":
                pool, partner = build_pool(target, out_s.probs, masks, fh, fw)
                z_all = np.concatenate([zw, zs], axis=0)
                contrast, dz, fnr, shortfalls = _pixel_contrastive_stream(
                    cfg, z_all, pool, partner, rng)
                d_proj_w = (cfg.lambda1 * dz[:k]).reshape(b, fh, fw, p)
                d_proj_s = (cfg.lambda1 * dz[k:]).reshape(b, fh, fw, p)
            elif cfg.feature_loss == "pix_consist":
                contrast, dzs = _pix_consistency_stream(zw, zs)
                d_proj_s = (cfg.lambda1 * dzs).reshape(b, fh, fw, p)
            else:  # img_contrast
                contrast, dzw, dzs = _image_contrastive_stream(
                    cfg, zw, zs, b, fh * fw, rng)
                d_proj_w = (cfg.lambda1 * dzw).reshape(b, fh, fw, p)
                d_proj_s = (cfg.lambda1 * dzs).reshape(b, fh, fw, p)

        if d_logits_s is not None or d_proj_s is not None:
            grads += net.backward(cache_s, d_logits=d_logits_s,
                                  d_projected=d_proj_s, trunk_grad=True)
        if d_proj_w is not None:
            grads += net.backward(cache_w, d_projected=d_proj_w, trunk_grad=False)

    breakdown = combine_losses(sup_loss, contrast, consist, cfg.lambda1, cfg.lambda2)
    lr = cfg.base_lr * (1.0 - step / cfg.total_steps)
    sgd_step(net, grads, step, cfg.base_lr, cfg.total_steps, cfg.weight_decay)
    return MetricsRow(step=step, supervised_ce=breakdown.supervised_ce,
                      contrastive=breakdown.contrastive,
                      consistency=breakdown.consistency, total=breakdown.total,
                      fnr=fnr, eval_miou=None, lr=lr)


def evaluate_miou(net, samples, chunk=32):
    """Per-class IoU and mean over classes present in prediction or truth."""
    if not samples:
        raise InvalidParameterError("evaluation set is empty")
    c = net.config.num_classes
    conf = np.zeros(c * c, dtype=np.int64)
    for start in range(0, len(samples), chunk):
        batch = samples[start:start + chunk]
        images = np.stack([s.image for s in batch])
        masks = np.stack([s.mask for s in batch])
        out = net.forward(images, "weak")
        pred = out.probs.argmax(axis=-1)
        valid = masks != IGNORE_LABEL
        conf += np.bincount(masks[valid].astype(np.int64) * c + pred[valid],
                            minlength=c * c)
    conf = conf.reshape(c, c)
    tp = np.diag(conf).astype(np.float64)
    denom = conf.sum(axis=0) + conf.sum(axis=1) - np.diag(conf)
    present = denom > 0
    iou = np.full(c, np.nan)
    iou[present] = tp[present] / denom[present]
    miou = float(iou[present].mean()) if present.any() else 0.0
    return iou, miou


def _labeled_batch(labeled, cfg, step):
    rng = np.random.default_rng([cfg.seed, step, 1])
    idx = rng.integers(0, len(labeled), size=cfg.batch_labeled)
    images = np.stack([labeled[i].image for i in idx])
    masks = np.stack([labeled[i].mask for i in idx])
    return images, masks


def _unlabeled_batch(unlabeled, cfg, step):
    rng = np.random.default_rng([cfg.seed, step, 2])
    idx = rng.integers(0, len(unlabeled), size=cfg.batch_unlabeled)
    return [unlabeled[i] for i in idx]


def run_training(cfg, train_samples, eval_samples, out_dir=None):
    """Full training run; returns (net, rows, final_miou).

    When out_dir is given, writes metrics.csv and checkpoint.ckpt there
    (plus periodic checkpoints when cfg.checkpoint_every > 0).
    """
    labeled, unlabeled = split(train_samples, cfg.labeled_fraction, cfg.seed)
    net = ToyNet(NetConfig(num_classes=cfg.classes, proj_dim=cfg.proj_dim,
                           feature_stage=cfg.feature_stage,
                           shared_projection=cfg.shared_projection,
                           seed=cfg.seed))
    eval_every = cfg.eval_every or max(1, cfg.total_steps // 20)
    rows = []
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    if cfg.total_steps == 0:
        _, miou = evaluate_miou(net, eval_samples)
        rows.append(MetricsRow(step=0, supervised_ce=0.0, contrastive=0.0,
                               consistency=0.0, total=0.0, fnr=None,
                               eval_miou=miou, lr=cfg.base_lr))
    for step in range(cfg.total_steps):
        row = train_step(net, _labeled_batch(labeled, cfg, step),
                         _unlabeled_batch(unlabeled, cfg, step), cfg, step)
        if (step + 1) % eval_every == 0 or step == cfg.total_steps - 1:
            _, row.eval_miou = evaluate_miou(net, eval_samples)
        rows.append(row)
        if (out_dir and cfg.checkpoint_every
                and (step + 1) % cfg.checkpoint_every == 0):
            save_checkpoint(net, os.path.join(out_dir, f"checkpoint_{step + 1}.ckpt"),
                            step=step + 1)
    final_miou = next((r.eval_miou for r in reversed(rows)
                       if r.eval_miou is not None), 0.0)
    if out_dir:
        write_metrics(os.path.join(out_dir, "metrics.csv"), rows)
        save_checkpoint(net, os.path.join(out_dir, "checkpoint.ckpt"),
                        step=cfg.total_steps)
    return net, rows, final_miou


ABLATION_AXES = ("strategy", "negatives", "coeffs", "feature-stage",
                 "loss-variant", "delay")


def _ablation_cells(cfg, axis):
    if axis == "strategy":
        return [(name, replace(cfg, strategy=name)) for name in STRATEGIES]
    if axis == "negatives":
        cells = [("none", replace(cfg, feature_loss="none"))]
        cells += [(str(n), replace(cfg, num_negatives=n))
                  for n in (50, 100, 200, 400, 800)]
        return cells
    if axis == "coeffs":
        cells = []
        for lam1 in (0.0, 0.1, 0.3):
            for lam2 in (0.0, 1.0):
                cells.append((f"l1={lam1},l2={lam2}",
                              replace(cfg, lambda1=lam1, lambda2=lam2)))
        return cells
    if axis == "feature-stage":
        return [(f"stage{k}", replace(cfg, feature_stage=k)) for k in (1, 2, 3)]
    if axis == "loss-variant":
        cells = []
        for label in LABEL_LOSSES:
            for feature in FEATURE_LOSSES:
                cells.append((f"{label}/{feature}",
                              replace(cfg, label_loss=label, feature_loss=feature)))
        return cells
    if axis == "delay":
        delays = sorted({0, cfg.total_steps // 4, cfg.total_steps // 2})
        return [(f"delay={d}", replace(cfg, delayed_start=d)) for d in delays]
    raise InvalidParameterError(f"unknown ablation axis {axis!r}")


def ablate(cfg, axis, train_samples, eval_samples):
    """Run one grid axis; per-cell failures are recorded and the grid continues.

    Returns dict rows: axis, setting, final_miou, mean_fnr, error.
    """
    results = []
    for index, (setting, cell_cfg) in enumerate(_ablation_cells(cfg, axis)):
        cell_cfg = replace(cell_cfg, seed=cfg.seed + index)
        try:
            _, rows, miou = run_training(cell_cfg, train_samples, eval_samples)
            fnrs = [r.fnr for r in rows if r.fnr is not None]
            mean_fnr = float(np.mean(fnrs)) if fnrs else None
            results.append({"axis": axis, "setting": setting,
                            "final_miou": miou, "mean_fnr": mean_fnr,
                            "error": ""})
        except Exception as exc:  # keep the rest of the grid alive
            results.append({"axis": axis, "setting": setting,
                            "final_miou": None, "mean_fnr": None,
                            "error": str(exc)})
    return results
