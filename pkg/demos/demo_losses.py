"""Walk through the two unlabeled-stream losses and check their gradients.

Run:  python3 demos/demo_losses.py
"""

import numpy as np

from pixseg.losses import (consistency_grad, consistency_loss,
                           pixel_contrastive_grad, pixel_contrastive_loss,
                           softmax_sharpen)

rng = np.random.default_rng(0)

# --- label consistency: 1 - cos between sharpened weak probs and strong probs
weak_logits = rng.normal(size=5)
strong_probs = rng.dirichlet(np.ones(5))
target = softmax_sharpen(weak_logits, 0.5)  # T=0.5 peaks the pseudo label
print("sharpened weak target:", np.round(target, 3))
print("strong probabilities: ", np.round(strong_probs, 3))
print(f"consistency loss      = {consistency_loss(target, strong_probs):.4f}")
print(f"identical inputs give  {consistency_loss(target, target):.2e} (≈ 0)\n")

# --- pixel contrastive InfoNCE at temperature 0.07
anchor = rng.normal(size=16)
positive = anchor + 0.1 * rng.normal(size=16)   # same pixel, other view
negatives = rng.normal(size=(8, 16))
loss = pixel_contrastive_loss(anchor, positive, negatives)
print(f"contrastive loss      = {loss:.4f}")
# sanity: when every similarity ties, the loss is exactly log(N+1)
tied = np.tile(anchor, (8, 1))
print(f"all-ties loss         = {pixel_contrastive_loss(anchor, anchor, tied):.4f}"
      f"  (log(9) = {np.log(9):.4f})\n")

# --- both analytic gradients vs central finite differences
def fd(fn, x, step=1e-5):
    g = np.zeros_like(x)
    for i in range(x.size):
        xp, xm = x.copy(), x.copy()
        xp[i] += step
        xm[i] -= step
        g[i] = (fn(xp) - fn(xm)) / (2 * step)
    return g

da, dp, dn = pixel_contrastive_grad(anchor, positive, negatives)
num = fd(lambda v: pixel_contrastive_loss(v, positive, negatives), anchor)
print(f"contrastive d_anchor vs FD: max abs diff {np.abs(num - da).max():.2e}")

gc = consistency_grad(target, strong_probs)
num = fd(lambda v: consistency_loss(target, v), strong_probs.copy())
print(f"consistency gradient vs FD: max abs diff {np.abs(num - gc).max():.2e}")
