"""Train the toy net three ways on one synthetic split and compare mIoU.

Supervised-only vs +consistency vs +consistency+contrastive, all sharing
the same seed, labeled subset, and schedule. This uses the full-size
setting (1024 images, 2000 steps) because the contrastive term only pays
off late in training, once pseudo-labels are good enough to debias the
negative sampling; shorter schedules make it look harmful. Takes a few
minutes.

Run:  python3 demos/demo_training.py
"""

import time

from pixseg.data import generate_dataset
from pixseg.trainer import TrainConfig, run_training

train = generate_dataset(1024, seed=123)
eval_samples = generate_dataset(128, seed=999)

settings = [
    ("supervised only     (l1=0,   l2=0)", 0.0, 0.0),
    ("+ consistency       (l1=0,   l2=1)", 0.0, 1.0),
    ("+ pixel contrastive (l1=0.3, l2=1)", 0.3, 1.0),
]

for name, lam1, lam2 in settings:
    cfg = TrainConfig(lambda1=lam1, lambda2=lam2, total_steps=2000,
                      labeled_fraction=0.125, classes=5, seed=42)
    t0 = time.time()
    _, rows, miou = run_training(cfg, train, eval_samples)
    fnrs = [r.fnr for r in rows if r.fnr is not None]
    extra = f"  mean FNR {sum(fnrs) / len(fnrs):.3f}" if fnrs else ""
    print(f"{name}: final mIoU {miou:.4f}{extra}  ({time.time() - t0:.0f}s)")
