"""Compare the negative-sampling strategies by false-negative rate.

A false negative is a sampled "negative" pixel that actually shares the
anchor's class; pushing those apart hurts training. The benchmark pool has
class-homogeneous images, so same-image pixels are the dangerous ones.

Run:  python3 demos/demo_sampling_fnr.py
"""

import numpy as np

from pixseg.sampling import (STRATEGIES, fnr_benchmark, gumbel_topk,
                             make_benchmark_pool, op_count, DENSITY_FNS)

rng = np.random.default_rng(42)

# one pool, one anchor, side by side
pool = make_benchmark_pool(rng)
anchor = 17
print(f"pool: {pool.size} candidate pixels, anchor class {pool.gt_label[anchor]}")
for name in STRATEGIES:
    w = DENSITY_FNS[name](anchor, pool)
    idx, _ = gumbel_topk(w, 20, rng)
    fn = (pool.gt_label[idx] == pool.gt_label[anchor]).mean()
    print(f"  {name:12s} support={int((w > 0).sum()):4d}  "
          f"sampled-FNR={fn:.2f}")

# the full benchmark: averaged over many pools and anchors
print("\nfnr_benchmark (20 negatives, 20 pools x 64 anchors):")
for row in fnr_benchmark(STRATEGIES, num_negatives=20, trials=20, rng=rng):
    print(f"  {row['strategy']:12s} FNR = {row['fnr_mean']:.4f}"
          f" +- {row['fnr_std']:.4f}")

# why sample at all: multiply-add cost of all-pairs vs sampled similarities
dense = op_count(4356, 200, 128, 20, "all_pairs")
sparse = op_count(4356, 200, 128, 20, "sampled")
print(f"\nall-pairs MulAdds {dense:,} vs sampled {sparse:,}"
      f"  -> {dense / sparse:.1f}x fewer")
