"""Two routes to the same adapter output, one without the big buffer.

The obvious forward materializes the m x n effective weight.  The
block-split route scales the input by one alpha row at a time, multiplies
against the matching block of weight rows, and rescales columns by beta,
so the largest transient is batch-sized.  Both give identical answers;
the allocation log proves the big buffer never exists.
"""

import numpy as np

from spp import (
    Rng,
    Unstructured,
    apply_mask,
    build_mask,
    score_magnitude,
    spp_forward_naive,
    spp_forward_optimized,
    spp_init,
    track_allocations,
)

rng = Rng(2)
m, n, b, r = 64, 48, 4, 8
w = rng.uniform(-1.0, 1.0, m, n)
layer = apply_mask(w, build_mask(score_magnitude(w), Unstructured(0.5)))
ad = spp_init(m, n, r, 1.0, 0.0, rng)
ad.beta = rng.uniform(-1.0, 1.0, m, 1)
x = rng.uniform(-1.0, 1.0, b, n)

with track_allocations() as log:
    y_ref, _ = spp_forward_naive(x, layer, ad)
naive_allocs = list(log)

with track_allocations() as log:
    y_opt, _ = spp_forward_optimized(x, layer, ad)
opt_allocs = list(log)

print("outputs agree:", np.allclose(y_ref, y_opt, rtol=1e-12, atol=0.0))
print("worst abs diff:", float(np.abs(y_ref - y_opt).max()))

big = (m, n)
print(f"reference path allocated {big}:", big in naive_allocs)
print(f"block-split path allocated {big}:", big in opt_allocs)
largest = max(opt_allocs, key=lambda s: s[0] * s[1])
print("largest block-split transient:", largest, "vs weight", big)
