"""The two training losses and the gradient-checking harness.

Occupancy training optimizes a per-voxel cross entropy plus the
Lovasz-Softmax relaxation of the Jaccard loss on the rendered output of
every refinement stage. Both come with exact analytic gradients; the
harness compares every backward pass in the package against central finite
differences.
"""

import numpy as np

from gaussocc.nnprims import (
    cross_entropy_loss,
    lovasz_softmax_loss,
    run_gradcheck,
    softmax,
)

gen = np.random.default_rng(3)

# a toy 6x6x2 logit volume with 3 classes and a known label volume
logits = gen.normal(size=(6, 6, 2, 3))
labels = gen.integers(0, 3, size=(6, 6, 2))

ce, ce_grad = cross_entropy_loss(logits, labels)
print(f"cross entropy on random logits: {ce:.4f} (uniform logits would give "
      f"ln 3 = {np.log(3):.4f})")

probs = softmax(logits, axis=-1)
lv, lv_grad = lovasz_softmax_loss(probs, labels)
print(f"lovasz-softmax on the same prediction: {lv:.4f}")

# sharpening the correct logits drives both losses down
sharpened = logits.copy()
idx = np.indices(labels.shape)
sharpened[idx[0], idx[1], idx[2], labels] += 4.0
ce2, _ = cross_entropy_loss(sharpened, labels)
lv2, _ = lovasz_softmax_loss(softmax(sharpened, axis=-1), labels)
print(f"after boosting the true-class logits: cross entropy {ce2:.4f}, "
      f"lovasz {lv2:.4f}")

# a gradient step along the analytic gradient reduces the loss
step = logits - 0.5 * ce_grad * labels.size
ce3, _ = cross_entropy_loss(step, labels)
print(f"one gradient step on the cross entropy: {ce:.4f} -> {ce3:.4f}")

print("\nfinite-difference check of every primitive (h = 1e-5):")
print(f"{'primitive':<18} {'max rel':>12} {'mean rel':>12}")
for report in run_gradcheck(seed=0):
    print(f"{report.name:<18} {report.max_rel_error:12.3e} {report.mean_rel_error:12.3e}")
