"""
Splitting a feature map into identity and domain parts
======================================================

Builds a model, pushes a small batch through it and looks at what the
decoupling modules produce: the per-channel attention, the two halves that
sum back to the normalized map, and the lift masks MSLS uses to refine the
domain stream.
"""
import numpy as np

from lde.decouple import DdmParams, ddm_forward, msls_masks
from lde.model import LdeModel, ModelConfig
from lde.numcore import Rng, parameter

rng = Rng(0)

# a single DDM on an 8-channel map
C = 8
p = DdmParams(parameter(np.ones(C // 2)), parameter(np.zeros(C // 2)), parameter(np.ones(C // 2)),
              parameter(np.zeros(C // 2)), parameter(rng.normal((2, C))), parameter(np.zeros(2)),
              parameter(rng.normal((C, 2))), parameter(np.zeros(C)))
F = parameter(3 * rng.normal((4, C, 6, 6)) + 1)
F_plus, F_minus, a, F_norm = ddm_forward(F, p, "train")

print("attention for sample 0:", np.round(a.data[0], 3))
print("max |F+ + F- - F'|:", np.abs(F_plus.data + F_minus.data - F_norm.data).max())

# first half of the channels is instance-normalized: zero mean per sample and channel
print("IN half, per-sample channel means:", np.abs(F_norm.data[:, : C // 2].mean(axis=(2, 3))).max())
# second half is batch-normalized: zero mean per channel over the batch
print("BN half, batch channel means:     ", np.abs(F_norm.data[:, C // 2:].mean(axis=(0, 2, 3))).max())

# lift masks: keep entries whose self-similarity beats the cross-level average
Q = np.array([[1.0, 0.2], [0.2, 1.0]])
M = np.array([[0.5, 0.1], [0.3, 0.9]])
lift, suppress = msls_masks(Q, [M, M, M])
print("\nlift mask:\n", lift, "\nsuppress mask:\n", suppress)

# the full model: f+ drives the classifier, f- only feeds the domain statistics
cfg = ModelConfig(num_ids=5, height=32, width=32, stem_width=4, widths=(4, 8, 8, 8), reduction=2)
model = LdeModel(cfg, rng=Rng(1))
out = model.forward(rng.normal((4, 3, 32, 32)), mode="train")
print("\nf+", out.f_plus.shape, " f-", out.f_minus.shape, " logits", out.logits.shape)
print("eval embedding:", model.embed(rng.normal((2, 3, 32, 32))).shape)
