"""
Asymmetric masks and per-token teacher weights
==============================================

The student sees a quarter of the patches; each teacher sees more, through
its own independent mask. Teacher tokens are then weighted per position by
how well they agree with the student (affinity) and with each other
(consensus).
"""

import numpy as np

from comad.autograd import Tensor
from comad.gating import GatingConfig, compute_gating
from comad.losses import fuse
from comad.masking import MaskSpec, sample_mask_set

# %%
# Masks on a 14x14 grid with the default ratios.
spec = MaskSpec(student=0.75, teachers=(0.5, 0.4, 0.3))
masks = sample_mask_set(batch=1, num_patches=196, spec=spec, seed=0)
for name, m in [("student", masks.student), *[(f"teacher {i}", t) for i, t in enumerate(masks.teachers)]]:
    print(f"{name:10s} keeps {int(m[0, 1:].sum()):3d}/196 patches (class token kept: {bool(m[0, 0])})")


def show(mask, side=14):
    rows = mask[0, 1:].reshape(side, side)
    return "\n".join("".join("#" if v else "." for v in row) for row in rows)


print("\nstudent view (# = visible):")
print(show(masks.student))

# %%
# Gating. Three teachers, one of which disagrees with everyone at every position.
rng = np.random.default_rng(1)
student = rng.standard_normal((1, 5, 8))
agree = student + 0.3 * rng.standard_normal((1, 5, 8))
teachers = [Tensor(agree), Tensor(agree + 0.1 * rng.standard_normal((1, 5, 8))), Tensor(-student)]
result = compute_gating(Tensor(student), teachers, GatingConfig(temperature=0.1))
print("\nper-teacher affinity s, consensus c and weight alpha at position 0:")
for m in range(3):
    print(f"  teacher {m}: s {result.s.data[0, 0, m]:+.3f}  c {result.c.data[0, 0, m]:+.3f}  alpha {result.alpha.data[0, 0, m]:.4f}")

# Rescaling a teacher's tokens changes nothing: every score is a cosine.
scaled = [teachers[0], Tensor(teachers[1].data * 50.0), teachers[2]]
same = np.allclose(compute_gating(Tensor(student), scaled, GatingConfig()).alpha.data, result.alpha.data)
print(f"alpha unchanged after scaling teacher 1 by 50: {same}")

# The fused target is a per-token convex combination of the teacher tokens.
fused = fuse(result.alpha, teachers).data
uniform = compute_gating(Tensor(student), teachers, GatingConfig(variant="uniform"))
mean_fused = fuse(uniform.alpha, teachers).data
cos = lambda a, b: float((a * b).sum() / np.linalg.norm(a) / np.linalg.norm(b))  # noqa: E731
print(f"cosine(student, gated target)   = {cos(student, fused):+.3f}")
print(f"cosine(student, averaged target) = {cos(student, mean_fused):+.3f}")
