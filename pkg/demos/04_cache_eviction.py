"""Redundancy + importance scoring and top-M selection on a crafted cache.

Run:  python3 demos/04_cache_eviction.py
"""

import numpy as np

from kvlatent import eviction as E

# Six key vectors in one head/layer: positions 0 and 1 are near-duplicates,
# position 3 is orthogonal to everything, position 5 is padding.
keys = np.zeros((1, 6, 1, 1, 4))
keys[0, 0, 0, 0] = [1.0, 0.0, 0.0, 0.0]
keys[0, 1, 0, 0] = [0.99, 0.14, 0.0, 0.0] / np.linalg.norm([0.99, 0.14, 0.0, 0.0])
keys[0, 2, 0, 0] = [0.7, 0.7, 0.0, 0.0] / np.linalg.norm([0.7, 0.7, 0.0, 0.0])
keys[0, 3, 0, 0] = [0.0, 0.0, 1.0, 0.0]
keys[0, 4, 0, 0] = [0.5, 0.0, 0.0, 0.86]
values = keys * 2.0
pad_c = np.array([[True, True, True, True, True, False]])

# The answer attends mostly to positions 2 and 4.
attn = np.zeros((1, 2, 6, 1, 1))
attn[0, 0, :5, 0, 0] = [0.05, 0.05, 0.50, 0.10, 0.30]
attn[0, 1, :5, 0, 0] = [0.05, 0.05, 0.40, 0.10, 0.40]
pad_a = np.ones((1, 2), dtype=bool)

for lam in (0.0, 0.1, 1.0):
    scores = E.score_cache(keys, attn, pad_c, pad_a, kv_groups=1, lam=lam)
    comp = E.combine_and_select(scores, keys, values, pad_c, m=3)
    kept = comp.indices[0, :, 0, 0].tolist()
    print(f"lambda={lam:>3}: kept source positions {kept}"
          + ("  (diversity only)" if lam == 0 else "  (attention only)" if lam == 1 else ""))

print("\nscores at lambda=0.1 (position: importance, redundancy, combined):")
scores = E.score_cache(keys, attn, pad_c, pad_a, kv_groups=1, lam=0.1)
for i in range(6):
    tag = " <- pad, never selected" if not pad_c[0, i] else ""
    print(f"  {i}: I={scores.importance[0, i, 0, 0]:.3f}"
          f"  R={scores.redundancy[0, i, 0, 0]:.3f}"
          f"  S={scores.combined[0, i, 0, 0]:.3f}{tag}")

crop = E.crop_baseline(keys, values, pad_c, m=3)
print("\nright-crop baseline keeps", crop.indices[0, :, 0, 0].tolist())

print("\nJSON debug dump (truncated):")
print(E.scores_to_json(scores, comp)[:160], "...")
