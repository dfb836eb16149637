"""
Scoring a segmenter: overlap metrics, zone analysis, agreement statistics
=========================================================================

Uses hand-sized arrays throughout so every number can be checked on paper:
Dice overlap, pooled precision, per-zone slice scores, volume errors, and
the method-agreement toolkit (Pearson with Fisher interval, Bland-Altman
limits, one-way ANOVA with Holm-adjusted pairwise follow-ups, Tukey
fences).

Run with:  python3 demos/03_agreement_statistics.py
"""

import numpy as np

from cartiseg import data as D
from cartiseg import metrics
from cartiseg import stats

# ---------------------------------------------------------------------------
# Dice similarity: 2|A n B| / (|A| + |B|)

gt = np.zeros((4, 4), np.uint8)
gt[1:3, 1:3] = 1                       # 4 pixels
pred = np.zeros((4, 4), np.uint8)
pred[1:3, 1:4] = 1                     # 6 pixels, 4 shared... trim one corner
pred[2, 3] = 0                         # -> 5 pixels, 4 shared
print(f"gt 4 px, prediction 5 px, overlap 4 -> "
      f"2D DSC {metrics.dsc_2d(pred, gt):.4f}  (2*4/(4+5))")
print(f"both empty slices score 1.0: "
      f"{metrics.dsc_2d(np.zeros((4, 4), np.uint8), np.zeros((4, 4), np.uint8))}")

# precision pools true/false positives over the whole set before dividing,
# so one noisy slice cannot be averaged away
a_pred = np.ones((2, 2), np.uint8)     # 4 predicted, 1 correct
a_gt = np.zeros((2, 2), np.uint8)
a_gt[0, 0] = 1
b_pred = np.zeros((2, 2), np.uint8)    # 1 predicted, 1 correct
b_pred[1, 1] = 1
b_gt = b_pred.copy()
pooled = metrics.precision_overall([(a_pred, a_gt), (b_pred, b_gt)])
per_img = np.mean([1 / 4, 1 / 1])
print(f"pooled precision {pooled:.3f} vs per-image average {per_img:.3f} "
      f"- pooling weighs the over-segmented slice properly")

# ---------------------------------------------------------------------------
# zone analysis: bin slices by how much cartilage they carry

counts = [0, 3, 10, 6, 0]              # per-slice gt pixel counts, peak 10
zones = metrics.zone_assignments(counts)
labels = ("0%", "0-33%", "33-66%", "66-100%")
for c, z in zip(counts, zones):
    print(f"  slice with {c:>2} gt px -> zone {labels[z]}")

# ---------------------------------------------------------------------------
# volumes: voxel count times voxel size; errors relative to ground truth

voxel = (0.5, 0.37, 0.37)
mask = D.MaskVolume(np.ones((10, 10, 10), np.uint8), voxel)
v = metrics.cartilage_volume(mask)
print()
print(f"1000 voxels at {voxel} mm -> {v:.2f} mm^3")
print(f"volume error |2522-2582|/2522 -> {metrics.volume_error(2522, 2582):.3f}%")
print(f"scan-rescan spread (2000, 1800) -> "
      f"{metrics.repeatability_pair(2000, 1800):.1f}% of the larger")

# ---------------------------------------------------------------------------
# method agreement on paired volume measurements (e.g. gt vs predicted)

gt_v = np.array([100.0, 200.0, 300.0])
pred_v = np.array([110.0, 190.0, 305.0])
r, p, ci = stats.pearson([1, 2, 3, 4], [2, 1, 4, 3])
print()
print(f"pearson on (1,2,3,4)/(2,1,4,3): r {r:.1f}, p {p:.3f}, "
      f"95% CI [{ci[0]:.3f}, {ci[1]:.3f}]")
bias, lo, hi = stats.bland_altman(gt_v, pred_v)
print(f"bland-altman on three volume pairs: bias {bias:.3f} mm^3, "
      f"limits of agreement [{lo:.2f}, {hi:.2f}]")
print("a correlation can be high while the methods still disagree by a "
      "constant offset; the limits catch that")

# ---------------------------------------------------------------------------
# do the zones differ? one-way ANOVA, then Holm-adjusted pairwise tests

zone_scores = [
    [0.91, 0.94, 0.93, 0.92],          # mid-volume slices
    [0.85, 0.88, 0.83, 0.86],          # low-content slices
    [0.66, 0.72, 0.69, 0.64],          # near-empty slices
]
f, (d1, d2), p = stats.one_way_anova(zone_scores)
print()
print(f"ANOVA across three zones: F({d1},{d2}) = {f:.2f}, p = {p:.2e}")
matrix = stats.posthoc_pairwise(zone_scores)
print("Holm-adjusted pairwise p-values:")
for row in matrix:
    print("  " + "  ".join("   -  " if np.isnan(v) else f"{v:.4f}" for v in row))

raw = [0.01, 0.04, 0.03]
adj = stats.holm_adjust(raw)
print(f"holm_adjust({raw}) = [{', '.join(f'{q:.3f}' for q in adj)}]")

# ---------------------------------------------------------------------------
# distribution summary with outlier fences

box = stats.boxplot_stats([1.0, 2.0, 3.0, 4.0, 100.0])
print()
print(f"boxplot of [1,2,3,4,100]: median {box.median}, IQR {box.iqr}, "
      f"fences [{box.low_fence}, {box.high_fence}], outliers {box.outliers}")
