"""
Scoring a completion and merging it into the measured scene
===========================================================

Without a trained network, the gap scene itself is the weakest completion
and the true complete scene the strongest one. Both are scored against the
complete scene, then the strong one is merged into the gap scene so that
only points in the hole are added.
"""

import numpy as np

from occlusynth.geom import PointCloud
from occlusynth.metrics import evaluate, plane_stats
from occlusynth.pipeline import synthetic_corpus
from occlusynth.postprocess import MergeConfig, merge_completion

raw = next(synthetic_corpus(seed=3, n_scenes=1))
complete = PointCloud(raw.complete.points)
gapped = PointCloud(raw.gapped.points)
print(f"scene: {len(complete)} points, {raw.removed} hidden by the car")

# metres here, so a 5 cm F-score threshold
weak = evaluate(gapped, complete, d=0.05)
print(f"gap only:  CD {weak.cd:.4f} m^2  P {weak.precision:.3f}  R {weak.recall:.3f}  F {weak.fscore:.3f}")

merged = merge_completion(gapped, complete, MergeConfig(0.08))
added = merged.extra["provenance"] == 1
print(f"merge added {added.sum()} points; measured points kept: "
      f"{np.array_equal(merged.points[:len(gapped)], gapped.points)}")

strong = evaluate(PointCloud(merged.points), complete, d=0.05)
print(f"merged:    CD {strong.cd:.4f} m^2  P {strong.precision:.3f}  R {strong.recall:.3f}  F {strong.fscore:.3f}")

# how far the filled points sit from the local surface of the complete scene
stats = plane_stats(merged.points[added], complete.points)
print(f"filled points within 5 cm of the local plane: {stats.within_5cm:.1%}, "
      f"within 10 cm: {stats.within_10cm:.1%}")
