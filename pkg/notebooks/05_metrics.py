# %% [markdown]
# # Metrics: AUROC, FPR at 95% TPR, and mAP

# %%
import numpy as np

from boxood.dataset import Annotation, BoundingBox, DetectionDataset, ImageRecord
from boxood.metrics import Detection, auroc_from_scores, fpr_from_scores, mean_average_precision

rng = np.random.default_rng(1)
s_in = rng.beta(2, 5, 400)     # in-distribution objects tend to score low
s_ood = rng.beta(5, 2, 300)
print("AUROC", auroc_from_scores(s_in, s_ood))
print("FPR95", fpr_from_scores(s_in, s_ood))

# %% [markdown]
# Ties count half in the AUROC; a constant score gives exactly 0.5.

# %%
print(auroc_from_scores(np.full(10, 0.5), np.full(7, 0.5)))

# %% [markdown]
# mAP uses all-points interpolation at IoU 0.5 with greedy matching.

# %%
truth = DetectionDataset([(1, "circle")], [ImageRecord(1, "x.png", 100, 100)],
                         [Annotation(1, BoundingBox(0, 0, 20, 20, 1)),
                          Annotation(1, BoundingBox(50, 50, 20, 20, 1)),
                          Annotation(1, BoundingBox(10, 60, 30, 30, 1))])
dets = [Detection(1, BoundingBox(0, 0, 20, 20, 1), 0.9, 0),
        Detection(1, BoundingBox(30, 30, 10, 10, 1), 0.8, 1),
        Detection(1, BoundingBox(51, 51, 20, 20, 1), 0.7, 2),
        Detection(1, BoundingBox(10, 60, 30, 30, 1), 0.6, 3)]
print(mean_average_precision(dets, truth))   # AP = 5/6
