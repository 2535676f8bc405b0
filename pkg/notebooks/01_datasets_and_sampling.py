# %% [markdown]
# # Datasets, eligibility and sampling
#
# Build a tiny shapes dataset, look at which boxes are large enough to be
# repainted, and draw a sample of source images with replacement.

# %%
import tempfile
from collections import Counter
from pathlib import Path

from boxood.dataset import (box_area, eligible_indices, filter_ood_test, load_dataset,
                              sample_with_repetition)
from boxood.shapes import IN_CLASSES, make_desk_fixture

work = Path(tempfile.mkdtemp(prefix="boxood-nb1-"))
paths = make_desk_fixture(work, seed=11, n_train=40, n_test=10, n_ood=20)
train = load_dataset(paths["train"])
print("categories, images, annotations:", train.counts())

# %% [markdown]
# Only boxes with area strictly above 2000 square pixels get repainted. The
# large object in each image qualifies; the optional small one never does.

# %%
for im in train.images[:5]:
    anns = train.annotations_for(im.id)
    print(im.id, [round(box_area(a.box)) for a in anns], "eligible:", eligible_indices(anns))

# %% [markdown]
# Sampling is uniform with replacement and fully determined by the seed.

# %%
ids = sample_with_repetition(train, 200, seed=3)
print(Counter(ids).most_common(5))
assert ids == sample_with_repetition(train, 200, seed=3)

# %% [markdown]
# The raw OOD split deliberately contains some in-distribution objects.
# Filtering drops every image that shows a training class.

# %%
raw = load_dataset(paths["ood_test"])
clean = filter_ood_test(raw, IN_CLASSES)
print(f"{len(raw.images)} raw OOD images -> {len(clean.images)} after filtering")
