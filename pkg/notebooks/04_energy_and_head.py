# %% [markdown]
# # Energy score and the OOD head

# %%
import numpy as np

from boxood.energy import (OODHeadParams, energy_score, ood_bce_loss, ood_focal_loss,
                             ood_head_forward, ood_probability)

confident = np.array([9.0, -2.0, -3.0])
unsure = np.array([0.3, 0.1, 0.2])
print("energy, confident:", energy_score(confident))
print("energy, unsure:   ", energy_score(unsure))
print("huge logits stay finite:", energy_score(np.array([1000.0, 999.0])))

# %% [markdown]
# The head maps the scalar energy to an in-distribution logit. Scores
# reported to the metrics are `1 - sigmoid(phi)`, so higher means more OOD.

# %%
head = OODHeadParams.init(16, seed=0)
for g in (confident, unsure):
    print(round(ood_head_forward(energy_score(g), head), 4), round(ood_probability(g, head), 4))

# %% [markdown]
# With gamma = 0 and unit weight the focal form is the plain in/out loss.

# %%
rng = np.random.default_rng(0)
phis = rng.normal(size=12)
labels = rng.random(12) < 0.5
print(ood_bce_loss(phis[labels], phis[~labels]), ood_focal_loss(phis, labels, gamma=0, weight=1))
print("default focal (gamma=2, weight=10):", ood_focal_loss(phis, labels))
