# %% [markdown]
# # Prompts: generic templates and perturbed embeddings

# %%
import numpy as np

from boxood.prompts import (SIGMA_SWEEP, MockEmbedder, embed_class_name, load_templates,
                              perturb_embedding, random_generic_prompt, render_generic_prompt)

for t in load_templates()[:3]:
    print(t.index, t.text)
print(render_generic_prompt(9, "bus").text)

# %% [markdown]
# A generic prompt picks one of the 20 templates from a seeded stream.

# %%
print([random_generic_prompt("dog", s).template_index for s in range(10)])

# %% [markdown]
# The distance-based strategy moves the class-name embedding by isotropic
# Gaussian noise. The expected displacement grows like sigma * sqrt(d).

# %%
zeta = embed_class_name("dog", MockEmbedder(512))
for sigma in SIGMA_SWEEP:
    d = [np.linalg.norm(np.asarray(perturb_embedding(zeta, sigma, s).embedding) - zeta.vector)
         for s in range(500)]
    print(f"sigma={sigma:<5} mean displacement {np.mean(d):8.3f}   sigma*sqrt(512) = {sigma * 512 ** 0.5:8.3f}")
