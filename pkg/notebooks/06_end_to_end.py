# %% [markdown]
# # End to end through the pipeline API
#
# The same stages the `boxood` command runs, on a small fixture and a
# short schedule. Use the acceptance suite for the full 18-epoch run.

# %%
import tempfile
from pathlib import Path

from boxood import config, pipeline
from boxood.shapes import make_desk_fixture

work = Path(tempfile.mkdtemp(prefix="boxood-nb6-"))
make_desk_fixture(work / "fx", seed=2024, n_train=80, n_test=30, n_ood=30)
cfg = config.from_dict({
    "paths": {"in_annotations": "fx/train/annotations.json",
              "in_test_annotations": "fx/test/annotations.json",
              "ood_test_annotations": "fx/ood_raw/annotations.json",
              "output_root": "runs"},
    "strategy": "distance",
    "sigma": [1.0, 2.5],
    "n_outlier_images": 60,
    "train": {"epochs": 4, "lr_decay_epochs": [2, 3]},
}, base_dir=str(work))
print("run id", cfg.run_id)

# %%
for info in pipeline.synthesize(cfg):
    print(info["variant"], info["images"], "images")
for info in pipeline.train(cfg):
    print(info["variant"], info["epochs"], "epochs, final loss", round(info["final_total"], 3))

# %%
reports = pipeline.evaluate(cfg)
print((cfg.run_dir() / "report.md").read_text())
print("sweep figure:", cfg.run_dir() / "sigma_sweep.png")
