# %% [markdown]
# # A short training run
#
# Build a tiny synthetic benchmark with one click per object, train the
# click-only baseline and the full consistency objective for a few
# epochs, and compare test mIoU.  Numbers at this size are noisy; the
# point is to see the pieces working together.

# %%
import tempfile
from pathlib import Path

from racseg.synthdata import OTOC, SceneConfig, make_dataset
from racseg.trainer import TrainConfig, read_metrics, run_training

work = Path(tempfile.mkdtemp())
manifest = make_dataset(SceneConfig(n_points=1024), n_train=6, n_test=2, scheme=OTOC, out_dir=work / "data")
print("dataset in", manifest.parent)

# %%
runs = {
    "clicks only": TrainConfig(lambda1=0, lambda2=0, lambda3=0, epochs=60, hidden=32),
    "full objective": TrainConfig(epochs=60, hidden=32),
}
for name, config in runs.items():
    rows = read_metrics(run_training(config, manifest, work / name.replace(" ", "_")))
    train = [r for r in rows if r["seg"] is not None]
    evals = [r for r in rows if r["miou"] is not None]
    print(f"{name:15s} final loss {train[-1]['total']:.3f}  "
          f"reliable fraction {train[-1]['reliable_frac']:.2f}  test mIoU {evals[-1]['miou']:.3f}")

# %% [markdown]
# The same run from a shell:
#
#     racseg gen-data run.yaml data/
#     racseg train run.yaml data/manifest.tsv runs/full --deterministic
#     racseg eval runs/full/checkpoint.bin data/manifest.tsv
