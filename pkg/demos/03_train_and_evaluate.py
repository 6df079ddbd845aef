"""Train a small two-stream model, evaluate it, and round-trip a checkpoint.

The architecture is the default one scaled down (fewer channels, 64-pixel
patches, a narrow head) so the demo finishes in well under a minute on one core.

Run:  python3 demos/03_train_and_evaluate.py
"""
import tempfile
from pathlib import Path

import numpy as np

from pyramid_iqa import data
from pyramid_iqa.evaluation import evaluate
from pyramid_iqa.model import ModelConfig, build_model, load_checkpoint, predict_image, save_checkpoint
from pyramid_iqa.optim import TrainConfig, train

root = Path(tempfile.mkdtemp())
manifest = data.synth_generate(root, n_refs=6, levels=3, rng=np.random.default_rng(0), size=128)
train_m, test_m = data.split_by_reference(manifest, 0.8, np.random.default_rng(0))

# %% Model and optimiser settings
cfg = ModelConfig(conv_channels=(4, 4, 8, 8, 8), fc_sizes=(32, 16, 1), patch_size=64,
                  spp_bins=(1, 2, 4), fpn_channels=8, seed=0)
print("head input width", cfg.head_input_width)
model = build_model(cfg)
tcfg = TrainConfig(batch_size=16, epochs=15, patches_per_image=4, seed=0)


def show(epoch, loss):
    if epoch % 5 == 0:
        print(f"epoch {epoch:2d}  mean loss {loss:.3f}")


model, log = train(model, data.load_samples(train_m), tcfg, on_epoch=show)

# %% Held-out references only
report = evaluate(model, test_m)
print(f"held-out SRCC {report.srcc:.3f}  PLCC {report.plcc:.3f}  on {len(report.pairs)} images")

# %% Checkpoints restore the exact same numbers
path = root / "model.piqa"
save_checkpoint(model, path)
again = load_checkpoint(path)
s = data.load_sample(test_m[0])
print("score before/after reload:", predict_image(model, s.distorted, s.residual),
      predict_image(again, s.distorted, s.residual))
