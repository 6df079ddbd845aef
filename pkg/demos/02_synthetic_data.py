"""Render a small synthetic quality dataset and look at what the model sees.

Each pristine reference is degraded by blur, noise and quantisation at
increasing strength.  Labels are pseudo opinion scores that fall with the
level.  The network is fed the distorted luminance and the residual map
|distorted - reference|, cut into patches.

Run:  python3 demos/02_synthetic_data.py [out_dir]
"""
import sys
import tempfile
from pathlib import Path

import numpy as np

from pyramid_iqa import data
from pyramid_iqa.evaluation import psnr

out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp()) / "synth"

# %% 3 references x 3 families x 4 levels; the same seed always gives the same bytes
manifest = data.synth_generate(out, n_refs=3, levels=4, rng=np.random.default_rng(0), size=256)
print(f"{len(manifest)} distorted images, manifest at {out / 'manifest.csv'}")

# %% Scores and PSNR per level for one reference
for s in manifest[:12]:
    d, o = data.read_image(s.dist_path), data.read_image(s.ref_path)
    fam, level = s.dist_path.parent.parent.name, s.dist_path.parent.name
    print(f"{fam:>6} level {level}: pseudo-MOS {s.score:5.2f}  PSNR {psnr(d, o):6.2f} dB")

# %% Residual map and patches for one image
loaded = data.load_sample(manifest[5])
print("residual range", float(loaded.residual.min()), float(loaded.residual.max()))
grid = data.extract_patches(loaded.distorted, loaded.residual, "test")
crops = data.extract_patches(loaded.distorted, loaded.residual, "train", count=8,
                             rng=np.random.default_rng(1))
print(f"test grid: {len(grid)} patches, training draw: {len(crops)} random crops")

# %% Content-disjoint split: all distortions of a reference land on one side
train_m, test_m = data.split_by_reference(manifest, 0.8, np.random.default_rng(0))
print("train refs", train_m.ref_ids, "test refs", test_m.ref_ids)
