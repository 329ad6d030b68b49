# %% [markdown]
# # The context-shapes dataset
#
# Each image shows one bright shape (the ROI) on a dark red or dark blue
# field. The label combines both: 4 shapes x 2 backgrounds = 8 classes. The
# shape's own colour is drawn independently of the background, and a thin
# grey halo separates the two, so a model that only sees the ROI can name
# the shape but has to guess the background. That caps blackout-style
# models at 50%.

# %%
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from roilab.data import SynthConfig, generate_context_shapes
from roilab.metrics import DESK_EDGES

cfg = SynthConfig(image_size=64, samples_per_class=200, noise_std=0.0)
ds = generate_context_shapes(cfg, seed=0)
print(f"{len(ds)} samples, {cfg.num_classes} classes, split sizes:",
      {s: ds.splits.count(s) for s in ("train", "test")})

# %% [markdown]
# ## ROI sizes
#
# Areas are drawn log-uniformly so the small buckets fill up. With the
# default scale range the largest ROI covers 30% of the frame (about 1229
# pixels), so the top bucket stays empty.

# %%
counts = np.histogram(ds.roi_areas, bins=DESK_EDGES)[0]
for lo, hi, c in zip(DESK_EDGES[:-1], DESK_EDGES[1:], counts):
    print(f"  [{lo:4d}, {hi:4d})  {c:5d}  " + "#" * int(60 * c / counts.max()))

# %% [markdown]
# ## What the ROI interior tells you about the background
#
# Nothing: the mean ROI colour is the same for both contexts.

# %%
inside = np.array([ds.images[i][:, ds.masks[i] == 1].mean(axis=1) for i in range(len(ds))])
for c in range(cfg.num_contexts):
    print(f"context {c}: mean ROI rgb = {np.round(inside[ds.labels % 2 == c].mean(axis=0), 3)}")

# %% [markdown]
# ## A contact sheet
#
# Pass an output path to save the first 16 images next to their masks.

# %%
if len(sys.argv) > 1:
    tiles = [np.concatenate([ds.images[i].transpose(1, 2, 0), np.repeat(ds.masks[i][..., None], 3, axis=2)], axis=1)
             for i in range(16)]
    sheet = np.concatenate([np.concatenate(tiles[r * 4:(r + 1) * 4], axis=1) for r in range(4)], axis=0)
    Image.fromarray((sheet * 255).astype(np.uint8)).resize((sheet.shape[1] * 2, sheet.shape[0] * 2), Image.NEAREST).save(sys.argv[1])
    print("saved", Path(sys.argv[1]).resolve())
