"""
Dual-attention encoder and its heatmaps
=======================================

Encodes one synthetic image with the two-branch encoder (windowed
spatial attention next to channel-group attention), prints where the
FLOPs went, and writes the window-attention saliency as a PGM heatmap.
"""

import numpy as np

from dualcap import flops
from dualcap.autograd import Tensor
from dualcap.data import make_synthetic, write_netpbm
from dualcap.encoder import EncoderConfig, encode, heatmap, heatmap_to_gray, init_encoder_params

rng = np.random.default_rng(0)

ds = make_synthetic(2, grid=16, seed=3)
record = ds.records[0]
print("image:", record.name, "caption:", record.captions[0])

cfg = EncoderConfig(image_size=16, patch_size=4, image_channels=3, dim=16,
                    heads=2, window_patches=4, groups=4, depth=2)
params = init_encoder_params(cfg, rng)

with flops.count_flops() as fc:
    out = encode(Tensor(record.image), cfg, params)

print(f"\nfeatures: {out.features.shape} (P x 2C), {fc.total} FLOPs total")
for scope, count in sorted(fc.by_scope.items()):
    print(f"  {scope:32s} {count:>10d}")

# the windowed branch caps every attention matrix at P_w x P_w
w = out.spatial_weights[0]
print(f"\nspatial weights per block: {w.shape} (N_w x P_w x P_w)")
print("rows are distributions:", np.allclose(w.sum(axis=-1), 1.0))

# saliency = attention received per patch, min-max scaled to [0, 1]
hm = heatmap(out, block=-1)
print("\nheatmap grid:\n", np.round(hm, 2))
write_netpbm("encoder-heatmap.pgm", heatmap_to_gray(hm))
print("wrote encoder-heatmap.pgm")
