# %% [markdown]
# # The 4-bit element grid
#
# An MXFP4 block stores one power-of-two scale and a signed e2m1 code per
# element. This walk-through shows the codeword table, the round-half-down
# projection and what the shared exponent does to a block.

# %%
import numpy as np

from torq.formats import MXFP4, MXINT4, NVFP4, block_scales, project_nearest, quantize_block

print("codewords  ", MXFP4.codewords)
print("boundaries ", MXFP4.boundaries)

# %% [markdown]
# Values exactly on a boundary go to the smaller magnitude; values past 6
# saturate.

# %%
probe = np.array([0.25, 0.75, 2.5, 5.0, 7.9, -3.5])
print(np.c_[probe, project_nearest(probe)])

# %% [markdown]
# The shared exponent is the largest power of two not exceeding the block
# maximum, so the normalized maximum lands in [1, 2).

# %%
rng = np.random.default_rng(0)
block = rng.standard_normal(32) * 3
s = float(block_scales(block[None])[0])
q = quantize_block(block, s)
print(f"scale {s}, max/scale {np.abs(block).max() / s:.3f}, mse {np.mean((q.dequantized - block) ** 2):.4f}")

# %%
for fmt in (MXFP4, MXINT4, NVFP4):
    sc = block_scales(block[None], fmt)[0]
    err = np.mean((quantize_block(block, sc, fmt).dequantized - block) ** 2)
    print(f"{fmt.name:7s} scale {sc:.4f}  mse {err:.4f}")
