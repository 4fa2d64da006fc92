# %% [markdown]
# # Calibrate, quantize, fuse
#
# A bundle holds both rotations and the per-position scales. The inverse can
# be applied explicitly or folded into the next linear layer's weights.

# %%
import numpy as np

from torq import BlockShape, calibrate, explicit_inverse, forward_quantize, fuse_weights
from torq.synth import generate_blocks

data = generate_blocks("outlier_mixture", 64, BlockShape(16, 16), seed=1)
bundle = calibrate(data)
print(bundle.calib_meta)
print("parameters", bundle.parameter_count)

# %%
x = data.samples[0]
zhat, codes = forward_quantize(x, bundle, "dynamic")
w = np.random.default_rng(0).standard_normal((4, x.size))
fused = fuse_weights(w, bundle)
lhs = fused.fused @ zhat.T.ravel()
rhs = w @ explicit_inverse(zhat, bundle)
print("fused vs explicit", np.abs(lhs - rhs).max())
