# %% [markdown]
# # Diagnostics report
#
# The report compares reconstruction MSE, code-histogram loss and block-energy
# spread before and after rotation, and adds the per-block bound factors.

# %%
import tempfile
from pathlib import Path

from torq import BlockShape, build_report, calibrate, emit_report
from torq.synth import generate_blocks

data = generate_blocks("lognormal", 64, BlockShape(16, 32), seed=2)
report = build_report(data, calibrate(data))
for key in ("mse_before", "mse_after", "code_loss_before", "code_loss_after"):
    print(f"{key:17s} {getattr(report, key):.5f}")
print("pooled bound", report.bound_after["pooled"])

# %%
out = Path(tempfile.mkdtemp())
emit_report(report, out / "report.json", out / "hist.csv")
print((out / "hist.csv").read_text())
