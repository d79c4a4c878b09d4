"""
Baking a portrait into a UV texture, coarse to fine.

With the geometry known, rendering is a sparse linear map from texels to
pixels. We invert it with Adam, starting at 32x32 and upsampling the
result as the start of each finer level.

Outputs land in demos/output/.
"""

# %%
import time
from pathlib import Path

import numpy as np

from avatarfit import fixture
from avatarfit.imageio import save_png
from avatarfit.raster import RenderOperator, rasterize, render
from avatarfit.texfit import TexFitConfig, fit_texture_buffer

OUT = Path(__file__).parent / "output"
OUT.mkdir(exist_ok=True)

fx = fixture.generate(seed=0)
buf = rasterize(fx.gt_mesh, fx.gt_pose, fx.intrinsics, 512, 512)
print(f"portrait covers {buf.coverage.mean():.0%} of the image")

# %%
# Each covered pixel mixes four texels. Texels no pixel touches stay at their start value.
op = RenderOperator(buf, 1024, 1024)
weight = op.texel_weight()
print(f"render matrix {op.matrix.shape}, {op.matrix.nnz} non-zeros; {np.mean(weight > 0):.0%} of texels are seen")

# %%
t0 = time.perf_counter()
texture, report = fit_texture_buffer(buf, fx.portrait, TexFitConfig())
print(f"fitted in {time.perf_counter() - t0:.1f} s")
for level, trace in zip(report.levels, report.losses):
    print(f"  {level:5d}^2: loss {trace[0]:10.3f} -> {trace[-1]:8.3f}")

# %%
# Compare to the hidden ground truth where the portrait actually constrains the texture.
seen = weight > 0.05
mse = np.mean((texture[seen] - fx.gt_texture[seen]) ** 2)
print(f"PSNR on well-observed texels: {10 * np.log10(1 / mse):.1f} dB")
residual = np.abs(render(buf, texture) - fx.portrait).max()
print(f"largest re-render error: {residual:.2e}")

save_png(texture, OUT / "texture_fitted.png")
save_png(np.where(seen[..., None], texture, 0.0), OUT / "texture_seen.png")
print(f"wrote {OUT / 'texture_fitted.png'}")
