"""
Completing a fitted texture and picking assets.

A texture baked from one photo has holes and carries whatever the eyes and
mouth looked like in that photo. Completion swaps in the template's eyes,
mouth and nostrils with a Poisson blend, matches the mouth and eyebrow
colours to the portrait, and fills the rest of the face from the template.
The last cell matches accessory embeddings against a small catalog.

Outputs land in demos/output/.
"""

# %%
from pathlib import Path

import numpy as np

from avatarfit import fixture
from avatarfit.assetmatch import cosine_similarity, match_all
from avatarfit.imageio import save_png
from avatarfit.raster import RenderOperator, rasterize
from avatarfit.texcomplete import complete_texture, poisson_blend, poisson_residual

OUT = Path(__file__).parent / "output"
OUT.mkdir(exist_ok=True)

# %%
# Poisson blending in miniature: paste a dark bump into a flat grey square.
# The blend reproduces the source's Laplacian, so the bump keeps its shape
# while its rim takes the grey of the target. A linear ramp would vanish:
# its Laplacian is zero.
n = 48
y, x = np.mgrid[0:n, 0:n] / n
mask = (x - 0.5) ** 2 + (y - 0.5) ** 2 < 0.3**2
source = 0.8 - 0.4 * np.exp(-((x - 0.5) ** 2 + (y - 0.5) ** 2) / 0.01)
target = np.full((n, n), 0.5)
blended = poisson_blend(source, target, mask)
print(f"bump blend: residual {poisson_residual(blended, source, target, mask):.1e}")
depth = lambda img: img[mask].max() - img[n // 2, n // 2]  # noqa: E731
print(f"bump depth inside the mask: source {depth(source):.3f}, blended {depth(blended):.3f}")
save_png(np.repeat(blended[..., None], 3, axis=2), OUT / "bump_blend.png")

# %%
# A cheap stand-in for a fitted texture: the ground truth where the portrait
# sees it, black elsewhere.
fx = fixture.generate(seed=0)
buf = rasterize(fx.gt_mesh, fx.gt_pose, fx.intrinsics, 512, 512)
seen = RenderOperator(buf, 1024, 1024).texel_weight() > 0
fitted = np.where(seen[..., None], fx.gt_texture, 0.0)
print(f"{np.mean(~seen):.0%} of texels were never observed")

# %%
albedo = complete_texture(fitted, fx.labels, fx.template_albedo, fx.portrait, fx.portrait_labels)
again = complete_texture(albedo, fx.labels, fx.template_albedo, fx.portrait, fx.portrait_labels)
print(f"completing twice changes at most {np.abs(again - albedo).max():.1e}")
save_png(fitted, OUT / "completion_input.png")
save_png(albedo, OUT / "completion_output.png")

# %%
matches = match_all(fx.queries, fx.catalog)
for category, entry in matches.items():
    sim = cosine_similarity(fx.queries[category], entry.embedding)
    hit = "as planted" if entry.id == fx.expected_assets[category] else "differs from planted"
    print(f"{category:10s} {entry.id:14s} cosine {sim:.3f} ({hit})")
