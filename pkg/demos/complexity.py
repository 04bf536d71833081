# How the cost grows with image size.
#
# Every count comes from a symbolic description of the layers, so nothing is
# actually run. A multiply-accumulate counts as two FLOPs.

import numpy as np

from vmseg.flops import CONVENTION, flops_table, r_squared
from vmseg.vmunet import count_parameters, full_config, tiny_config

print(CONVENTION)
resolutions = [224, 448, 896, 1792]
rows = flops_table(["vmunet", "vit-core", "hybrid-core", "cnn-core"], resolutions)
for r, arch, g in rows:
    print(f"{r:5d}  {arch:12s} {g:12.2f} GFLOPs")

# A scan costs O(L) and attention costs O(L^2), so plotted against pixel count
# the first is a line and the second a parabola.
px = np.array(resolutions, float) ** 2
vm = [g for _, a, g in rows if a == "vmunet"]
vit = [g for _, a, g in rows if a == "vit-core"]
print("vmunet   linear R^2   ", r_squared(px, vm, 1))
print("vit-core quadratic R^2", r_squared(px, vit, 2))

hyb = [g for _, a, g in rows if a == "hybrid-core"]
print(f"saving vs hybrid at 1792: {100 * (1 - vm[-1] / hyb[-1]):.1f}%")

print("parameters, full:", count_parameters(full_config()))
print("parameters, tiny:", count_parameters(tiny_config()))
