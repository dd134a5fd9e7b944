"""The gradient-quality study: stored gradients vs finite differences.

Five random spheres are rendered into 60 noisy depth images (quadratic
Kinect-like axial noise) and fused at ground-truth poses with 1 cm voxels and
a 10-voxel truncation band. For every voxel we then compare four gradient
estimates against the analytic direction: the accumulated per-voxel gradient,
and forward/backward/central finite differences of the fused distances.

The stored gradients win at every band width; the mean deviation of central
differences at 10 voxels from the surface is roughly 1.6x larger. Outputs:
a CSV table, a gnuplot-ready .dat file and normal-map slice images under
demos/output/gradient_study/.
"""

import pathlib
import time

import numpy as np

from gradsdf import FusionParams
from gradsdf.synthetic import (default_eval_intrinsics, fuse_scene,
                               gradient_deviation_stats, random_sphere_scene,
                               write_gradient_slice_images, write_stats_csv,
                               write_stats_plot_data)

out_dir = pathlib.Path(__file__).parent / "output" / "gradient_study"
out_dir.mkdir(parents=True, exist_ok=True)

scene = random_sphere_scene(seed=42, n_spheres=5, n_frames=60, noise_enabled=True)
params = FusionParams(voxel_size=0.01, trunc_factor=10.0)

t0 = time.time()
vol = fuse_scene(scene, default_eval_intrinsics(), params)
print(f"fused {len(scene.trajectory)} noisy frames -> {vol.n_voxels} voxels "
      f"({time.time()-t0:.0f} s)")

stats = gradient_deviation_stats(vol, scene, max_band=10)
print("\nmean angular deviation from the analytic gradient (degrees):")
print("  band  stored  forward  backward  central")
for i, x in enumerate(stats.thresholds):
    row = [stats.schemes[s]["mean"][i]
           for s in ("stored", "forward", "backward", "central")]
    print("  %4d  %6.2f  %7.2f  %8.2f  %7.2f" % (x, *row))

s10 = stats.row("stored", 10)[0]
c10 = stats.row("central", 10)[0]
print(f"\nat 10 voxels from the surface: stored {s10:.2f} deg vs "
      f"central differences {c10:.2f} deg ({c10 / s10:.2f}x)")

write_stats_csv(stats, out_dir / "gradient_deviation.csv")
write_stats_plot_data(stats, out_dir / "gradient_deviation.dat")
images = write_gradient_slice_images(vol, scene, out_dir, n_slices=3)
print(f"\nwrote CSV, plot data and {len(images)} slice images to {out_dir}")
