"""
Synthetic scenes and confidence ground truth
=============================================

Render one frame, project its radar points into an image-aligned grid and build
the binary confidence target. Previews land in ``demo_out/``.
"""
from pathlib import Path

import numpy as np
from PIL import Image

from cafnet import GtConfig, SceneConfig, build_confidence_gt, build_radar_image, generate_scene
from cafnet.harness import preview
from cafnet.scene import accumulate_depth

out = Path("demo_out")
out.mkdir(exist_ok=True)

# A three-frame sequence, so neighbouring lidar sweeps can be merged.
frames = generate_scene(SceneConfig(n_frames=3), seed=0)
frame = frames[1]
print(f"{len(frame.boxes)} objects, {len(frame.radar_points)} radar points "
      f"({sum(p.is_ghost for p in frame.radar_points)} ghosts)")
print(f"single-sweep lidar covers {np.mean(frame.lidar_depth > 0):.1%} of pixels")

# Radar image: depth, vx, vy, rcs, valid. Nearest point wins a shared pixel.
radar = build_radar_image(frame)
print("radar pixels:", int(radar[..., 4].sum()))

# Accumulate neighbours, fill holes, then mark pixels whose depth agrees with a radar point.
depth_acc = accumulate_depth(frames, 1, window=1)
conf = build_confidence_gt(frame, depth_acc, GtConfig())
print(f"confidence positives: {conf.mean():.2%}")

Image.fromarray((frame.image * 255).astype(np.uint8)).save(out / "image.png")
Image.fromarray(preview(depth_acc, 0.0, 80.0), mode="L").save(out / "depth_acc.png")
Image.fromarray(preview(conf, 0.0, 1.0), mode="L").save(out / "confidence_gt.png")
