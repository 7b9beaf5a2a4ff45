"""A tour of the synthetic arena: node placement, the three sensor
renderings, and how a pixel plus a depth reading maps back to the world.

Run with ``python demos/01_sensor_world.py``; it takes a few seconds.
"""

# %%
import numpy as np

from poseloc.geometry import Arena, encode_pose, local_to_world, world_to_local
from poseloc.synthworld import generate_trajectory, invert_observation, render_frame, sample_configuration

arena = Arena()
view = sample_configuration(seed=7, arena=arena, config_id="demo")
for i, pose in enumerate(view.node_poses):
    print(f"node {i}: position {np.round(pose.position, 2)}, q {np.round(pose.quaternion, 3)}")
    print(f"        encoded {np.round(encode_pose(pose, arena), 3)}")

# %% A target walking in a circle, seen by node 0.
traj = generate_trajectory("circular", duration_s=10, rate_hz=15, seed=3, arena=arena)
pose = view.node_poses[0]
target = traj.positions[len(traj) // 2]
local = world_to_local(pose, target)
print("target in node-0 frame (x forward, y left, z up):", np.round(local, 3))
assert np.allclose(local_to_world(pose, local), target)

# %% Noiseless renders: the camera peak and the depth value recover the position.
cam = render_frame(pose, target, "camera_like")
depth = render_frame(pose, target, "depth_like")
radar = render_frame(pose, target, "radar_like")
print("shapes:", cam.shape, depth.shape, radar.shape)
bg = render_frame(pose, np.array([-50.0, -50.0, 0.1]), "camera_like")  # target far outside the view
v, u = np.unravel_index(np.argmax(cam - bg), cam.shape)
recovered = invert_observation((u, v), depth[v, u], pose)
print(f"peak pixel (u={u}, v={v}), depth {depth[v, u]:.3f} m")
print("recovered world position:", np.round(recovered, 3), "true:", np.round(target, 3))

# %% Optional: look at the frames.
try:
    import matplotlib.pyplot as plt
except ImportError:
    plt = None
if plt is not None:
    fig, axes = plt.subplots(1, 3, figsize=(10, 3))
    for ax, img, title in zip(axes, (cam, depth, radar), ("camera_like", "depth_like", "radar_like (range x azimuth)")):
        ax.imshow(img, cmap="viridis")
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig("sensor_world.png", dpi=100)
    print("wrote sensor_world.png")
