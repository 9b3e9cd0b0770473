"""Adaptive neural-SDF meshing of LiDAR scans in tunnels and caves.

Modules
-------
geometry   poses, point clouds, scanblocks, file formats
normals    PCA normals, polyline orientation, L0 smoothing
field      neural point map, SDF sampling and training
mesher     marching cubes with support gating, mesh I/O, volume
metrics    accuracy / completeness / Chamfer-L1 / F-score and rewards
agent      state pyramid, actor-critic, GAE, PPO
sim        synthetic scenes, virtual LiDAR, trajectories
pipeline   per-scanblock reconstruction shared by env and CLI
env        the scanblock-per-step environment
"""

__version__ = "0.1.0"
