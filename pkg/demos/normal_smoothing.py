"""Noisy normals on a scanned tube: PCA, orientation and L0 smoothing.

    python3 demos/normal_smoothing.py
"""

import numpy as np

from adaptmesh.geometry import build_scanblock
from adaptmesh.normals import SmoothingConfig, process_block_normals
from adaptmesh.sim import Scene, ScannerSpec, make_trajectory, simulate_sequence, straight_tube


def radial_error_deg(points, normals):
    inward = -np.c_[np.zeros(len(points)), points[:, 1:]]
    inward /= np.linalg.norm(inward, axis=1, keepdims=True)
    return np.degrees(np.arccos(np.clip(np.einsum("ij,ij->i", normals, inward), -1, 1)))


def main():
    scene = Scene(straight_tube(10.0))
    scanner = ScannerSpec(range_noise=0.03)
    _, poses = make_trajectory(scene, scanner)
    frames = simulate_sequence(scene, scanner, poses[:20], seed=1)
    block = build_scanblock(frames, 20)
    world = block.base_pose.apply(block.cloud.points)
    for smooth in (False, True):
        res = process_block_normals(block, SmoothingConfig(), smooth=smooth)
        err = radial_error_deg(world, res.normals @ block.base_pose.rotation.T)
        print(f"smooth={smooth!s:5}  mean {err.mean():6.2f} deg  median {np.median(err):6.2f} deg  "
              f"flipped {np.mean(err > 90):.3%}")


if __name__ == "__main__":
    main()
